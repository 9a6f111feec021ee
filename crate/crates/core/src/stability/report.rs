//! Result tables rendered from sweep records, as CSV and aligned text.

use std::collections::BTreeMap;

use super::{aggregate_benchmark, summarize, JobRecord, Stats};

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for row in std::iter::once(&self.header).chain(&self.rows) {
            for (i, c) in row.iter().enumerate().take(cols) {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let line = |row: &Vec<String>| {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
                .collect();
            cells.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.header));
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

pub fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Records of one (row, task) cell.
#[derive(Clone, Debug)]
pub struct Cell {
    pub row: String,
    pub task: String,
    pub values: Vec<f64>,
    pub threshold: f64,
}

impl Cell {
    pub fn stats(&self) -> Stats {
        summarize(&self.values, self.threshold)
    }
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.iter().any(|o| o == s) {
            out.push(s.to_string());
        }
    }
    out
}

/// Cells of one group in first-appearance order of rows, then tasks.
pub fn cells(records: &[JobRecord], group: &str) -> Vec<Cell> {
    let recs: Vec<&JobRecord> = records.iter().filter(|r| r.group == group).collect();
    let mut out = Vec::new();
    for row in first_seen(recs.iter().map(|r| r.row.as_str())) {
        for task in first_seen(recs.iter().filter(|r| r.row == row).map(|r| r.result.task.as_str())) {
            let mine: Vec<&&JobRecord> = recs.iter().filter(|r| r.row == row && r.result.task == task).collect();
            out.push(Cell {
                values: mine.iter().map(|r| r.result.test_metric).collect(),
                threshold: mine[0].threshold,
                row: row.clone(),
                task,
            });
        }
    }
    out
}

pub fn groups(records: &[JobRecord]) -> Vec<String> {
    first_seen(records.iter().map(|r| r.group.as_str()))
}

/// Per (row, task): runs, mean, std, min and failure rate.
pub fn summary_table(records: &[JobRecord], group: &str) -> Table {
    let rows = cells(records, group)
        .into_iter()
        .map(|c| {
            let s = c.stats();
            vec![
                c.row.clone(),
                c.task.clone(),
                c.values.len().to_string(),
                fmt_metric(s.mean),
                fmt_metric(s.std),
                fmt_metric(s.min),
                format!("{:.2}", s.failure_rate),
            ]
        })
        .collect();
    Table {
        title: format!("{group}: per-configuration statistics over seeds"),
        header: ["setting", "task", "runs", "mean", "std", "min", "failure_rate"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

/// Rows × tasks of mean test metric, with a macro-averaged score column when
/// there is more than one task.
pub fn grid_table(records: &[JobRecord], group: &str) -> Table {
    let cs = cells(records, group);
    let tasks = first_seen(cs.iter().map(|c| c.task.as_str()));
    let rows_names = first_seen(cs.iter().map(|c| c.row.as_str()));
    let mut header = vec!["setting".to_string()];
    header.extend(tasks.iter().cloned());
    if tasks.len() > 1 {
        header.push("score".into());
    }
    let rows = rows_names
        .iter()
        .map(|row| {
            let mut line = vec![row.clone()];
            let mut groups = BTreeMap::new();
            for t in &tasks {
                match cs.iter().find(|c| &c.row == row && &c.task == t) {
                    Some(c) => {
                        let s = c.stats();
                        line.push(format!("{} ({})", fmt_metric(s.mean), fmt_metric(s.std)));
                        groups.insert(t.clone(), vec![s.mean]);
                    }
                    None => {
                        line.push(String::new());
                        groups.insert(t.clone(), Vec::new());
                    }
                }
            }
            if tasks.len() > 1 {
                line.push(aggregate_benchmark(&groups, None).map(fmt_metric).unwrap_or_default());
            }
            line
        })
        .collect();
    Table {
        title: format!("{group}: mean test metric (std) per task"),
        header,
        rows,
    }
}

/// Tasks × layers removed, plus the drop from the first to the last column.
/// Row labels of the group are the numbers of layers removed.
pub fn pruning_table(records: &[JobRecord], group: &str) -> Table {
    let cs = cells(records, group);
    let ks = first_seen(cs.iter().map(|c| c.row.as_str()));
    let tasks = first_seen(cs.iter().map(|c| c.task.as_str()));
    let mut header = vec!["task".to_string()];
    header.extend(ks.iter().cloned());
    header.push("drop".into());
    let rows = tasks
        .iter()
        .map(|t| {
            let means: Vec<Option<f64>> = ks
                .iter()
                .map(|k| cs.iter().find(|c| &c.row == k && &c.task == t).map(|c| c.stats().mean))
                .collect();
            let mut line = vec![t.clone()];
            line.extend(means.iter().map(|m| m.map(fmt_metric).unwrap_or_default()));
            let drop = match (means.first().copied().flatten(), means.last().copied().flatten()) {
                (Some(a), Some(b)) => fmt_metric(a - b),
                _ => String::new(),
            };
            line.push(drop);
            line
        })
        .collect();
    Table {
        title: format!("{group}: mean test metric by layers removed"),
        header,
        rows,
    }
}

/// Every table for every group: pruning groups (name starting with `prun`)
/// get the layers-removed layout, the others a grid and a summary.
pub fn render(records: &[JobRecord]) -> Vec<Table> {
    let mut out = Vec::new();
    for g in groups(records) {
        if g.starts_with("prun") {
            out.push(pruning_table(records, &g));
        } else {
            out.push(grid_table(records, &g));
        }
        out.push(summary_table(records, &g));
    }
    out
}
