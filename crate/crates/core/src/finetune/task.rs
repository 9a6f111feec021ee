//! Task descriptions, labelled datasets, their file formats and the mapping
//! from text to encoder inputs.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretraining::truncate_pair;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Similarity score for a sentence pair.
    PairRegression,
    /// Yes/no style label for a sentence pair.
    PairClassification,
    SequenceClassification,
    /// BIO tags per word.
    TokenClassification,
}

impl TaskKind {
    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::PairRegression | TaskKind::PairClassification)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PairRegression => "pair_regression",
            TaskKind::PairClassification => "pair_classification",
            TaskKind::SequenceClassification => "sequence_classification",
            TaskKind::TokenClassification => "token_classification",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pearson,
    Accuracy,
    EntityF1,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Pearson => "pearson",
            Metric::Accuracy => "accuracy",
            Metric::EntityF1 => "entity_f1",
        }
    }

    pub fn fits(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (Metric::Pearson, TaskKind::PairRegression)
                | (Metric::Accuracy, TaskKind::PairClassification)
                | (Metric::Accuracy, TaskKind::SequenceClassification)
                | (Metric::EntityF1, TaskKind::TokenClassification)
        )
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            TaskKind::PairRegression,
            TaskKind::PairClassification,
            TaskKind::SequenceClassification,
            TaskKind::TokenClassification,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown task kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    /// Give the second sentence of a pair segment id 1. When off (or when the
    /// encoder has a single segment embedding) every token gets segment 0.
    pub use_segment_ids: bool,
    /// Class names, or tag names for token tasks (`O` plus `B-`/`I-` tags).
    /// Empty for regression.
    pub labels: Vec<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !self.metric.fits(self.kind) {
            problems.push(format!("metric {} does not fit a {} task", self.metric, self.kind));
        }
        match self.kind {
            TaskKind::PairRegression => {
                if !self.labels.is_empty() {
                    problems.push("regression tasks take no label names".to_string());
                }
            }
            TaskKind::PairClassification | TaskKind::SequenceClassification => {
                if self.labels.len() < 2 {
                    problems.push(format!("{} needs at least 2 labels", self.kind));
                }
            }
            TaskKind::TokenClassification => {
                if !self.labels.iter().any(|l| l == "O") {
                    problems.push("token tags must include `O`".to_string());
                }
                for l in &self.labels {
                    if l != "O" && !(l.starts_with("B-") || l.starts_with("I-")) {
                        problems.push(format!("tag `{l}` is not O, B-* or I-*"));
                    }
                }
            }
        }
        let unique: HashSet<&String> = self.labels.iter().collect();
        if unique.len() != self.labels.len() {
            problems.push("duplicate label names".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Output width of the task head.
    pub fn num_outputs(&self) -> usize {
        match self.kind {
            TaskKind::PairRegression => 1,
            _ => self.labels.len(),
        }
    }

    pub fn label_index(&self, name: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::invalid(format!("label `{name}` is not in the label space of {}", self.name)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Score(f64),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Example {
    Pair { a: String, b: String, label: Label },
    Single { text: String, label: Label },
    Tagged { tokens: Vec<String>, tags: Vec<usize> },
}

impl Example {
    /// Text content, used to check that splits do not overlap.
    pub fn key(&self) -> String {
        match self {
            Example::Pair { a, b, .. } => format!("{a}\t{b}"),
            Example::Single { text, .. } => text.clone(),
            Example::Tagged { tokens, .. } => tokens.join(" "),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<String> = self.train.iter().map(Example::key).collect();
        let dev: HashSet<String> = self.dev.iter().map(Example::key).collect();
        for (name, split, other) in [("dev", &self.dev, &train), ("test", &self.test, &train), ("test", &self.test, &dev)] {
            if let Some(e) = split.iter().find(|e| other.contains(&e.key())) {
                return Err(Error::invalid(format!("{name} example `{}` also occurs in an earlier split", e.key())));
            }
        }
        Ok(())
    }
}

/// A task with its splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub splits: Splits,
}

impl TaskData {
    /// Writes `train`, `dev` and `test` files (`.tsv`, or `.conll` for token
    /// tasks) plus `task.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("task.json"), serde_json::to_string_pretty(&self.spec)? + "\n")?;
        let ext = self.extension();
        for (name, split) in self.named_splits() {
            fs::write(dir.join(format!("{name}.{ext}")), format_split(&self.spec, split)?)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec: TaskSpec = serde_json::from_str(&fs::read_to_string(dir.join("task.json"))?)?;
        spec.validate()?;
        let ext = if spec.kind == TaskKind::TokenClassification { "conll" } else { "tsv" };
        let read = |name: &str| -> Result<Vec<Example>> {
            let path = dir.join(format!("{name}.{ext}"));
            parse_split(&spec, &fs::read_to_string(&path)?, &path.display().to_string())
        };
        let splits = Splits {
            train: read("train")?,
            dev: read("dev")?,
            test: read("test")?,
        };
        Ok(Self { spec, splits })
    }

    fn extension(&self) -> &'static str {
        if self.spec.kind == TaskKind::TokenClassification {
            "conll"
        } else {
            "tsv"
        }
    }

    pub fn named_splits(&self) -> [(&'static str, &Vec<Example>); 3] {
        [
            ("train", &self.splits.train),
            ("dev", &self.splits.dev),
            ("test", &self.splits.test),
        ]
    }
}

fn format_label(spec: &TaskSpec, label: &Label) -> Result<String> {
    match (spec.kind, label) {
        (TaskKind::PairRegression, Label::Score(s)) => Ok(format!("{s:?}")),
        (TaskKind::PairClassification | TaskKind::SequenceClassification, Label::Class(c)) => spec
            .labels
            .get(*c)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("class {c} outside the label space"))),
        _ => Err(Error::invalid(format!("label {label:?} does not fit a {} task", spec.kind))),
    }
}

/// TSV (`a<TAB>b<TAB>label` or `text<TAB>label`) or CoNLL (`token<TAB>tag`,
/// blank line between sentences).
pub fn format_split(spec: &TaskSpec, examples: &[Example]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        match e {
            Example::Pair { a, b, label } if spec.kind.is_pair() => {
                out.push_str(&format!("{a}\t{b}\t{}\n", format_label(spec, label)?));
            }
            Example::Single { text, label } if spec.kind == TaskKind::SequenceClassification => {
                out.push_str(&format!("{text}\t{}\n", format_label(spec, label)?));
            }
            Example::Tagged { tokens, tags } if spec.kind == TaskKind::TokenClassification => {
                for (t, &g) in tokens.iter().zip(tags) {
                    let tag = spec
                        .labels
                        .get(g)
                        .ok_or_else(|| Error::invalid(format!("tag {g} outside the tag set")))?;
                    out.push_str(&format!("{t}\t{tag}\n"));
                }
                out.push('\n');
            }
            _ => return Err(Error::invalid(format!("example shape does not fit a {} task", spec.kind))),
        }
    }
    Ok(out)
}

pub fn parse_split(spec: &TaskSpec, text: &str, origin: &str) -> Result<Vec<Example>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.into(),
        line,
        message,
    };
    let mut out = Vec::new();
    if spec.kind == TaskKind::TokenClassification {
        let (mut tokens, mut tags) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                if !tokens.is_empty() {
                    out.push(Example::Tagged {
                        tokens: std::mem::take(&mut tokens),
                        tags: std::mem::take(&mut tags),
                    });
                }
                continue;
            }
            let (tok, tag) = line
                .split_once('\t')
                .ok_or_else(|| err(i + 1, "expected `token<TAB>tag`".into()))?;
            tokens.push(tok.to_string());
            tags.push(spec.label_index(tag.trim()).map_err(|e| err(i + 1, e.to_string()))?);
        }
        if !tokens.is_empty() {
            out.push(Example::Tagged { tokens, tags });
        }
        return Ok(out);
    }
    let fields = if spec.kind.is_pair() { 3 } else { 2 };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != fields {
            return Err(err(i + 1, format!("expected {fields} tab-separated fields, found {}", parts.len())));
        }
        let raw = parts[fields - 1].trim();
        let label = match spec.kind {
            TaskKind::PairRegression => Label::Score(
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(i + 1, format!("`{raw}` is not a finite number")))?,
            ),
            _ => Label::Class(spec.label_index(raw).map_err(|e| err(i + 1, e.to_string()))?),
        };
        out.push(if spec.kind.is_pair() {
            Example::Pair {
                a: parts[0].to_string(),
                b: parts[1].to_string(),
                label,
            }
        } else {
            Example::Single {
                text: parts[0].to_string(),
                label,
            }
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Score(f64),
    Class(usize),
    /// Tag of each word that fits, at the position of its first subword.
    /// `words` counts all words, including any cut off by truncation.
    Tags {
        positions: Vec<usize>,
        labels: Vec<usize>,
        words: usize,
    },
}

/// One example as encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
    pub target: Target,
}

/// `[CLS] a [SEP] (b [SEP])`, truncated to `max_len`. With `two_segments`
/// false all segment ids are 0.
pub fn encode_example(
    spec: &TaskSpec,
    vocab: &Vocabulary,
    example: &Example,
    max_len: usize,
    two_segments: bool,
) -> Result<Encoded> {
    let sp = vocab.special();
    let (token_ids, segment_ids, target) = match (spec.kind, example) {
        (k, Example::Pair { a, b, label }) if k.is_pair() => {
            if max_len < 5 {
                return Err(Error::invalid("max_len must be at least 5 for sentence pairs"));
            }
            let (mut ta, mut tb) = (vocab.tokenize(a), vocab.tokenize(b));
            truncate_pair(&mut ta, &mut tb, max_len - 3);
            let mut ids = vec![sp.cls];
            ids.extend(&ta);
            ids.push(sp.sep);
            let first = ids.len();
            ids.extend(&tb);
            ids.push(sp.sep);
            let segs = (0..ids.len())
                .map(|i| u32::from(two_segments && i >= first))
                .collect();
            (ids, segs, target_of(spec, label)?)
        }
        (TaskKind::SequenceClassification, Example::Single { text, label }) => {
            if max_len < 3 {
                return Err(Error::invalid("max_len must be at least 3"));
            }
            let mut t = vocab.tokenize(text);
            t.truncate(max_len - 2);
            let mut ids = vec![sp.cls];
            ids.extend(t);
            ids.push(sp.sep);
            let n = ids.len();
            (ids, vec![0; n], target_of(spec, label)?)
        }
        (TaskKind::TokenClassification, Example::Tagged { tokens, tags }) => {
            if tokens.len() != tags.len() {
                return Err(Error::invalid("tokens and tags differ in length"));
            }
            if max_len < 3 {
                return Err(Error::invalid("max_len must be at least 3"));
            }
            let mut ids = vec![sp.cls];
            let (mut positions, mut labels) = (Vec::new(), Vec::new());
            for (word, &tag) in tokens.iter().zip(tags) {
                if tag >= spec.labels.len() {
                    return Err(Error::invalid(format!("tag {tag} outside the tag set")));
                }
                let mut pieces = vocab.tokenize(word);
                if pieces.is_empty() {
                    pieces.push(sp.unk);
                }
                if ids.len() + pieces.len() > max_len - 1 {
                    break;
                }
                positions.push(ids.len());
                labels.push(tag);
                ids.extend(pieces);
            }
            ids.push(sp.sep);
            let n = ids.len();
            let target = Target::Tags {
                positions,
                labels,
                words: tokens.len(),
            };
            (ids, vec![0; n], target)
        }
        _ => return Err(Error::invalid(format!("example shape does not fit a {} task", spec.kind))),
    };
    let n = token_ids.len();
    Ok(Encoded {
        token_ids,
        segment_ids,
        attention_mask: vec![true; n],
        target,
    })
}

fn target_of(spec: &TaskSpec, label: &Label) -> Result<Target> {
    match (spec.kind, *label) {
        (TaskKind::PairRegression, Label::Score(s)) => Ok(Target::Score(s)),
        (TaskKind::PairClassification | TaskKind::SequenceClassification, Label::Class(c)) => {
            if c >= spec.labels.len() {
                return Err(Error::invalid(format!("class {c} outside the label space")));
            }
            Ok(Target::Class(c))
        }
        _ => Err(Error::invalid(format!("label {label:?} does not fit a {} task", spec.kind))),
    }
}
