//! The experiment config: TOML sections layered over built-in defaults, then
//! environment and command-line overrides, then validation.
//!
//! Every seed is derived from `master_seed`. Relative paths in a config file
//! are taken relative to that file; relative paths from flags or the
//! environment are taken relative to the working directory. The resolved
//! config written next to each output holds absolute paths only.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stabilab::encoder::EncoderConfig;
use stabilab::finetune::{AdaptationStrategy, FineTuneConfig};
use stabilab::pretraining::PretrainConfig;
use stabilab::seed::derive_seed;
use stabilab::vocab::{Casing, MergeAlgorithm, DEFAULT_TARGET_SIZE};
use toml::{Table, Value};

/// Overrides `paths.output`; flags still win.
pub const OUTPUT_ENV: &str = "STABILAB_OUTPUT";

pub const TASK_NAMES: [&str; 4] = ["similarity", "yesno_qa", "doc_class", "ner"];

/// A config that failed validation; carries every problem found.
#[derive(Debug)]
pub struct Invalid(pub Vec<String>);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} config problem(s): {}", self.0.len(), self.0.join("; "))
    }
}

impl std::error::Error for Invalid {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub master_seed: u64,
    pub paths: Paths,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    /// Training settings shared by `finetune`, `bench` and `ablate-prune`.
    pub finetune: FineTuneConfig,
    /// What a single `finetune` invocation trains.
    pub run: RunSection,
    pub bench: BenchSection,
    pub prune: PruneSection,
}

/// Empty strings mean "not given".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// One sentence per line, blank lines between documents.
    pub corpus: String,
    /// Defaults to `<output>/vocab.txt`.
    pub vocab: String,
    /// Defaults to `<output>/model.ckpt`.
    pub checkpoint: String,
    /// Directory with one saved task per subdirectory; the synthetic suite is
    /// generated when empty.
    pub tasks: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSection {
    pub size: usize,
    pub algorithm: MergeAlgorithm,
    pub casing: Casing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `tiny` or `toy-large`.
    pub preset: String,
    /// ELECTRA generator width is the model's divided by this.
    pub generator_divisor: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub task: String,
    pub strategy: String,
    /// Which of the derived run seeds to use.
    pub seed_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub tasks: Vec<String>,
    pub seeds: usize,
    /// Run the four optimizer settings: improved, standard epochs, no bias
    /// correction, and both.
    pub optimization: bool,
    pub standard_epochs: usize,
    /// Strategies run with the `[finetune]` settings.
    pub strategies: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    pub tasks: Vec<String>,
    /// Numbers of top layers removed; must include 0.
    pub k: Vec<usize>,
    pub seeds: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            master_seed: 0,
            paths: Paths {
                corpus: String::new(),
                vocab: String::new(),
                checkpoint: String::new(),
                tasks: String::new(),
                output: "stabilab-out".into(),
            },
            vocab: VocabSection {
                size: DEFAULT_TARGET_SIZE,
                algorithm: MergeAlgorithm::WordpieceLikelihood,
                casing: Casing::Uncased,
            },
            model: ModelSection {
                preset: "tiny".into(),
                generator_divisor: 3,
            },
            pretrain: PretrainConfig::default(),
            finetune: FineTuneConfig::improved(),
            run: RunSection {
                task: "similarity".into(),
                strategy: "none".into(),
                seed_index: 0,
            },
            bench: BenchSection {
                tasks: vec!["similarity".into()],
                seeds: stabilab::stability::DEFAULT_SEEDS,
                optimization: true,
                standard_epochs: FineTuneConfig::standard().epochs,
                strategies: vec![
                    "none".into(),
                    "layer_freeze(2)".into(),
                    "layerwise_decay(0.9)".into(),
                    "reinit_top(1)".into(),
                ],
            },
            prune: PruneSection {
                tasks: vec!["yesno_qa".into(), "ner".into()],
                k: vec![0, 1, 2, 3],
                seeds: 3,
            },
        }
    }
}

/// Seed for one purpose under the master seed, kept below 2^63 so it can be
/// written as a TOML integer.
pub fn seed_for(master: u64, purpose: u64) -> u64 {
    derive_seed(master, purpose) & (i64::MAX as u64)
}

pub const PRETRAIN_SEED: u64 = 1;
pub const MODEL_SEED: u64 = 2;
pub const SUITE_SEED: u64 = 3;
pub const CORPUS_SEED: u64 = 4;
const RUN_SEEDS: u64 = 100;

impl Config {
    /// Seed of fine-tuning run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        seed_for(self.master_seed, RUN_SEEDS + i as u64)
    }

    pub fn output(&self) -> PathBuf {
        PathBuf::from(&self.paths.output)
    }

    pub fn encoder_config(&self, vocab_size: usize) -> stabilab::Result<EncoderConfig> {
        let mut cfg = EncoderConfig::preset(&self.model.preset, vocab_size)?;
        cfg.num_segments = self.pretrain.mode.num_segments();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Everything that shapes a config before validation.
#[derive(Debug, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    /// `dotted.key = value` pairs, applied in order after the file.
    pub sets: Vec<(String, String)>,
    pub output_env: Option<String>,
}

fn join_key(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// Lays `over` onto `base`: tables merge, anything else replaces. Keys the
/// base does not have are reported.
fn merge(base: &mut Table, over: Table, prefix: &str, unknown: &mut Vec<String>) {
    for (k, v) in over {
        let key = join_key(prefix, &k);
        match (base.get_mut(&k), v) {
            (None, _) => unknown.push(format!("unknown key `{key}`")),
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &key, unknown),
            (Some(slot), v) => *slot = v,
        }
    }
}

/// Parses a flag value as a TOML value, falling back to a bare string.
fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn absolute(path: &str, base: Option<&Path>) -> Result<String> {
    if path.is_empty() {
        return Ok(String::new());
    }
    let p = Path::new(path);
    let p = match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    };
    Ok(std::path::absolute(&p)
        .with_context(|| format!("cannot resolve path {path}"))?
        .display()
        .to_string())
}

fn absolutize_paths(t: &mut Table, base: Option<&Path>) -> Result<()> {
    if let Some(Value::Table(paths)) = t.get_mut("paths") {
        for (_, v) in paths.iter_mut() {
            if let Value::String(s) = v {
                *s = absolute(s, base)?;
            }
        }
    }
    Ok(())
}

fn nest(key: &str, value: Value) -> Table {
    let mut parts = key.rsplit('.');
    let last = parts.next().unwrap_or(key);
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

/// Builds and validates the config for one subcommand.
pub fn resolve(sources: &Sources, needs: &[Need]) -> Result<Config> {
    let mut table = Table::try_from(Config::default())?;
    let mut problems = Vec::new();
    if let Some(path) = &sources.file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut file: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Invalid(vec![format!("{}: {}", path.display(), e.message())]))?;
        absolutize_paths(&mut file, path.parent())?;
        merge(&mut table, file, "", &mut problems);
    }
    let mut layers = Vec::new();
    if let Some(out) = &sources.output_env {
        layers.push(("paths.output".to_string(), Value::String(out.clone())));
    }
    for (k, v) in &sources.sets {
        layers.push((k.clone(), parse_value(v)));
    }
    for (k, v) in layers {
        let mut over = nest(&k, v);
        absolutize_paths(&mut over, None)?;
        merge(&mut table, over, "", &mut problems);
    }
    let mut config = match Config::deserialize(Value::Table(table)) {
        Ok(c) => c,
        Err(e) => {
            problems.push(e.to_string().trim().replace('\n', " "));
            return Err(Invalid(problems).into());
        }
    };
    let given = (config.pretrain.seed, config.finetune.seed);
    config.fill_defaults()?;
    for (name, was, now) in [
        ("pretrain.seed", given.0, config.pretrain.seed),
        ("finetune.seed", given.1, config.finetune.seed),
    ] {
        if was != 0 && was != now {
            problems.push(format!("{name} is derived from master_seed and run.seed_index; set those instead"));
        }
    }
    config.check(needs, &mut problems);
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(Invalid(problems).into())
    }
}

/// Inputs a subcommand reads, checked for existence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Need {
    Corpus,
    Vocab,
    Checkpoint,
    Bench,
    Prune,
    Run,
}

impl Config {
    fn fill_defaults(&mut self) -> Result<()> {
        self.paths.output = absolute(&self.paths.output, None)?;
        let out = self.output();
        if self.paths.vocab.is_empty() {
            self.paths.vocab = out.join("vocab.txt").display().to_string();
        }
        if self.paths.checkpoint.is_empty() {
            self.paths.checkpoint = out.join("model.ckpt").display().to_string();
        }
        self.pretrain.seed = seed_for(self.master_seed, PRETRAIN_SEED);
        self.finetune.seed = self.run_seed(self.run.seed_index);
        Ok(())
    }

    fn check(&self, needs: &[Need], problems: &mut Vec<String>) {
        if self.master_seed > i64::MAX as u64 {
            problems.push("master_seed must be below 2^63".into());
        }
        if self.paths.output.is_empty() {
            problems.push("paths.output must be set".into());
        }
        if self.vocab.size == 0 {
            problems.push("vocab.size must be at least 1".into());
        }
        if let Err(e) = EncoderConfig::preset(&self.model.preset, 100) {
            problems.push(e.to_string());
        }
        if self.model.generator_divisor == 0 {
            problems.push("model.generator_divisor must be at least 1".into());
        }
        let split = |e: stabilab::Error, section: &str, problems: &mut Vec<String>| match e {
            stabilab::Error::Config(m) => problems.extend(m.split("; ").map(|p| format!("{section}: {p}"))),
            other => problems.push(format!("{section}: {other}")),
        };
        if let Err(e) = self.pretrain.validate() {
            split(e, "pretrain", problems);
        }
        if let Err(e) = self.finetune.validate() {
            split(e, "finetune", problems);
        }
        let exists = |path: &str, what: &str, problems: &mut Vec<String>| {
            if path.is_empty() {
                problems.push(format!("paths.{what} must be set"));
            } else if !Path::new(path).exists() {
                problems.push(format!("paths.{what} does not exist: {path}"));
            }
        };
        let tasks_ok = |names: &[String], section: &str, problems: &mut Vec<String>| {
            if names.is_empty() {
                problems.push(format!("{section}.tasks must name at least one task"));
            }
            if self.paths.tasks.is_empty() {
                for n in names {
                    if !TASK_NAMES.contains(&n.as_str()) {
                        problems.push(format!(
                            "{section}: unknown task `{n}` (expected one of {})",
                            TASK_NAMES.join(", ")
                        ));
                    }
                }
            } else {
                for n in names {
                    let dir = Path::new(&self.paths.tasks).join(n);
                    if !dir.join("task.json").exists() {
                        problems.push(format!("{section}: no task `{n}` under {}", self.paths.tasks));
                    }
                }
            }
        };
        let layers = EncoderConfig::preset(&self.model.preset, 100).map(|c| c.num_layers).ok();
        for need in needs {
            match need {
                Need::Corpus => exists(&self.paths.corpus, "corpus", problems),
                Need::Vocab => exists(&self.paths.vocab, "vocab", problems),
                Need::Checkpoint => exists(&self.paths.checkpoint, "checkpoint", problems),
                Need::Run => {
                    tasks_ok(std::slice::from_ref(&self.run.task), "run", problems);
                    if let Err(e) = AdaptationStrategy::parse(&self.run.strategy) {
                        problems.push(format!("run: {e}"));
                    }
                }
                Need::Bench => {
                    tasks_ok(&self.bench.tasks, "bench", problems);
                    if self.bench.seeds < 2 {
                        problems.push("bench.seeds must be at least 2".into());
                    }
                    if self.bench.standard_epochs == 0 {
                        problems.push("bench.standard_epochs must be at least 1".into());
                    }
                    if !self.bench.optimization && self.bench.strategies.is_empty() {
                        problems.push("bench has nothing to run: optimization is off and no strategies are listed".into());
                    }
                    for s in &self.bench.strategies {
                        if let Err(e) = AdaptationStrategy::parse(s) {
                            problems.push(format!("bench: {e}"));
                        }
                    }
                }
                Need::Prune => {
                    tasks_ok(&self.prune.tasks, "prune", problems);
                    if self.prune.seeds < 2 {
                        problems.push("prune.seeds must be at least 2".into());
                    }
                    if !self.prune.k.contains(&0) {
                        problems.push("prune.k must include 0".into());
                    }
                    if let Some(l) = layers {
                        if let Some(k) = self.prune.k.iter().find(|&&k| k >= l) {
                            problems.push(format!("prune.k value {k} leaves no layer of the {l}-layer model"));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("c.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        let back: Config = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_violation_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(
            dir.path(),
            "colour = 1\n[finetune]\nepochs = 0\nbatch_size = 0\nwobble = 2\n[bench]\nseeds = 1\n",
        );
        let sources = Sources { file: Some(file), ..Default::default() };
        let err = resolve(&sources, &[Need::Bench, Need::Vocab]).unwrap_err();
        let inv = err.downcast_ref::<Invalid>().unwrap();
        let all = inv.0.join("\n");
        for needle in ["`colour`", "`finetune.wobble`", "epochs", "batch_size", "bench.seeds", "paths.vocab"] {
            assert!(all.contains(needle), "{needle} missing from {all}");
        }
    }

    #[test]
    fn partial_sections_keep_the_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(dir.path(), "[finetune.optimizer]\nbias_correction = false\n");
        let c = resolve(&Sources { file: Some(file), ..Default::default() }, &[]).unwrap();
        assert!(!c.finetune.optimizer.bias_correction);
        assert_eq!(c.finetune.optimizer.lr, FineTuneConfig::improved().optimizer.lr);
    }

    #[test]
    fn flags_beat_environment_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(dir.path(), "[paths]\noutput = \"from-file\"\ncorpus = \"c.txt\"\n[finetune]\nepochs = 7\n");
        let mut s = Sources { file: Some(file), ..Default::default() };
        let c = resolve(&s, &[]).unwrap();
        assert_eq!(c.paths.output, dir.path().join("from-file").display().to_string());
        assert_eq!(c.paths.corpus, dir.path().join("c.txt").display().to_string());
        s.output_env = Some("/tmp/env-out".into());
        assert_eq!(resolve(&s, &[]).unwrap().paths.output, "/tmp/env-out");
        s.sets.push(("paths.output".into(), "/tmp/flag-out".into()));
        s.sets.push(("finetune.epochs".into(), "3".into()));
        let c = resolve(&s, &[]).unwrap();
        assert_eq!(c.paths.output, "/tmp/flag-out");
        assert_eq!(c.finetune.epochs, 3);
        assert_eq!(c.paths.vocab, "/tmp/flag-out/vocab.txt");
    }

    #[test]
    fn resolved_config_resolves_to_itself() {
        let dir = tempfile::tempdir().unwrap();
        let file = write(dir.path(), "master_seed = 5\n[bench]\nstrategies = [\"reinit_top(1)\"]\n");
        let c = resolve(&Sources { file: Some(file), ..Default::default() }, &[]).unwrap();
        let echo = write(dir.path(), &c.to_toml().unwrap());
        let again = resolve(&Sources { file: Some(echo), ..Default::default() }, &[]).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.pretrain.seed, seed_for(5, PRETRAIN_SEED));
    }

    #[test]
    fn values_parse_as_toml_or_fall_back_to_strings() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("[\"a\", \"b\"]"), Value::Array(vec!["a".into(), "b".into()]));
        assert_eq!(parse_value("reinit_top(1)"), Value::String("reinit_top(1)".into()));
        assert_eq!(parse_value("false"), Value::Boolean(false));
    }
}
