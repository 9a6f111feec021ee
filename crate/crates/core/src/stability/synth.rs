//! Synthetic corpus and low-resource task suite over a fixed invented lexicon.
//!
//! Four topics each own a set of nonce nouns, plus a share of the verbs and
//! adjectives. Corpus documents stay on one topic, consecutive sentences share
//! a noun, and most sentences are plain noun lists. Chemical and disease names
//! form closed word classes, so entity tagging is mostly lexical, while the
//! yes/no task asks whether a keyword belongs to the passage's topic.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::finetune::{Example, Label, Metric, Splits, TaskData, TaskKind, TaskSpec};
use crate::pretraining::Document;
use crate::seed::derive_seed;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const LEXICON_SEED: u64 = 0x1e71_c0de;
const CONSONANTS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const FUNCTION_WORDS: [&str; 16] = [
    "the", "a", "of", "in", "with", "and", "for", "to", "were", "after", "patients", "levels",
    "passage", "mentions", "treated", "by",
];
const CHEM_SUFFIXES: [&str; 4] = ["ine", "ol", "ide", "ate"];
const DISEASE_SUFFIXES: [&str; 4] = ["osis", "itis", "emia", "oma"];
const CHEM_PREFIXES: [&str; 4] = ["methyl", "ethyl", "chloro", "hydro"];
const DISEASE_HEADS: [&str; 3] = ["syndrome", "disease", "disorder"];
pub const TOPICS: [&str; 4] = ["cardio", "neuro", "onco", "immuno"];
pub const NER_TAGS: [&str; 5] = ["O", "B-CHEM", "I-CHEM", "B-DIS", "I-DIS"];
/// Share of corpus sentences that are bare lists of topic nouns. Below about
/// 0.8 a TINY encoder pretrained for 2,000 steps never picks up the topic
/// structure: masked nouns stay at chance and next-sentence loss stays at ln 2.
const KEYWORD_SENTENCE_RATE: f64 = 0.9;
const KEYWORD_TEMPLATE: usize = 6;
/// Content words per similarity sentence.
const SIM_WORDS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Nouns of each topic, in [`TOPICS`] order.
    pub topic_nouns: Vec<Vec<String>>,
    pub verbs: Vec<String>,
    pub adjectives: Vec<String>,
    pub chemicals: Vec<String>,
    pub diseases: Vec<String>,
}

impl Lexicon {
    /// The fixed lexicon: 4 topics of 24 nouns, 12 verbs, 12 adjectives,
    /// 16 chemicals and 16 diseases.
    pub fn standard() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut taken: HashSet<String> = FUNCTION_WORDS
            .iter()
            .chain(&CHEM_PREFIXES)
            .chain(&DISEASE_HEADS)
            .chain(&TOPICS)
            .map(|s| s.to_string())
            .collect();
        let mut fresh = |syllables: usize, suffix: &str, rng: &mut ChaCha8Rng| loop {
            let mut w: String = (0..syllables)
                .map(|_| format!("{}{}", CONSONANTS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            w.push_str(suffix);
            if taken.insert(w.clone()) {
                return w;
            }
        };
        let topic_nouns = (0..TOPICS.len())
            .map(|_| (0..24).map(|i| fresh(2 + i % 2, "", &mut rng)).collect())
            .collect();
        let verbs = (0..12).map(|_| fresh(2, "s", &mut rng)).collect();
        let adjectives = (0..12).map(|_| fresh(2, "ic", &mut rng)).collect();
        let chemicals = (0..16)
            .map(|i| fresh(2, CHEM_SUFFIXES[i % 4], &mut rng))
            .collect();
        let diseases = (0..16)
            .map(|i| fresh(2, DISEASE_SUFFIXES[i % 4], &mut rng))
            .collect();
        Self {
            topic_nouns,
            verbs,
            adjectives,
            chemicals,
            diseases,
        }
    }

    /// Every word the generators can emit, punctuation included.
    pub fn all_words(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = FUNCTION_WORDS
            .iter()
            .chain(&CHEM_PREFIXES)
            .chain(&DISEASE_HEADS)
            .map(|s| s.to_string())
            .collect();
        out.insert(".".into());
        out.extend(self.topic_nouns.iter().flatten().cloned());
        out.extend(self.verbs.iter().cloned());
        out.extend(self.adjectives.iter().cloned());
        out.extend(self.chemicals.iter().cloned());
        out.extend(self.diseases.iter().cloned());
        out
    }
}

/// A sentence as words with their BIO tags.
type Tagged = Vec<(String, &'static str)>;

fn words(tagged: &Tagged) -> String {
    tagged.iter().map(|(w, _)| w.as_str()).collect::<Vec<_>>().join(" ")
}

/// The slice of a word list that belongs to `topic`.
fn topic_share(words: &[String], topic: usize) -> &[String] {
    let per = words.len() / TOPICS.len();
    &words[topic * per..(topic + 1) * per]
}

struct Gen<'a> {
    lex: &'a Lexicon,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn pick<'s>(&mut self, from: &'s [String]) -> &'s str {
        from.choose(&mut self.rng).expect("non-empty word list")
    }

    fn nouns(&mut self, topic: usize, n: usize) -> Vec<String> {
        self.lex.topic_nouns[topic]
            .choose_multiple(&mut self.rng, n)
            .cloned()
            .collect()
    }

    fn chemical(&mut self, out: &mut Tagged) {
        if self.rng.gen_bool(0.4) {
            out.push((CHEM_PREFIXES.choose(&mut self.rng).unwrap().to_string(), "B-CHEM"));
            out.push((self.pick(&self.lex.chemicals).to_string(), "I-CHEM"));
        } else {
            out.push((self.pick(&self.lex.chemicals).to_string(), "B-CHEM"));
        }
    }

    fn disease(&mut self, out: &mut Tagged) {
        out.push((self.pick(&self.lex.diseases).to_string(), "B-DIS"));
        if self.rng.gen_bool(0.4) {
            out.push((DISEASE_HEADS.choose(&mut self.rng).unwrap().to_string(), "I-DIS"));
        }
    }

    /// One sentence from `template`; `lead` (if any) is its first noun.
    /// Returns the sentence and the noun to carry into the next one.
    fn sentence(&mut self, topic: usize, lead: Option<String>, template: usize) -> (Tagged, String) {
        let mut ns = self.nouns(topic, 6);
        if let Some(l) = lead {
            ns.retain(|n| *n != l);
            ns.insert(0, l);
        }
        let mut s: Tagged = Vec::new();
        let o = |w: &str| (w.to_string(), "O");
        let adj = self.pick(topic_share(&self.lex.adjectives, topic)).to_string();
        let verb = self.pick(topic_share(&self.lex.verbs, topic)).to_string();
        match template {
            0 => {
                s.extend([o("the"), o(&adj), o(&ns[0]), o(&verb), o("the"), o(&ns[1]), o("of"), o(&ns[2])]);
            }
            1 => {
                s.extend([o(&ns[0]), o(&verb), o("the"), o(&ns[1]), o("in"), o("patients"), o("with")]);
                self.disease(&mut s);
                s.extend([o("treated"), o("by")]);
                self.chemical(&mut s);
            }
            2 => {
                s.extend([o(&ns[0]), o("and"), o(&ns[1]), o(&verb), o(&adj), o(&ns[2]), o("after")]);
                self.chemical(&mut s);
            }
            3 => {
                s.extend([o("levels"), o("of"), o(&ns[0]), o("were"), o(&adj), o("in")]);
                self.disease(&mut s);
                s.extend([o("and"), o(&ns[1])]);
            }
            KEYWORD_TEMPLATE => {
                s.extend([o(&ns[0]), o(&ns[1]), o(&ns[2]), o("and"), o(&ns[3]), o(&ns[4]), o(&ns[5])]);
            }
            4 => {
                s.extend([o("the"), o("passage"), o("mentions"), o(&ns[0]), o("and"), o(&ns[1]), o("for"), o(&ns[2])]);
            }
            _ => {
                self.chemical(&mut s);
                s.extend([o("and"), o(&ns[0]), o(&verb), o("to")]);
                self.disease(&mut s);
                s.extend([o("with"), o("a"), o(&ns[1])]);
            }
        }
        s.push(o("."));
        let carry = ns[1].clone();
        (s, carry)
    }
}

/// `documents` topic documents of 4 to 8 sentences.
pub fn generate_corpus(lex: &Lexicon, documents: usize, seed: u64) -> Vec<Document> {
    let mut g = Gen {
        lex,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 100)),
    };
    (0..documents)
        .map(|d| {
            let topic = d % TOPICS.len();
            let len = g.rng.gen_range(4..=8);
            let mut lead = None;
            (0..len)
                .map(|_| {
                    let t = if g.rng.gen_bool(KEYWORD_SENTENCE_RATE) { KEYWORD_TEMPLATE } else { g.rng.gen_range(0..KEYWORD_TEMPLATE) };
                    let (s, carry) = g.sentence(topic, lead.take(), t);
                    lead = Some(carry);
                    words(&s)
                })
                .collect()
        })
        .collect()
}

/// One sentence per line, blank line between documents.
pub fn corpus_text(docs: &[Document]) -> String {
    docs.iter()
        .map(|d| d.join("\n") + "\n")
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    fn total(self) -> usize {
        self.train + self.dev + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteSizes {
    pub similarity: SplitSizes,
    pub yesno_qa: SplitSizes,
    pub doc_class: SplitSizes,
    pub ner: SplitSizes,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        let s = |train, dev, test| SplitSizes { train, dev, test };
        Self {
            similarity: s(64, 16, 32),
            yesno_qa: s(200, 50, 100),
            doc_class: s(120, 40, 80),
            ner: s(150, 50, 100),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSuite {
    pub seed: u64,
    pub similarity: TaskData,
    pub yesno_qa: TaskData,
    pub doc_class: TaskData,
    pub ner: TaskData,
}

impl SyntheticTaskSuite {
    pub fn tasks(&self) -> [&TaskData; 4] {
        [&self.similarity, &self.yesno_qa, &self.doc_class, &self.ner]
    }

    pub fn task(&self, name: &str) -> Option<&TaskData> {
        self.tasks().into_iter().find(|t| t.spec.name == name)
    }

    /// Label counts per task and split (similarity scores bucketed by value,
    /// tags counted per word).
    pub fn label_distribution(&self) -> BTreeMap<String, BTreeMap<String, BTreeMap<String, usize>>> {
        let mut out = BTreeMap::new();
        for t in self.tasks() {
            let mut per_split = BTreeMap::new();
            for (name, split) in t.named_splits() {
                let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                for e in split {
                    match e {
                        Example::Pair { label, .. } | Example::Single { label, .. } => {
                            let key = match label {
                                Label::Score(s) => format!("{s:.4}"),
                                Label::Class(c) => t.spec.labels[*c].clone(),
                            };
                            *counts.entry(key).or_default() += 1;
                        }
                        Example::Tagged { tags, .. } => {
                            for &g in tags {
                                *counts.entry(t.spec.labels[g].clone()).or_default() += 1;
                            }
                        }
                    }
                }
                per_split.insert(name.to_string(), counts);
            }
            out.insert(t.spec.name.clone(), per_split);
        }
        out
    }

    /// One directory per task plus `labels.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for t in self.tasks() {
            t.save(dir.join(&t.spec.name))?;
        }
        fs::write(
            dir.join("labels.json"),
            serde_json::to_string_pretty(&self.label_distribution())? + "\n",
        )?;
        Ok(())
    }
}

/// Splits `total` unique examples produced by `make` into train/dev/test.
fn unique_splits(sizes: SplitSizes, mut make: impl FnMut(usize) -> Example) -> Result<Splits> {
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(sizes.total());
    let mut attempts = 0;
    while all.len() < sizes.total() {
        attempts += 1;
        if attempts > 100 * sizes.total() + 1000 {
            return Err(Error::invalid("could not generate enough distinct examples"));
        }
        let e = make(all.len());
        if seen.insert(e.key()) {
            all.push(e);
        }
    }
    let test = all.split_off(sizes.train + sizes.dev);
    let dev = all.split_off(sizes.train);
    Ok(Splits {
        train: all,
        dev,
        test,
    })
}

fn spec(name: &str, kind: TaskKind, metric: Metric, labels: &[&str]) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        kind,
        metric,
        use_segment_ids: true,
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

/// Fills a fixed frame with four content words.
fn sim_sentence(w: &[String]) -> String {
    format!("{} {} and {} {} .", w[0], w[1], w[2], w[3])
}

fn similarity(g: &mut Gen, sizes: SplitSizes) -> Result<TaskData> {
    // The score is the share of B's words drawn from A's topic; the words
    // themselves never repeat between the two sentences.
    let splits = unique_splits(sizes, |_| {
        let topic = g.rng.gen_range(0..TOPICS.len());
        let mut pool = g.nouns(topic, 2 * SIM_WORDS);
        let a = pool.split_off(SIM_WORDS);
        let m = g.rng.gen_range(0..=SIM_WORDS);
        let mut b: Vec<String> = pool.into_iter().take(m).collect();
        while b.len() < SIM_WORDS {
            let t = (topic + g.rng.gen_range(1..TOPICS.len())) % TOPICS.len();
            let w = g.pick(&g.lex.topic_nouns[t]).to_string();
            if !b.contains(&w) {
                b.push(w);
            }
        }
        b.shuffle(&mut g.rng);
        Example::Pair {
            a: sim_sentence(&a),
            b: sim_sentence(&b),
            label: Label::Score(m as f64 / SIM_WORDS as f64),
        }
    })?;
    Ok(TaskData {
        spec: spec("similarity", TaskKind::PairRegression, Metric::Pearson, &[]),
        splits,
    })
}

fn yesno(g: &mut Gen, sizes: SplitSizes) -> Result<TaskData> {
    // The answer is yes when the keyword belongs to the passage's topic. The
    // keyword itself never occurs in the passage.
    let build = |answer: bool, g: &mut Gen| {
        let topic = g.rng.gen_range(0..TOPICS.len());
        let mut ns = g.nouns(topic, 5);
        let kw = if answer {
            ns.pop().expect("five nouns")
        } else {
            let other = (topic + g.rng.gen_range(1..TOPICS.len())) % TOPICS.len();
            g.pick(&g.lex.topic_nouns[other]).to_string()
        };
        let adj = g.pick(topic_share(&g.lex.adjectives, topic)).to_string();
        let verb = g.pick(topic_share(&g.lex.verbs, topic)).to_string();
        Example::Pair {
            a: format!("the passage mentions {kw} ."),
            b: format!("the {adj} {} {verb} {} with {} and {} .", ns[0], ns[1], ns[2], ns[3]),
            label: Label::Class(usize::from(answer)),
        }
    };
    // Each split is balanced on its own.
    let mut splits = Splits::default();
    let mut seen = HashSet::new();
    for (n, out) in [
        (sizes.train, &mut splits.train),
        (sizes.dev, &mut splits.dev),
        (sizes.test, &mut splits.test),
    ] {
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 100 * n + 1000 {
                return Err(Error::invalid("could not generate enough distinct examples"));
            }
            let e = build(out.len() % 2 == 1, g);
            if seen.insert(e.key()) {
                out.push(e);
            }
        }
        out.shuffle(&mut g.rng);
    }
    Ok(TaskData {
        spec: spec("yesno_qa", TaskKind::PairClassification, Metric::Accuracy, &["no", "yes"]),
        splits,
    })
}

fn doc_class(g: &mut Gen, sizes: SplitSizes) -> Result<TaskData> {
    let splits = unique_splits(sizes, |i| {
        let topic = i % TOPICS.len();
        let (a, carry) = g.sentence(topic, None, 0);
        let (b, _) = g.sentence(topic, Some(carry), 4);
        Example::Single {
            text: format!("{} {}", words(&a), words(&b)),
            label: Label::Class(topic),
        }
    })?;
    let mut splits = splits;
    for s in [&mut splits.train, &mut splits.dev, &mut splits.test] {
        s.shuffle(&mut g.rng);
    }
    Ok(TaskData {
        spec: spec("doc_class", TaskKind::SequenceClassification, Metric::Accuracy, &TOPICS),
        splits,
    })
}

fn ner(g: &mut Gen, sizes: SplitSizes) -> Result<TaskData> {
    let splits = unique_splits(sizes, |_| {
        let topic = g.rng.gen_range(0..TOPICS.len());
        let template = [1, 2, 3, 5][g.rng.gen_range(0..4)];
        let (s, _) = g.sentence(topic, None, template);
        Example::Tagged {
            tokens: s.iter().map(|(w, _)| w.clone()).collect(),
            tags: s
                .iter()
                .map(|(_, t)| NER_TAGS.iter().position(|x| x == t).expect("known tag"))
                .collect(),
        }
    })?;
    Ok(TaskData {
        spec: spec("ner", TaskKind::TokenClassification, Metric::EntityF1, &NER_TAGS),
        splits,
    })
}

/// The four tasks at their default sizes.
pub fn generate_suite(vocab: &Vocabulary, seed: u64) -> Result<SyntheticTaskSuite> {
    generate_suite_with(vocab, seed, SuiteSizes::default())
}

/// Fails if any lexicon word falls outside `vocab`.
pub fn generate_suite_with(vocab: &Vocabulary, seed: u64, sizes: SuiteSizes) -> Result<SyntheticTaskSuite> {
    let lex = Lexicon::standard();
    let unk = vocab.special().unk;
    let missing: Vec<String> = lex
        .all_words()
        .into_iter()
        .filter(|w| vocab.tokenize(w).contains(&unk))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "vocabulary does not cover the synthetic lexicon ({} words map to [UNK], e.g. `{}`); build it on the synthetic corpus",
            missing.len(),
            missing[0]
        )));
    }
    let gen = |i: u64| Gen {
        lex: &lex,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, i)),
    };
    Ok(SyntheticTaskSuite {
        seed,
        similarity: similarity(&mut gen(1), sizes.similarity)?,
        yesno_qa: yesno(&mut gen(2), sizes.yesno_qa)?,
        doc_class: doc_class(&mut gen(3), sizes.doc_class)?,
        ner: ner(&mut gen(4), sizes.ner)?,
    })
}
