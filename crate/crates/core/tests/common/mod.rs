//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stabilab::encoder::{encode, Bound, EncoderConfig, EncoderInput, EncoderModel, Params};
use stabilab::finetune::{head_forward, head_loss, init_head, HeadTarget, Metric, TaskKind, TaskSpec};
use stabilab::pretraining::heads::{
    disc_logits, init_disc_head, init_mlm_head, init_nsp_head, mlm_logits, nsp_logits,
};
use stabilab::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use stabilab::Result;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Checked losses are scaled down so finite-difference rounding noise stays
/// far below the 1e-8 relative-error floor.
const LOSS_SCALE: f64 = 1e-3;

pub fn toy(layers: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        hidden_dim: 8,
        num_heads: heads,
        intermediate_dim: 16,
        max_positions: 10,
        num_segments: 2,
        vocab_size: 12,
        embedding_dim: None,
        dropout: 0.1,
        layer_norm_eps: 1e-12,
    }
}

/// Perturbs every weight so layers do more than pass the residual through.
pub fn spiced(mut m: EncoderModel, seed: u64) -> EncoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    m
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `LOSS_SCALE · Σ tanh(x · w)` for a fixed column `w`, so every
/// output entry gets a distinct weight.
fn reduce(tape: &mut Tape, x: Var) -> Result<Var> {
    let cols = tape.value(x).shape()[1];
    let w: Vec<f64> = (0..cols).map(|i| 0.3 + 0.17 * i as f64 - 0.05 * (i * i) as f64).collect();
    let w = tape.constant(Tensor::matrix(cols, 1, w)?);
    let y = tape.matmul(x, w)?;
    let y = tape.tanh(y);
    let s = tape.sum(y);
    Ok(tape.scale(s, LOSS_SCALE))
}

fn check(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> GradCheckReport {
    grad_check(f, params, H, TOLERANCE).unwrap()
}

/// One finite-difference check per tape primitive.
pub fn primitive_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let bt = random(&[5, 4], &mut rng);
    let c = random(&[3, 4], &mut rng);
    let row = random(&[4], &mut rng);
    let gain = random(&[4], &mut rng);
    let bias = random(&[4], &mut rng);
    let col_gain = random(&[3], &mut rng);
    let col_bias = random(&[3], &mut rng);
    let table = random(&[6, 4], &mut rng);
    let logits = random(&[4, 5], &mut rng);
    let target = random(&[3, 4], &mut rng);
    let mut out = Vec::new();
    out.push(("matmul", check(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        reduce(t, y)
    })));
    out.push(("matmul_t", check(&[a.clone(), bt.clone()], |t, v| {
        let y = t.matmul_t(v[0], v[1])?;
        reduce(t, y)
    })));
    out.push(("transpose", check(&[a.clone()], |t, v| {
        let y = t.transpose(v[0])?;
        reduce(t, y)
    })));
    out.push(("add", check(&[a.clone(), c.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        reduce(t, y)
    })));
    out.push(("add_row", check(&[a.clone(), row.clone()], |t, v| {
        let y = t.add_row(v[0], v[1])?;
        reduce(t, y)
    })));
    out.push(("scale", check(&[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        reduce(t, y)
    })));
    out.push(("softmax(axis 1)", check(&[a.clone()], |t, v| {
        let y = t.softmax(v[0], 1)?;
        reduce(t, y)
    })));
    out.push(("softmax(axis 0)", check(&[a.clone()], |t, v| {
        let y = t.softmax(v[0], 0)?;
        reduce(t, y)
    })));
    out.push(("layer_norm(axis 1)", check(&[a.clone(), gain.clone(), bias.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1, 1e-12)?;
        reduce(t, y)
    })));
    out.push(("layer_norm(axis 0)", check(&[a.clone(), col_gain.clone(), col_bias.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 0, 1e-12)?;
        reduce(t, y)
    })));
    out.push(("gelu", check(&[a.clone()], |t, v| {
        let y = t.gelu(v[0]);
        reduce(t, y)
    })));
    out.push(("tanh", check(&[a.clone()], |t, v| {
        let y = t.tanh(v[0]);
        reduce(t, y)
    })));
    out.push(("embedding", check(&[table.clone()], |t, v| {
        let y = t.embedding(v[0], &[2, 0, 2, 5])?;
        reduce(t, y)
    })));
    out.push(("cross_entropy", check(&[logits.clone()], |t, v| {
        let y = t.cross_entropy(v[0], &[1, 4, 0, 2], Some(0))?;
        Ok(t.scale(y, LOSS_SCALE))
    })));
    out.push(("binary_cross_entropy_with_logits", check(&[logits.clone()], |t, v| {
        let labels: Vec<f64> = (0..20).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 7 != 6).collect();
        let y = t.binary_cross_entropy_with_logits(v[0], &labels, &mask)?;
        Ok(t.scale(y, LOSS_SCALE))
    })));
    out.push(("mse", check(&[a.clone()], |t, v| {
        let y = t.mse(v[0], &target)?;
        Ok(t.scale(y, LOSS_SCALE))
    })));
    out.push(("dropout", check(&[a.clone()], |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let y = t.dropout(v[0], 0.3, &mut r, true)?;
        reduce(t, y)
    })));
    out.push(("sum", check(&[a.clone()], |t, v| {
        let y = t.tanh(v[0]);
        let s = t.sum(y);
        Ok(t.scale(s, LOSS_SCALE))
    })));
    out.push(("gather_rows", check(&[a.clone()], |t, v| {
        let y = t.gather_rows(v[0], &[2, 0, 2])?;
        reduce(t, y)
    })));
    out.push(("slice_cols", check(&[a.clone()], |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        reduce(t, y)
    })));
    out.push(("concat_cols", check(&[a.clone(), c.clone()], |t, v| {
        let y = t.concat_cols(&[v[1], v[0], v[1]])?;
        reduce(t, y)
    })));
    out
}

fn spec(kind: TaskKind, metric: Metric, labels: &[&str]) -> TaskSpec {
    TaskSpec {
        name: "check".into(),
        kind,
        metric,
        use_segment_ids: true,
        labels: labels.iter().map(|s| s.to_string()).collect(),
    }
}

const IDS: [u32; 6] = [2, 5, 9, 3, 7, 0];
const SEGMENTS: [u32; 6] = [0, 0, 0, 1, 1, 0];
const MASK: [bool; 6] = [true, true, true, true, true, false];

/// Encoder weights plus `heads`, bound by name for one forward pass.
fn check_model(
    cfg: &EncoderConfig,
    model: &EncoderModel,
    heads: &Params,
    loss: impl Fn(&mut Tape, &Bound, &stabilab::encoder::EncodedVars) -> Result<Var>,
) -> GradCheckReport {
    let names: Vec<String> = model.params().keys().chain(heads.keys()).cloned().collect();
    let values: Vec<Tensor> = model.params().values().chain(heads.values()).cloned().collect();
    check(&values, |tape, vars| {
        let mut bound = Bound::default();
        for (n, v) in names.iter().zip(vars) {
            bound.insert(n.clone(), *v);
        }
        let out = encode(
            cfg,
            tape,
            &bound,
            EncoderInput {
                token_ids: &IDS,
                segment_ids: &SEGMENTS,
                attention_mask: &MASK,
            },
            None,
        )?;
        let l = loss(tape, &bound, &out)?;
        Ok(tape.scale(l, LOSS_SCALE))
    })
}

fn spiced_params(mut p: Params, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.values_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    p
}

/// The composed 2-layer encoder under every loss head.
pub fn head_checks() -> Vec<(&'static str, GradCheckReport)> {
    let cfg = toy(2, 2);
    let model = spiced(EncoderModel::init(cfg.clone(), 21).unwrap(), 22);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut out = Vec::new();

    let mlm = spiced_params(init_mlm_head(8, 8, 12, &mut rng), 24);
    out.push(("encoder + masked-token head", check_model(&cfg, &model, &mlm, |t, p, e| {
        let table = p.get("embeddings.token")?;
        let logits = mlm_logits(t, p, e.last_hidden(), &[1, 4], table, 1e-12)?;
        t.cross_entropy(logits, &[7, 3], None)
    })));

    let nsp = spiced_params(init_nsp_head(8, &mut rng), 25);
    out.push(("encoder + next-sentence head", check_model(&cfg, &model, &nsp, |t, p, e| {
        let logits = nsp_logits(t, p, e.pooled)?;
        t.cross_entropy(logits, &[1], None)
    })));

    let disc = spiced_params(init_disc_head(8, &mut rng), 26);
    out.push(("encoder + replaced-token head", check_model(&cfg, &model, &disc, |t, p, e| {
        let logits = disc_logits(t, p, e.last_hidden())?;
        let labels = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        t.binary_cross_entropy_with_logits(logits, &labels, &MASK)
    })));

    let reg = spec(TaskKind::PairRegression, Metric::Pearson, &[]);
    let head = spiced_params(init_head(&reg, 8, &mut rng), 27);
    out.push(("encoder + regression head", check_model(&cfg, &model, &head, |t, p, e| {
        let y = head_forward(t, &reg, p, e)?;
        head_loss(t, y, HeadTarget::Score(0.4))
    })));

    let cls = spec(TaskKind::PairClassification, Metric::Accuracy, &["no", "yes"]);
    let head = spiced_params(init_head(&cls, 8, &mut rng), 28);
    out.push(("encoder + classification head", check_model(&cfg, &model, &head, |t, p, e| {
        let y = head_forward(t, &cls, p, e)?;
        head_loss(t, y, HeadTarget::Class(1))
    })));

    let tok = spec(TaskKind::TokenClassification, Metric::EntityF1, &["O", "B-X", "I-X"]);
    let head = spiced_params(init_head(&tok, 8, &mut rng), 29);
    out.push(("encoder + token head", check_model(&cfg, &model, &head, |t, p, e| {
        let y = head_forward(t, &tok, p, e)?;
        head_loss(t, y, HeadTarget::Tags { positions: &[1, 2, 4], labels: &[1, 2, 0] })
    })));

    // Factorized embeddings, as in the ELECTRA generator.
    let mut pcfg = toy(2, 1);
    pcfg.hidden_dim = 6;
    pcfg.intermediate_dim = 9;
    pcfg.embedding_dim = Some(8);
    let projected = spiced(EncoderModel::init(pcfg.clone(), 30).unwrap(), 31);
    let gen_mlm = spiced_params(init_mlm_head(6, 8, 12, &mut rng), 32);
    out.push(("projected-embedding encoder + masked-token head", check_model(&pcfg, &projected, &gen_mlm, |t, p, e| {
        let table = p.get("embeddings.token")?;
        let logits = mlm_logits(t, p, e.last_hidden(), &[0, 3], table, 1e-12)?;
        t.cross_entropy(logits, &[11, 2], None)
    })));
    out
}

/// Counts from masking many random sequences.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskCounts {
    pub candidates: usize,
    pub selected: usize,
    pub masked: usize,
    pub kept: usize,
    pub random: usize,
}

impl MaskCounts {
    pub fn selected_rate(&self) -> f64 {
        self.selected as f64 / self.candidates as f64
    }

    pub fn shares(&self) -> (f64, f64, f64) {
        let s = self.selected as f64;
        (self.masked as f64 / s, self.kept as f64 / s, self.random as f64 / s)
    }
}

/// Masks random `[CLS] a [SEP] b [SEP] [PAD]…` sequences, filled close to the
/// default 128-token length, until at least `min_candidates` maskable tokens
/// have been seen. The per-sequence ceiling adds under 0.5 / n to the
/// selected share, so near-full sequences are what the 0.15 target describes.
/// Actions are classified from the output tokens alone: `[MASK]`, unchanged,
/// or anything else.
pub fn masking_counts(min_candidates: usize, seed: u64) -> MaskCounts {
    use stabilab::pretraining::apply_mlm_mask;
    use stabilab::vocab::SpecialIds;
    let special = SpecialIds::default();
    let vocab = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = MaskCounts::default();
    while c.candidates < min_candidates {
        let len = rng.gen_range(100..=125);
        let mut tokens = vec![special.cls];
        tokens.extend((0..len).map(|_| rng.gen_range(5..vocab as u32)));
        let mid = rng.gen_range(1..tokens.len());
        tokens.insert(mid, special.sep);
        tokens.push(special.sep);
        tokens.extend(std::iter::repeat(special.pad).take(rng.gen_range(0..5)));
        let m = apply_mlm_mask(&tokens, vocab, special, &mut rng, 0.15).unwrap();
        c.candidates += len;
        c.selected += m.positions.len();
        for (&p, &label) in m.positions.iter().zip(&m.labels) {
            assert_eq!(label, tokens[p]);
            let out = m.tokens[p];
            if out == special.mask {
                c.masked += 1;
            } else if out == label {
                c.kept += 1;
            } else {
                assert!(out >= 5, "random replacement with a special id");
                c.random += 1;
            }
        }
    }
    c
}

/// Corrupts `n` random masked sequences and counts tokens whose replaced
/// label disagrees with "masked, real, and different from the original".
pub fn electra_label_violations(n: usize, seed: u64) -> usize {
    use stabilab::pretraining::{corrupt, PretrainExample, Skeleton};
    use stabilab::vocab::SpecialIds;
    let special = SpecialIds::default();
    let vocab = 40u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    for _ in 0..n {
        let len = rng.gen_range(1..30);
        let mut token_ids = vec![special.cls];
        token_ids.extend((0..len).map(|_| rng.gen_range(5..vocab)));
        token_ids.push(special.sep);
        let pads = rng.gen_range(0..4);
        token_ids.extend(std::iter::repeat(special.pad).take(pads));
        let sk = Skeleton {
            segment_ids: vec![0; token_ids.len()],
            token_ids: token_ids.clone(),
            nsp_label: None,
        };
        let e = PretrainExample::from_skeleton(&sk, vocab as usize, special, &mut rng, 0.15).unwrap();
        // Small vocabulary so the generator often reproduces the original.
        let reps: Vec<u32> = e
            .mlm_labels
            .iter()
            .map(|&l| if rng.gen_bool(0.4) { l } else { rng.gen_range(0..vocab) })
            .collect();
        let c = corrupt(&e, &reps).unwrap();
        let labels = c.replaced_labels.as_ref().unwrap();
        for i in 0..token_ids.len() {
            let expect = match e.mlm_positions.iter().position(|&p| p == i) {
                Some(j) => token_ids[i] != special.pad && reps[j] != token_ids[i],
                None => false,
            };
            let token_ok = match e.mlm_positions.iter().position(|&p| p == i) {
                Some(j) => c.token_ids[i] == reps[j],
                None => c.token_ids[i] == token_ids[i],
            };
            if labels[i] != expect || !token_ok {
                violations += 1;
            }
        }
    }
    violations
}

/// `|total − generator masked-token loss|` of an ELECTRA pair with λ = 0,
/// the reference loss computed from the generator's own weights on a fresh tape.
pub fn electra_lambda_zero_gap(seed: u64) -> f64 {
    use stabilab::pretraining::{electra_step, ElectraPair, PretrainExample, Skeleton};
    use stabilab::vocab::SpecialIds;
    let special = SpecialIds::default();
    let mut cfg = toy(2, 2);
    cfg.vocab_size = 30;
    let pair = ElectraPair::new(cfg, 2, 0.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch: Vec<PretrainExample> = (0..4)
        .map(|_| {
            let len = rng.gen_range(3..7);
            let mut ids = vec![special.cls];
            ids.extend((0..len).map(|_| rng.gen_range(5..30u32)));
            ids.push(special.sep);
            let sk = Skeleton { segment_ids: vec![0; ids.len()], token_ids: ids, nsp_label: None };
            PretrainExample::from_skeleton(&sk, 30, special, &mut rng, 0.3).unwrap()
        })
        .collect();
    let (loss, _) = electra_step(&pair, &batch, &mut rng).unwrap();

    let gcfg = pair.generator.config().clone();
    let mut tape = Tape::new();
    let mut p = Bound::new(&mut tape, pair.generator.params(), |_| false);
    p.extend(&mut tape, &pair.generator_head, |_| false);
    let table = p.get("embeddings.token").unwrap();
    let mut nll = 0.0;
    let mut count = 0;
    for e in &batch {
        let input = EncoderInput {
            token_ids: &e.token_ids,
            segment_ids: &e.segment_ids,
            attention_mask: &e.attention_mask,
        };
        let out = encode(&gcfg, &mut tape, &p, input, None).unwrap();
        let logits = mlm_logits(&mut tape, &p, out.last_hidden(), &e.mlm_positions, table, gcfg.layer_norm_eps).unwrap();
        let v = tape.value(logits);
        for (r, &label) in e.mlm_labels.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[label as usize];
            count += 1;
        }
    }
    assert_eq!(loss.disc_weight, 0.0);
    (loss.total - nll / count as f64).abs()
}

/// Vocabulary and a reduced task suite built on a small synthetic corpus.
pub fn small_suite(seed: u64) -> (stabilab::vocab::Vocabulary, stabilab::stability::synth::SyntheticTaskSuite) {
    use stabilab::stability::synth::{corpus_text, generate_corpus, generate_suite_with, Lexicon, SplitSizes, SuiteSizes};
    use stabilab::vocab::{build_vocab, Casing, MergeAlgorithm};
    let corpus = generate_corpus(&Lexicon::standard(), 40, seed);
    let vocab = build_vocab(&corpus_text(&corpus), 2048, MergeAlgorithm::WordpieceLikelihood, Casing::Uncased).unwrap();
    let s = |train, dev, test| SplitSizes { train, dev, test };
    let sizes = SuiteSizes {
        similarity: s(32, 12, 16),
        yesno_qa: s(32, 12, 16),
        doc_class: s(32, 12, 16),
        ner: s(32, 12, 16),
    };
    let suite = generate_suite_with(&vocab, seed, sizes).unwrap();
    (vocab, suite)
}

/// Two layers, hidden 16, sized for `vocab`.
pub fn small_encoder(vocab: usize, seed: u64) -> EncoderModel {
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        intermediate_dim: 32,
        max_positions: 32,
        num_segments: 2,
        vocab_size: vocab,
        embedding_dim: None,
        dropout: 0.1,
        layer_norm_eps: 1e-12,
    };
    EncoderModel::init(cfg, seed).unwrap()
}

/// Plan multipliers of `layerwise_decay(d)` on a 4-layer encoder: layers from
/// the top down, then the embeddings. Every tensor of a group must agree.
pub fn decay_multipliers(d: f64) -> (Vec<f64>, f64) {
    use stabilab::encoder::ParamGroup;
    use stabilab::finetune::{compile_plan, AdaptationStrategy};
    let mut cfg = toy(4, 2);
    cfg.num_layers = 4;
    let model = EncoderModel::init(cfg, 0).unwrap();
    let (plan, _) = compile_plan(&AdaptationStrategy::LayerwiseDecay { d }, &model, &Params::new(), 0).unwrap();
    let of = |g: ParamGroup| {
        let ms: Vec<f64> = plan
            .records
            .iter()
            .filter(|(n, _)| ParamGroup::of(n) == g)
            .map(|(_, r)| r.lr_multiplier)
            .collect();
        assert!(!ms.is_empty() && ms.iter().all(|&m| m == ms[0]), "{g:?}: {ms:?}");
        ms[0]
    };
    let layers = (0..4).rev().map(|i| of(ParamGroup::Layer(i))).collect();
    (layers, of(ParamGroup::Embeddings))
}

pub struct FreezeTrial {
    pub steps: usize,
    /// Frozen tensors that differ in any bit after training.
    pub frozen_changed: Vec<String>,
    pub frozen: usize,
    /// Trainable tensors left unchanged.
    pub trainable_unchanged: Vec<String>,
}

/// Fine-tunes with `layer_freeze(1)` for at least 100 optimizer steps and
/// compares every tensor bit for bit against its starting value.
pub fn freeze_trial() -> FreezeTrial {
    use stabilab::finetune::{fine_tune_traced, AdaptationStrategy, FineTuneConfig};
    let (vocab, suite) = small_suite(0);
    let model = small_encoder(vocab.len(), 1);
    let cfg = FineTuneConfig {
        epochs: 13,
        batch_size: 4,
        max_len: 32,
        ..FineTuneConfig::improved()
    };
    let strategy = AdaptationStrategy::LayerFreeze { k: 1, include_embeddings: true };
    let (_, trace) = fine_tune_traced(&model, &vocab, &suite.doc_class, &strategy, &cfg).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut out = FreezeTrial {
        steps: trace.step_lrs.len(),
        frozen_changed: Vec::new(),
        frozen: 0,
        trainable_unchanged: Vec::new(),
    };
    for (name, before) in trace.initial.params() {
        let same = bits(before) == bits(&trace.final_encoder.params()[name]);
        if trace.plan.trainable(name) {
            if same {
                out.trainable_unchanged.push(name.clone());
            }
        } else {
            out.frozen += 1;
            if !same {
                out.frozen_changed.push(name.clone());
            }
        }
    }
    out
}

/// After `reinit_top(n)`: (names below the top `n` layers that changed,
/// names in the top layers or pooler that did not).
pub fn reinit_trial(n: usize) -> (Vec<String>, Vec<String>) {
    use stabilab::encoder::ParamGroup;
    use stabilab::finetune::{compile_plan, AdaptationStrategy};
    let model = spiced(EncoderModel::init(toy(4, 2), 3).unwrap(), 4);
    let (plan, fresh) = compile_plan(&AdaptationStrategy::ReinitTop { n }, &model, &Params::new(), 5).unwrap();
    let (mut lower_changed, mut top_same) = (Vec::new(), Vec::new());
    for (name, before) in model.params() {
        let after = &fresh.params()[name];
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        let top = match ParamGroup::of(name) {
            ParamGroup::Layer(i) => i >= 4 - n,
            ParamGroup::Pooler => true,
            _ => false,
        };
        assert_eq!(plan.get(name).unwrap().reinit, top);
        if top && same {
            top_same.push(name.clone());
        } else if !top && !same {
            lower_changed.push(name.clone());
        }
    }
    (lower_changed, top_same)
}

/// Largest deviation between `adam_step` and a hand-written scalar ADAM over
/// five steps on `f(θ) = (θ − 3)² / 2`, with and without bias correction and
/// with weight decay and a varying learning-rate scale.
pub fn adam_oracle_error() -> f64 {
    use indexmap::IndexMap;
    use stabilab::optim::{adam_step, AdamConfig, AdamState};
    let mut worst: f64 = 0.0;
    for bias_correction in [true, false] {
        for (theta0, wd) in [(0.5, 0.0), (-2.0, 0.01), (10.0, 0.3)] {
            let cfg = AdamConfig {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: wd,
                bias_correction,
            };
            let mut params = Params::new();
            params.insert("w".into(), Tensor::vector(vec![theta0]));
            let mut state = AdamState::new();
            let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
            for t in 1..=5u64 {
                let scale = 1.0 - 0.1 * t as f64;
                let g = theta - 3.0;
                let mut grads = IndexMap::new();
                grads.insert("w".to_string(), Tensor::vector(vec![g]));
                adam_step(&mut params, &grads, &mut state, &cfg, t, |_| scale).unwrap();

                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let (mh, vh) = if bias_correction {
                    (m / (1.0 - 0.9f64.powi(t as i32)), v / (1.0 - 0.999f64.powi(t as i32)))
                } else {
                    (m, v)
                };
                let lr = 0.1 * scale;
                theta = theta - lr * mh / (vh.sqrt() + 1e-8) - lr * wd * theta;
                worst = worst.max((params["w"].data()[0] - theta).abs());
            }
        }
    }
    worst
}

/// `max |prune_top(k) output − hidden_states[L − k]|` over every k of a
/// 4-layer encoder and a few inputs.
pub fn pruning_identity_error() -> f64 {
    let m = spiced(EncoderModel::init(toy(4, 2), 8).unwrap(), 9);
    let inputs: [(&[u32], &[u32], &[bool]); 2] = [
        (&[2, 5, 7, 3, 9, 3], &[0, 0, 0, 0, 1, 1], &[true; 6]),
        (&[2, 11, 3, 0], &[0, 0, 0, 0], &[true, true, true, false]),
    ];
    let mut worst: f64 = 0.0;
    for (ids, segs, mask) in inputs {
        let full = m.forward(ids, segs, mask).unwrap();
        for k in 0..4 {
            let out = m.prune_top_layers(k).unwrap().forward(ids, segs, mask).unwrap();
            worst = worst.max(out.hidden_states.last().unwrap().max_abs_diff(&full.hidden_states[4 - k]));
        }
    }
    worst
}

/// Whether pruning a then b equals pruning a + b bit for bit, for every
/// admissible split on a 6-layer encoder.
pub fn pruning_composes_exactly() -> bool {
    let m = spiced(EncoderModel::init(toy(6, 2), 10).unwrap(), 11);
    (0..6).all(|a| {
        (0..6 - a).all(|b| {
            let once = m.prune_top_layers(a + b).unwrap();
            let twice = m.prune_top_layers(a).unwrap().prune_top_layers(b).unwrap();
            once.params().iter().zip(twice.params()).all(|((n1, t1), (n2, t2))| {
                n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }) && once.config() == twice.config()
        })
    })
}

use stabilab::stability::metrics::{Entity, MatchMode};

fn entity(start: usize, end: usize, label: &str) -> Entity {
    Entity { start, end, label: label.to_string() }
}

/// Best matching by trying every assignment of predictions to gold entities.
fn brute_matches(gold: &[Entity], pred: &[Entity], lenient: bool) -> usize {
    fn ok(p: &Entity, g: &Entity, lenient: bool) -> bool {
        p.label == g.label
            && if lenient {
                g.start <= p.start && p.end <= g.end
            } else {
                p.start == g.start && p.end == g.end
            }
    }
    fn go(i: usize, gold: &[Entity], pred: &[Entity], used: &mut Vec<bool>, lenient: bool) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, gold, pred, used, lenient);
        for j in 0..gold.len() {
            if !used[j] && ok(&pred[i], &gold[j], lenient) {
                used[j] = true;
                best = best.max(1 + go(i + 1, gold, pred, used, lenient));
                used[j] = false;
            }
        }
        best
    }
    go(0, gold, pred, &mut vec![false; gold.len()], lenient)
}

/// Reference precision, recall and F1 straight from the definitions.
fn brute_prf(gold: &[Vec<Entity>], pred: &[Vec<Entity>], lenient: bool) -> (f64, f64, f64) {
    let tp: usize = gold.iter().zip(pred).map(|(g, p)| brute_matches(g, p, lenient)).sum();
    let np: usize = pred.iter().map(Vec::len).sum();
    let ng: usize = gold.iter().map(Vec::len).sum();
    let p = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let r = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Sample correlation from sample covariance and sample deviations.
fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    cov / (sx * sy)
}

fn random_entities(rng: &mut ChaCha8Rng, nested_in: Option<&[Entity]>) -> Vec<Entity> {
    let labels = ["PER", "LOC"];
    let n = rng.gen_range(0..=5);
    let mut out = Vec::new();
    for _ in 0..n {
        let label = labels[rng.gen_range(0..2)];
        match nested_in {
            // Predictions often sit on or inside a gold span.
            Some(gold) if !gold.is_empty() && rng.gen_bool(0.6) => {
                let g = &gold[rng.gen_range(0..gold.len())];
                let s = rng.gen_range(g.start..g.end);
                let e = rng.gen_range(s + 1..=g.end);
                let l = if rng.gen_bool(0.8) { g.label.as_str() } else { label };
                out.push(entity(s, e, l));
            }
            _ => {
                let s = rng.gen_range(0..10);
                out.push(entity(s, s + rng.gen_range(1..4), label));
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricOracleOutcome {
    pub instances: usize,
    pub max_f1_error: f64,
    pub max_pearson_error: f64,
    /// Instances where a lenient score fell below its strict counterpart.
    pub lenient_below_strict: usize,
}

/// Entity F1 (both modes) and Pearson against the brute-force references on
/// `n` random instances of at most 10 sentences and 5 entities each.
pub fn metric_oracles(n: usize, seed: u64) -> MetricOracleOutcome {
    use stabilab::stability::metrics::{entity_f1, pearson};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = MetricOracleOutcome { instances: n, ..Default::default() };
    for _ in 0..n {
        let sentences = rng.gen_range(1..=10);
        let gold: Vec<Vec<Entity>> = (0..sentences).map(|_| random_entities(&mut rng, None)).collect();
        let pred: Vec<Vec<Entity>> = gold.iter().map(|g| random_entities(&mut rng, Some(g))).collect();
        let strict = entity_f1(&gold, &pred, MatchMode::Strict).unwrap();
        let lenient = entity_f1(&gold, &pred, MatchMode::Lenient).unwrap();
        for (got, lenient_mode) in [(strict, false), (lenient, true)] {
            let (p, r, f) = brute_prf(&gold, &pred, lenient_mode);
            let e = (got.precision - p).abs().max((got.recall - r).abs()).max((got.f1 - f).abs());
            out.max_f1_error = out.max_f1_error.max(e);
        }
        if lenient.precision < strict.precision || lenient.recall < strict.recall || lenient.f1 < strict.f1 {
            out.lenient_below_strict += 1;
        }

        let len = rng.gen_range(2..=10);
        let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| rng.gen_range(-0.5..0.5) + v * rng.gen_range(-1.0..1.0)).collect();
        let got = pearson(&x, &y).unwrap();
        out.max_pearson_error = out.max_pearson_error.max((got - brute_pearson(&x, &y)).abs());
    }
    out
}
