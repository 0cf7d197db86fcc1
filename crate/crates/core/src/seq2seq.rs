//! Teacher-forced loss, the training loop, and greedy and beam decoding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::kg::Example;
use crate::layers::Dropout;
use crate::model::Model;
use crate::pipeline::PreparedGraph;
use crate::reference::{self, DoubleDouble, Real};
use crate::tensor::{grad_check, GradCheckReport, Grads, ParamId, ParamStore, Tape, Tensor};
use crate::vocab::{self, Vocab};

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, over the targets that are not `<pad>`.
pub fn nll_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let l = t.constant(logits.clone());
    let sum = t.cross_entropy_nll(l, targets, Some(vocab::PAD))?;
    let n = targets.iter().filter(|&&x| x != vocab::PAD).count();
    if n == 0 {
        return Err(Error::InvalidExample("no non-pad target tokens".into()));
    }
    Ok(t.scalar(sum) / n as f64)
}

/// Decoder input `[<bos>] + ref[..L]` and target `ref[..L] + [<eos>]`, with
/// `L` short enough that both fit the decoder's positions.
pub fn teacher_forcing_pair(vocab: &Vocab, text: &str, max_gen_len: usize) -> (Vec<u32>, Vec<u32>) {
    let mut ids = vocab.encode(text);
    ids.truncate(max_gen_len.saturating_sub(1));
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(vocab::BOS);
    input.extend_from_slice(&ids);
    ids.push(vocab::EOS);
    (input, ids)
}

/// One (graph, reference) training pair.
#[derive(Debug, Clone)]
pub struct Instance {
    pub example: usize,
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

impl Instance {
    pub fn num_targets(&self) -> usize {
        self.target.iter().filter(|&&x| x != vocab::PAD).count()
    }
}

/// Every reference of every example becomes its own instance.
pub fn make_instances(model: &Model, examples: &[Example]) -> Vec<Instance> {
    let max = model.config.decoder.max_gen_len;
    examples
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            ex.references.iter().map(move |r| {
                let (input, target) = teacher_forcing_pair(&model.vocab, r, max);
                Instance {
                    example: i,
                    input,
                    target,
                }
            })
        })
        .collect()
}

pub fn prepare_all(model: &Model, examples: &[Example]) -> Result<Vec<PreparedGraph>> {
    examples.iter().map(|ex| model.prepare(&ex.graph)).collect()
}

/// Summed NLL of one instance and its gradient.
fn instance_grads(model: &Model, prep: &PreparedGraph, inst: &Instance, drop: &mut Dropout) -> Result<(f64, Grads)> {
    let mut t = Tape::new(&model.store);
    let enc = model.encode(&mut t, prep, drop)?;
    let logits = model.decode_logits(&mut t, enc.output, &inst.input, drop)?;
    let loss = t.cross_entropy_nll(logits, &inst.target, Some(vocab::PAD))?;
    Ok((t.scalar(loss), t.backward(loss)))
}

/// Summed NLL of one instance without building gradients.
fn instance_nll(model: &Model, prep: &PreparedGraph, inst: &Instance) -> Result<f64> {
    let mut t = Tape::new(&model.store);
    let mut drop = Dropout::disabled();
    let enc = model.encode(&mut t, prep, &mut drop)?;
    let logits = model.decode_logits(&mut t, enc.output, &inst.input, &mut drop)?;
    let loss = t.cross_entropy_nll(logits, &inst.target, Some(vocab::PAD))?;
    Ok(t.scalar(loss))
}

/// Teacher-forced mean NLL per target token over every (graph, reference)
/// pair, dropout off.
pub fn corpus_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    let preps = prepare_all(model, examples)?;
    let instances = make_instances(model, examples);
    let sums = with_pool(|| {
        instances
            .par_iter()
            .map(|inst| instance_nll(model, &preps[inst.example], inst))
            .collect::<Result<Vec<f64>>>()
    })?;
    let tokens: usize = instances.iter().map(Instance::num_targets).sum();
    Ok(sums.iter().sum::<f64>() / tokens as f64)
}

/// Worker count from `MGSA_THREADS`, if set.
pub fn thread_cap() -> Option<usize> {
    std::env::var("MGSA_THREADS").ok()?.parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a pool capped by `MGSA_THREADS` (or rayon's default).
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    /// Mean NLL per target token over the batch.
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<LossRecord>,
    /// Mean NLL per target token over each epoch.
    pub epochs: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,step,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{:.17e}\n", r.epoch, r.step, r.loss));
        }
        s
    }
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model
            .store
            .values()
            .iter()
            .map(|v| Tensor::zeros(v.rows(), v.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (values, _) = model.store.values_and_grads_mut();
        for (((p, g), m), v) in values.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Linear warmup over `warmup_steps`, constant afterwards. `step` is 1-based.
pub fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.learning_rate * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.learning_rate
    }
}

fn dropout_for(model: &Model, cfg: &TrainConfig, step: usize, slot: usize) -> Dropout {
    let rate = model.config.encoder.dropout;
    if rate <= 0.0 {
        return Dropout::disabled();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((step as u64) << 16) | slot as u64);
    Dropout::new(rate, rng)
}

fn non_finite(model: &Model, epoch: usize, batch: usize, what: String) -> Error {
    let mut norms = model.store.norms();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1));
    let top: Vec<String> = norms.iter().take(5).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::NonFinite(format!(
        "{what} at epoch {epoch}, batch {batch}; largest parameter norms: {}",
        top.join(", ")
    ))
}

/// Adam training with a seeded per-epoch shuffle. Per-instance gradients are
/// computed in parallel and summed in instance order, so results do not
/// depend on the worker count. `on_epoch(epoch, model, mean_loss)` runs after
/// each epoch (checkpointing, validation).
pub fn train(
    model: &mut Model,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model, f64) -> Result<()>,
) -> Result<TrainLog> {
    let preps = prepare_all(model, examples)?;
    let instances = make_instances(model, examples);
    cfg.validate(instances.len())?;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut epoch_sum, mut epoch_tokens) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            step += 1;
            let m: &Model = model;
            let results = with_pool(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(slot, &i)| {
                        let inst = &instances[i];
                        let mut drop = dropout_for(m, cfg, step, slot);
                        instance_grads(m, &preps[inst.example], inst, &mut drop)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let tokens: usize = batch.iter().map(|&i| instances[i].num_targets()).sum();
            let mut total = Grads::zeros_like(&model.store);
            let mut sum = 0.0;
            for (l, g) in &results {
                sum += l;
                total.add_assign(g);
            }
            let loss = sum / tokens as f64;
            if !loss.is_finite() {
                return Err(non_finite(model, epoch, b, format!("loss {loss}")));
            }
            let inv = 1.0 / tokens as f64;
            for g in &mut total.0 {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
                if !g.all_finite() {
                    return Err(non_finite(model, epoch, b, "gradient".into()));
                }
            }
            adam.step(model, &total, learning_rate(cfg, step), cfg);
            log.steps.push(LossRecord { epoch, step, loss });
            epoch_sum += sum;
            epoch_tokens += tokens;
        }
        let mean = epoch_sum / epoch_tokens as f64;
        log.epochs.push(mean);
        on_epoch(epoch, model, mean)?;
    }
    Ok(log)
}

/// Source of next-token log-probabilities for a decoder prefix.
pub trait StepScorer {
    /// Log-probabilities over the vocabulary given `prefix` (starting with
    /// `<bos>`).
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A model with a fixed encoded source.
pub struct ModelScorer<'a> {
    model: &'a Model,
    memory: Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, prep: &PreparedGraph) -> Result<Self> {
        let mut t = Tape::new(&model.store);
        let enc = model.encode(&mut t, prep, &mut Dropout::disabled())?;
        Ok(ModelScorer {
            model,
            memory: t.value(enc.output).clone(),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.model.store);
        let mem = t.constant(self.memory.clone());
        let logits = self.model.decode_logits(&mut t, mem, prefix, &mut Dropout::disabled())?;
        Ok(log_softmax(t.value(logits).row(prefix.len() - 1)))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from `<bos>` for at most `max_len` tokens. The returned
/// ids exclude `<bos>` and `<eos>`.
pub fn greedy_decode(s: &impl StepScorer, max_len: usize) -> Result<Vec<u32>> {
    let mut prefix = vec![vocab::BOS];
    for _ in 0..max_len {
        let next = argmax(&s.log_probs(&prefix)?) as u32;
        if next == vocab::EOS {
            break;
        }
        prefix.push(next);
    }
    prefix.remove(0);
    Ok(prefix)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    logp: f64,
}

impl Hyp {
    /// Cumulative log-probability over generated length (`<eos>` included).
    fn score(&self) -> f64 {
        self.logp / self.tokens.len().max(1) as f64
    }
}

/// Higher score first; among equal scores the lexicographically smaller
/// token sequence.
fn better(a: &Hyp, b: &Hyp, key: impl Fn(&Hyp) -> f64) -> std::cmp::Ordering {
    key(b).total_cmp(&key(a)).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Expansions compete on cumulative
/// log-probability; a hypothesis ending in `<eos>` leaves the beam. Search
/// stops once `width` hypotheses have finished or after `max_len` tokens,
/// and the best normalized score among finished and (at the cap) live
/// hypotheses wins. The returned ids exclude `<bos>` and `<eos>`.
pub fn beam_decode(s: &impl StepScorer, width: usize, max_len: usize) -> Result<Vec<u32>> {
    let width = width.max(1);
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut cands = Vec::with_capacity(live.len() * width);
        for h in &live {
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(vocab::BOS);
            prefix.extend_from_slice(&h.tokens);
            let lp = s.log_probs(&prefix)?;
            // only the top `width` continuations of each parent can survive
            let mut ids: Vec<usize> = (0..lp.len()).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &id in ids.iter().take(width) {
                let mut tokens = h.tokens.clone();
                tokens.push(id as u32);
                cands.push(Hyp {
                    tokens,
                    logp: h.logp + lp[id],
                });
            }
        }
        cands.sort_by(|a, b| better(a, b, |h| h.logp));
        live.clear();
        for c in cands {
            if live.len() == width {
                break;
            }
            if c.tokens.last() == Some(&vocab::EOS) {
                finished.push(c);
                if finished.len() >= width {
                    break;
                }
            } else {
                live.push(c);
            }
        }
        if finished.len() >= width || live.is_empty() {
            live.clear();
            break;
        }
    }
    let best = finished
        .into_iter()
        .chain(live)
        .min_by(|a, b| better(a, b, Hyp::score))
        .map(|h| h.tokens)
        .unwrap_or_default();
    Ok(best.into_iter().filter(|&t| t != vocab::EOS).collect())
}

/// Greedy (`beam <= 1`) or beam decoding of one graph into text.
pub fn generate(model: &Model, prep: &PreparedGraph, beam: usize) -> Result<String> {
    let scorer = ModelScorer::new(model, prep)?;
    let max = model.config.decoder.max_gen_len;
    let ids = if beam <= 1 {
        greedy_decode(&scorer, max)?
    } else {
        beam_decode(&scorer, beam, max)?
    };
    Ok(model.vocab.decode(&ids))
}

pub fn greedy_generate(model: &Model, example: &Example) -> Result<String> {
    generate(model, &model.prepare(&example.graph)?, 1)
}

/// Beam search at any width, including 1.
pub fn beam_generate(model: &Model, example: &Example, width: usize) -> Result<String> {
    let scorer = ModelScorer::new(model, &model.prepare(&example.graph)?)?;
    let ids = beam_decode(&scorer, width, model.config.decoder.max_gen_len)?;
    Ok(model.vocab.decode(&ids))
}

/// Decodes every example, in parallel, preserving order.
pub fn generate_all(model: &Model, examples: &[Example], beam: usize) -> Result<Vec<String>> {
    let preps = prepare_all(model, examples)?;
    with_pool(|| preps.par_iter().map(|p| generate(model, p, beam)).collect())
}

/// Arithmetic used for the loss evaluations inside the difference quotient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericPrecision {
    /// The f64 tape forward. Rounding in the loss (about `1e-16 · |loss|`)
    /// divided by `2·eps` limits what can be resolved.
    F64,
    /// The independent reference forward in double-double arithmetic.
    DoubleDouble,
}

/// Central-difference check of the full teacher-forced loss of `example`'s
/// first reference against the f64 tape gradients.
pub fn model_grad_check(
    model: &mut Model,
    example: &Example,
    eps: f64,
    per_param: usize,
    seed: u64,
    precision: NumericPrecision,
) -> Result<GradCheckReport> {
    let prep = model.prepare(&example.graph)?;
    let max = model.config.decoder.max_gen_len;
    let (input, target) = teacher_forcing_pair(&model.vocab, &example.references[0], max);
    let inst = Instance {
        example: 0,
        input,
        target,
    };
    // the closures see perturbed copies of the store; layout comes from here
    let layout = Model {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        store: ParamStore::new(),
        params: model.params.clone(),
    };
    let with_store = |s: &ParamStore| Model {
        store: s.clone(),
        ..layout.clone()
    };
    // Differences are taken against a double-double baseline before rounding
    // to f64, so the tiny perturbation survives the conversion.
    let base_store = model.store.clone();
    let memory: reference::Memory<DoubleDouble> = reference::encoder_memory(&layout, &base_store, &prep);
    let base: DoubleDouble = reference::decoder_nll(&layout, &base_store, &memory, &inst.input, &inst.target);
    let decoder_only = |id: ParamId| id == layout.params.out_bias || base_store.name(id).starts_with("dec.");
    // the encoder is rerun only when one of its inputs moved
    let encoder_changed = |s: &ParamStore| {
        s.ids()
            .filter(|&id| !decoder_only(id))
            .any(|id| s.value(id).data() != base_store.value(id).data())
    };
    grad_check(
        &mut model.store,
        |s| match precision {
            NumericPrecision::F64 => instance_nll(&with_store(s), &prep, &inst),
            NumericPrecision::DoubleDouble => {
                let v: DoubleDouble = if encoder_changed(s) {
                    reference::instance_nll(&layout, s, &prep, &inst.input, &inst.target)
                } else {
                    reference::decoder_nll(&layout, s, &memory, &inst.input, &inst.target)
                };
                Ok((v - base).to_f64())
            }
        },
        |s| instance_grads(&with_store(s), &prep, &inst, &mut Dropout::disabled()),
        eps,
        per_param,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::kg::{KnowledgeGraph, Triple};

    fn toy_examples() -> Vec<Example> {
        let rows = [
            ("alice", "likes", "bob", "alice likes bob"),
            ("bob", "likes", "carol", "bob likes carol"),
            ("carol", "knows", "alice", "carol knows alice"),
            ("dave", "knows", "bob", "dave knows bob"),
        ];
        rows.iter()
            .map(|&(h, r, t, text)| {
                Example::new(
                    KnowledgeGraph::new(vec![Triple::new(h, r, t)]).unwrap(),
                    vec![text.to_string()],
                )
                .unwrap()
            })
            .collect()
    }

    fn toy_model(examples: &[Example]) -> Model {
        let words = examples
            .iter()
            .flat_map(|e| e.references.iter().flat_map(|r| r.split_whitespace()));
        Model::new(Profile::Desk.model(), Vocab::from_words(words), 11).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let logits = Tensor::zeros(3, 10);
        let l = nll_loss(&logits, &[1, 2, 3]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_predictions_give_zero_loss() {
        let mut logits = Tensor::zeros(2, 4);
        logits.set(0, 1, 1e4);
        logits.set(1, 3, 1e4);
        assert_eq!(nll_loss(&logits, &[1, 3]).unwrap(), 0.0);
    }

    #[test]
    fn pad_targets_are_excluded_and_bad_ids_rejected() {
        let mut logits = Tensor::zeros(2, 10);
        logits.set(1, 2, 5.0);
        let only_first = nll_loss(&logits, &[1, vocab::PAD]).unwrap();
        assert!((only_first - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            nll_loss(&logits, &[1, 10]),
            Err(Error::TargetOutOfVocab { id: 10, size: 10 })
        ));
    }

    #[test]
    fn model_loss_matches_log_sum_exp_oracle() {
        let ex = toy_examples();
        let m = toy_model(&ex);
        let prep = m.prepare(&ex[0].graph).unwrap();
        let (input, target) = teacher_forcing_pair(&m.vocab, &ex[0].references[0], 128);
        let mut t = Tape::new(&m.store);
        let enc = m.encode(&mut t, &prep, &mut Dropout::disabled()).unwrap();
        let logits = m.decode_logits(&mut t, enc.output, &input, &mut Dropout::disabled()).unwrap();
        let lv = t.value(logits).clone();
        let mut want = 0.0;
        for (i, &y) in target.iter().enumerate() {
            let row = lv.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y as usize].exp() / z).ln();
        }
        want /= target.len() as f64;
        assert!((nll_loss(&lv, &target).unwrap() - want).abs() < 1e-12);
        assert!((corpus_loss(&m, &ex[..1]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_shift_and_cap() {
        let v = Vocab::from_words(["x", "y"]);
        let (i, t) = teacher_forcing_pair(&v, "x y", 128);
        assert_eq!(i, vec![vocab::BOS, v.id("x"), v.id("y")]);
        assert_eq!(t, vec![v.id("x"), v.id("y"), vocab::EOS]);
        let (i, t) = teacher_forcing_pair(&v, "x y x y", 3);
        assert_eq!((i.len(), t.len()), (3, 3));
        assert_eq!(t[2], vocab::EOS);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let ex = toy_examples();
        let mut m = toy_model(&ex);
        let before = m.store.values().to_vec();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            learning_rate: 0.0,
            warmup_steps: 0,
            ..Profile::Desk.train()
        };
        train(&mut m, &ex, &cfg, |_, _, _| Ok(())).unwrap();
        for (a, b) in before.iter().zip(m.store.values()) {
            let ab: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn training_is_deterministic_and_decreasing() {
        let ex = toy_examples();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 2,
            ..Profile::Desk.train()
        };
        let run = || {
            let mut m = toy_model(&ex);
            let mut seen = Vec::new();
            let log = train(&mut m, &ex, &cfg, |e, _, l| {
                seen.push((e, l));
                Ok(())
            })
            .unwrap();
            (log, seen)
        };
        let (a, seen) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert_eq!(seen.len(), 5);
        assert_eq!(a.steps.len(), 10);
        for w in a.epochs.windows(2) {
            assert!(w[1] < w[0], "{:?}", a.epochs);
        }
        assert!(a.to_csv().starts_with("epoch,step,loss\n1,1,"));
    }

    #[test]
    fn batch_loss_is_permutation_invariant() {
        let ex = toy_examples();
        let m = toy_model(&ex);
        let fwd = corpus_loss(&m, &ex).unwrap();
        let rev: Vec<Example> = ex.iter().rev().cloned().collect();
        assert!((corpus_loss(&m, &rev).unwrap() - fwd).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (1..=6).map(|s| learning_rate(&cfg, s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    /// Next-token distribution given by a fixed table keyed on the prefix.
    struct TableScorer {
        vocab: usize,
        f: fn(&[u32]) -> Vec<f64>,
    }

    impl StepScorer for TableScorer {
        fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
            let raw = (self.f)(prefix);
            assert_eq!(raw.len(), self.vocab);
            Ok(log_softmax(&raw))
        }
    }

    fn pseudo_logits(prefix: &[u32]) -> Vec<f64> {
        // deterministic but irregular; vocab: 4 = bos, 5 = eos, 0..4 and 6, 7 words
        let mut h: u64 = 1469598103934665603;
        for &p in prefix {
            h = (h ^ p as u64).wrapping_mul(1099511628211);
        }
        (0..8)
            .map(|i: u64| {
                let x = h.wrapping_add(i.wrapping_mul(0x9E3779B97F4A7C15)).wrapping_mul(0xBF58476D1CE4E5B9);
                ((x >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
            })
            .collect()
    }

    fn exhaustive_best(s: &TableScorer, max_len: usize) -> Vec<u32> {
        fn walk(s: &TableScorer, prefix: &mut Vec<u32>, logp: f64, max_len: usize, best: &mut Option<(f64, Vec<u32>)>) {
            let lp = s.log_probs(prefix).unwrap();
            for id in 0..s.vocab as u32 {
                let l = logp + lp[id as usize];
                let len = prefix.len(); // generated tokens incl. this one
                let mut toks = prefix[1..].to_vec();
                toks.push(id);
                if id == vocab::EOS || len == max_len {
                    let score = l / len as f64;
                    let take = match best {
                        None => true,
                        Some((b, bt)) => score > *b || (score == *b && toks < *bt),
                    };
                    if take {
                        *best = Some((score, toks));
                    }
                } else {
                    prefix.push(id);
                    walk(s, prefix, l, max_len, best);
                    prefix.pop();
                }
            }
        }
        let mut best = None;
        walk(s, &mut vec![vocab::BOS], 0.0, max_len, &mut best);
        let toks = best.unwrap().1;
        toks.into_iter().filter(|&t| t != vocab::EOS).collect()
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        let s = TableScorer {
            vocab: 8,
            f: pseudo_logits,
        };
        for max_len in 1..=3 {
            let want = exhaustive_best(&s, max_len);
            assert_eq!(beam_decode(&s, 8usize.pow(max_len as u32), max_len).unwrap(), want);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let s = TableScorer {
            vocab: 8,
            f: pseudo_logits,
        };
        for len in [1, 3, 10, 40] {
            assert_eq!(beam_decode(&s, 1, len).unwrap(), greedy_decode(&s, len).unwrap());
        }
    }

    #[test]
    fn eos_first_gives_empty_output() {
        let s = TableScorer {
            vocab: 8,
            f: |_| {
                let mut v = vec![0.0; 8];
                v[vocab::EOS as usize] = 5.0;
                v
            },
        };
        assert!(greedy_decode(&s, 128).unwrap().is_empty());
        assert!(beam_decode(&s, 5, 128).unwrap().is_empty());
    }

    #[test]
    fn capped_hypothesis_beats_worse_finished_one() {
        // eos is plausible only at step 1 and poor; word 7 is near-certain after
        let s = TableScorer {
            vocab: 8,
            f: |p| {
                let mut v = vec![-10.0; 8];
                if p.len() == 1 {
                    v[vocab::EOS as usize] = 0.0;
                    v[7] = 0.5;
                } else {
                    v[7] = 10.0;
                }
                v
            },
        };
        assert_eq!(beam_decode(&s, 2, 4).unwrap(), vec![7, 7, 7, 7]);
    }

    #[test]
    fn ties_go_to_the_lowest_id() {
        let s = TableScorer {
            vocab: 8,
            f: |p| {
                let mut v = vec![1.0; 8];
                if p.len() == 3 {
                    v[vocab::EOS as usize] = 9.0;
                }
                v
            },
        };
        assert_eq!(greedy_decode(&s, 10).unwrap(), vec![0, 0]);
        assert_eq!(beam_decode(&s, 3, 10).unwrap(), vec![0, 0]);
    }

    #[test]
    fn generation_is_capped() {
        let s = TableScorer {
            vocab: 8,
            f: |_| vec![0.0, 3.0, 0.0, 0.0, 0.0, -5.0, 0.0, 0.0],
        };
        assert_eq!(greedy_decode(&s, 128).unwrap().len(), 128);
        assert_eq!(beam_decode(&s, 5, 128).unwrap().len(), 128);
    }

    #[test]
    fn model_beam_one_equals_greedy() {
        let ex = toy_examples();
        let m = toy_model(&ex);
        for e in &ex {
            let prep = m.prepare(&e.graph).unwrap();
            let s = ModelScorer::new(&m, &prep).unwrap();
            assert_eq!(beam_decode(&s, 1, 12).unwrap(), greedy_decode(&s, 12).unwrap());
        }
    }

    #[test]
    fn grad_check_on_a_small_model() {
        let ex = toy_examples();
        let mut m = toy_model(&ex);
        let r = model_grad_check(&mut m, &ex[0], 1e-6, 4, 1, NumericPrecision::DoubleDouble).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{} in {}", r.max_rel_error, r.worst_param);
        assert!(r.params.iter().all(|p| !p.name.ends_with(".k.b")));
    }
}
