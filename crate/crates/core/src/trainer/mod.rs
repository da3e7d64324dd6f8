//! Optimization: Adam, gradient clipping, slope annealing, truncated
//! backpropagation with carried state, and plateau learning-rate decay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BatchPlan, Corpus, Vocab};
use crate::diagnostics::{LayerOps, OpCounts};
use crate::error::{Error, Result};
use crate::network::{Checkpoint, Model, ModelParams, NetworkState};
use crate::numerics::{Tape, Tensor};

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub slope_rate: f64,
    pub slope_cap: f64,
    pub lr_decay: f64,
    /// Decay again at every later plateau instead of only the first.
    pub repeat_decay: bool,
    pub max_epochs: usize,
    pub seed: u64,
    /// Adds elapsed seconds to log records (makes logs run-dependent).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            window: 100,
            learning_rate: 0.002,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            slope_rate: 0.04,
            slope_cap: 5.0,
            lr_decay: 50.0,
            repeat_decay: false,
            max_epochs: 20,
            seed: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch == 0 || self.window == 0 {
            return fail("batch size and window length must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return fail(format!("clip threshold must be positive, got {}", self.clip));
        }
        if !(self.slope_cap >= 1.0) || !(self.slope_rate >= 0.0) {
            return fail(format!("slope schedule needs rate >= 0 and cap >= 1, got {} and {}", self.slope_rate, self.slope_cap));
        }
        if !(self.lr_decay > 1.0) {
            return fail(format!("decay factor must exceed 1, got {}", self.lr_decay));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return fail("learning rate and Adam epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Hard-sigmoid slope for an epoch index counted from 0.
pub fn slope_schedule(epoch: usize, rate: f64, cap: f64) -> f64 {
    cap.min(1.0 + rate * epoch as f64)
}

/// Optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
    pub learning_rate: f64,
    pub slope: f64,
    pub best_val_bpc: Option<f64>,
    pub lr_decays: usize,
}

impl OptState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape()));
        Self { m: zeros.clone(), v: zeros, step: 0, learning_rate, slope: 1.0, best_val_bpc: None, lr_decays: 0 }
    }
}

/// Adam moment decay rates and denominator offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Leaves everything untouched if any
/// gradient is not finite.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, opt: &mut OptState, hyper: AdamHyper) -> Result<()> {
    let grads = grads.named();
    for (name, g) in &grads {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g.data()[i])));
        }
    }
    let mut p = params.named_mut();
    let mut m = opt.m.named_mut();
    let mut v = opt.v.named_mut();
    if p.len() != grads.len() || grads.iter().zip(&p).any(|((_, g), (_, t))| g.shape() != t.shape()) {
        return Err(Error::Dimension("gradients do not match the parameters".into()));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let lr = opt.learning_rate;
    for (((_, g), (_, p)), ((_, m), (_, v))) in grads.iter().zip(p.iter_mut()).zip(m.iter_mut().zip(v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = hyper.beta1 * m[k] + (1.0 - hyper.beta1) * gk;
            v[k] = hyper.beta2 * v[k] + (1.0 - hyper.beta2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams, threshold: f64) -> f64 {
    let mut named = grads.named_mut();
    let norm = named.iter().flat_map(|(_, t)| t.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for (_, t) in named.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Mean loss over a stream together with branch counts.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub bpc: f64,
    pub symbols: usize,
    pub counts: Option<OpCounts>,
}

/// Average next-symbol NLL of a stream read as up to `lanes` parallel lanes
/// in windows of `window` steps, state carried between windows. Sampling
/// draws come from a generator seeded with `seed`.
pub fn evaluate(model: &Model, stream: &[usize], lanes: usize, window: usize, slope: f64, seed: u64) -> Result<EvalResult> {
    if stream.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 symbols to evaluate, got {}", stream.len())));
    }
    let lanes = lanes.max(1).min(stream.len() / (window.max(1) + 1)).max(1);
    let window = window.max(1).min(stream.len() / lanes - 1);
    let plan = BatchPlan::new(stream, lanes, window)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = vec![NetworkState::zeros(&model.config); lanes];
    let mut total = 0.0;
    let mut counts: Option<OpCounts> = None;
    for k in 0..plan.windows() {
        let (inputs, targets) = plan.batch(k);
        let mut tape = Tape::no_grad();
        let params = model.bind(&mut tape);
        let fwd = model.forward_batch(&mut tape, &params, &inputs, &targets, &states, slope, &mut rng, false)?;
        total += tape.value(fwd.loss).data()[0];
        if let Some(c) = fwd.counts {
            counts.get_or_insert_with(|| OpCounts::empty(c.layers.len())).merge(&c);
        }
        states = fwd.final_states;
    }
    let loss = total / plan.windows() as f64;
    Ok(EvalResult { loss, bpc: loss / std::f64::consts::LN_2, symbols: plan.windows() * window * lanes, counts })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_bpc: Option<f64>,
    pub val_bpc: f64,
    pub slope: f64,
    pub learning_rate: f64,
    /// Training-pass branch counts per layer; absent in soft mode and for
    /// the initial record.
    pub ops: Option<Vec<LayerOps>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_s: Option<f64>,
}

/// Result of [`Trainer::run_epoch`].
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub train_bpc: f64,
    pub counts: Option<OpCounts>,
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub opt: OptState,
    pub vocab: Option<Vocab>,
    /// Completed epochs.
    pub epoch: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = OptState::new(&model.params, cfg.learning_rate);
        Ok(Self { model, cfg, opt, vocab: None, epoch: 0, started: Instant::now() })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let cfg = ck.train.ok_or_else(|| Error::Usage("checkpoint carries no training configuration".into()))?;
        cfg.validate()?;
        let opt = match ck.optimizer {
            Some(opt) => opt,
            None => OptState::new(&ck.model.params, cfg.learning_rate),
        };
        Ok(Self { model: ck.model, cfg, opt, vocab: ck.vocab, epoch: ck.epoch, started: Instant::now() })
    }

    pub fn with_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab = Some(vocab);
        self
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper { beta1: self.cfg.beta1, beta2: self.cfg.beta2, eps: self.cfg.adam_eps }
    }

    /// Slope of the next (or current) epoch.
    pub fn slope(&self) -> f64 {
        slope_schedule(self.epoch, self.cfg.slope_rate, self.cfg.slope_cap)
    }

    /// One pass over the training stream, lane states reset at the start.
    pub fn run_epoch(&mut self, train: &[usize]) -> Result<EpochStats> {
        let slope = self.slope();
        self.opt.slope = slope;
        let plan = BatchPlan::new(train, self.cfg.batch, self.cfg.window)?;
        let mut states = vec![NetworkState::zeros(&self.model.config); plan.lanes()];
        let mut total = 0.0;
        let mut counts: Option<OpCounts> = None;
        let hyper = self.hyper();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        for k in 0..plan.windows() {
            let (inputs, targets) = plan.batch(k);
            let (loss, mut grads, fwd_states, fwd_counts) = {
                let mut tape = Tape::new();
                let params = self.model.bind(&mut tape);
                let fwd = self.model.forward_batch(&mut tape, &params, &inputs, &targets, &states, slope, &mut rng, false)?;
                let loss = tape.value(fwd.loss).data()[0];
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {loss} at epoch {} window {k}", self.epoch + 1)));
                }
                let mut g = tape.backward(fwd.loss)?;
                let grads = params.map(|&id| g.take(id).unwrap_or_else(|| Tensor::zeros(tape.value(id).shape())));
                (loss, grads, fwd.final_states, fwd.counts)
            };
            clip_grad_norm(&mut grads, self.cfg.clip);
            adam_step(&mut self.model.params, &grads, &mut self.opt, hyper)?;
            total += loss;
            if let Some(c) = fwd_counts {
                counts.get_or_insert_with(|| OpCounts::empty(c.layers.len())).merge(&c);
            }
            states = fwd_states;
        }
        self.epoch += 1;
        Ok(EpochStats { train_bpc: total / plan.windows() as f64 / std::f64::consts::LN_2, counts })
    }

    /// Validation BPC at the current slope.
    pub fn validate(&self, valid: &[usize]) -> Result<EvalResult> {
        let slope = slope_schedule(self.epoch.saturating_sub(1), self.cfg.slope_rate, self.cfg.slope_cap);
        evaluate(&self.model, valid, self.cfg.batch, self.cfg.window, slope, self.cfg.seed)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            train: Some(self.cfg.clone()),
            epoch: self.epoch,
            slope: slope_schedule(self.epoch.saturating_sub(1), self.cfg.slope_rate, self.cfg.slope_cap),
            seed: self.cfg.seed,
            optimizer: Some(self.opt.clone()),
        }
    }

    fn record(&self, train_bpc: Option<f64>, val_bpc: f64, counts: Option<&OpCounts>) -> EpochRecord {
        EpochRecord {
            epoch: self.epoch,
            train_bpc,
            val_bpc,
            slope: slope_schedule(self.epoch.saturating_sub(1), self.cfg.slope_rate, self.cfg.slope_cap),
            learning_rate: self.opt.learning_rate,
            ops: counts.map(|c| c.layers.clone()),
            wall_time_s: self.cfg.log_wall_time.then(|| self.started.elapsed().as_secs_f64()),
        }
    }

    /// Full protocol: an initial validation record, then up to `max_epochs`
    /// epochs, each followed by validation, plateau decay and a checkpoint
    /// whenever validation improves. `on_epoch` may stop training early by
    /// returning `false`.
    pub fn train(
        &mut self,
        corpus: &Corpus,
        log: &mut dyn Write,
        best_path: Option<&Path>,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> bool,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        let emit = |log: &mut dyn Write, r: &EpochRecord| -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(r)?)?;
            log.flush()?;
            Ok(())
        };
        let initial = self.validate(&corpus.valid)?;
        self.opt.best_val_bpc.get_or_insert(initial.bpc);
        let r = self.record(None, initial.bpc, None);
        emit(log, &r)?;
        records.push(r);
        for _ in 0..self.cfg.max_epochs {
            let stats = self.run_epoch(&corpus.train)?;
            let val = self.validate(&corpus.valid)?;
            let r = self.record(Some(stats.train_bpc), val.bpc, stats.counts.as_ref());
            let best = self.opt.best_val_bpc.unwrap_or(f64::INFINITY);
            if val.bpc < best {
                self.opt.best_val_bpc = Some(val.bpc);
                if let Some(path) = best_path {
                    self.checkpoint().save(path)?;
                }
            } else if self.opt.lr_decays == 0 || self.cfg.repeat_decay {
                self.opt.learning_rate /= self.cfg.lr_decay;
                self.opt.lr_decays += 1;
            }
            emit(log, &r)?;
            let keep_going = on_epoch(self, &r);
            records.push(r);
            if !keep_going {
                break;
            }
        }
        Ok(records)
    }
}

/// Paths written by a training run in an output directory.
pub fn run_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join("train_log.jsonl"), out.join("best.ckpt"))
}
