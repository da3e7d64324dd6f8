//! Embedding, the layer stack, and the gated output module.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};

use crate::diagnostics::{BoundaryTrace, OpCounts};
use crate::error::{Error, Result};
use crate::hm_cell::{self, BoundaryMode, Branch, LayerNodes, LayerParams, LayerShape, LayerState};
use crate::numerics::kernels::{self, sigmoid, Activation};
use crate::numerics::{AffineTerm, NodeId, Tape, Tensor};

/// Architecture of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width per layer, bottom to top. The layer count is its length.
    pub dims: Vec<usize>,
    pub embed_dim: usize,
    pub out_embed_dim: usize,
    pub vocab_size: usize,
    pub mode: BoundaryMode,
    pub layer_norm: bool,
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::Config(format!("need at least 2 layers, got {}", self.dims.len())));
        }
        if self.dims.contains(&0) || self.embed_dim == 0 || self.out_embed_dim == 0 {
            return Err(Error::Config("all widths must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocabulary needs at least 2 symbols, got {}", self.vocab_size)));
        }
        Ok(())
    }

    pub fn layer_shape(&self, layer: usize) -> LayerShape {
        LayerShape {
            dim: self.dims[layer],
            below_dim: if layer == 0 { self.embed_dim } else { self.dims[layer - 1] },
            above_dim: self.dims.get(layer + 1).copied(),
        }
    }

    pub fn total_hidden(&self) -> usize {
        self.dims.iter().sum()
    }
}

/// Parameters of the output module.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputParams<T = Tensor> {
    /// `[L x Σd]`; row `ℓ` is the gate weight vector of layer `ℓ`.
    pub gate_weights: T,
    /// One `[out_embed_dim x d_ℓ]` projection per layer.
    pub projections: Vec<T>,
    /// `[K x out_embed_dim]`.
    pub softmax_weight: T,
    /// `[K]`.
    pub softmax_bias: T,
}

/// Every trainable tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    /// `[embed_dim x K]`; column `k` embeds symbol `k`.
    pub embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub output: OutputParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> ModelParams<U> {
        ModelParams {
            embedding: f(&self.embedding),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            output: OutputParams {
                gate_weights: f(&self.output.gate_weights),
                projections: self.output.projections.iter().map(&mut f).collect(),
                softmax_weight: f(&self.output.softmax_weight),
                softmax_bias: f(&self.output.softmax_bias),
            },
        }
    }

    /// All tensors with stable names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named().into_iter().map(|(n, t)| (format!("layer{}.{n}", l + 1), t)));
        }
        out.push(("output.gate_weights".into(), &self.output.gate_weights));
        for (l, p) in self.output.projections.iter().enumerate() {
            out.push((format!("output.projection{}", l + 1), p));
        }
        out.push(("output.softmax_weight".into(), &self.output.softmax_weight));
        out.push(("output.softmax_bias".into(), &self.output.softmax_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(layer.named_mut().into_iter().map(|(n, t)| (format!("layer{}.{n}", l + 1), t)));
        }
        out.push(("output.gate_weights".into(), &mut self.output.gate_weights));
        for (l, p) in self.output.projections.iter_mut().enumerate() {
            out.push((format!("output.projection{}", l + 1), p));
        }
        out.push(("output.softmax_weight".into(), &mut self.output.softmax_weight));
        out.push(("output.softmax_bias".into(), &mut self.output.softmax_bias));
        out
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive extents")
}

impl ModelParams<Tensor> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.vocab_size;
        let embedding = uniform_matrix(cfg.embed_dim, k, k, rng);
        let layers = (0..cfg.layers()).map(|l| LayerParams::init(cfg.layer_shape(l), cfg.layer_norm, rng)).collect();
        let total = cfg.total_hidden();
        let output = OutputParams {
            gate_weights: uniform_matrix(cfg.layers(), total, total, rng),
            projections: cfg.dims.iter().map(|&d| uniform_matrix(cfg.out_embed_dim, d, d, rng)).collect(),
            softmax_weight: uniform_matrix(k, cfg.out_embed_dim, cfg.out_embed_dim, rng),
            softmax_bias: Tensor::zeros(&[k]),
        };
        Ok(Self { embedding, layers, output })
    }

    /// All-zero weights and biases (normalization gains stay at 1).
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.vocab_size;
        Ok(Self {
            embedding: Tensor::zeros(&[cfg.embed_dim, k]),
            layers: (0..cfg.layers()).map(|l| LayerParams::zeros(cfg.layer_shape(l), cfg.layer_norm)).collect(),
            output: OutputParams {
                gate_weights: Tensor::zeros(&[cfg.layers(), cfg.total_hidden()]),
                projections: cfg.dims.iter().map(|&d| Tensor::zeros(&[cfg.out_embed_dim, d])).collect(),
                softmax_weight: Tensor::zeros(&[k, cfg.out_embed_dim]),
                softmax_bias: Tensor::zeros(&[k]),
            },
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = ModelParams::zeros(cfg)?;
        let have = self.named();
        let want = expect.named();
        if have.len() != want.len() {
            return Err(Error::Dimension(format!("expected {} tensors, found {}", want.len(), have.len())));
        }
        for ((hn, ht), (wn, wt)) in have.iter().zip(&want) {
            if hn != wn || ht.shape() != wt.shape() {
                return Err(Error::Dimension(format!("{hn} {:?} does not match {wn} {:?}", ht.shape(), wt.shape())));
            }
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Recurrent state of every layer for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub layers: Vec<LayerState>,
}

impl NetworkState {
    /// Zero hidden and cell states with every boundary at 0.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self { layers: cfg.dims.iter().map(|&d| LayerState::zeros(d)).collect() }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.layers() || self.layers.iter().zip(&cfg.dims).any(|(s, &d)| s.h.len() != d || s.c.len() != d) {
            return Err(Error::Dimension("network state does not match the model".into()));
        }
        Ok(())
    }
}

/// Result of [`Model::step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: NetworkState,
    pub hidden: Vec<Tensor>,
    pub boundaries: Vec<f64>,
}

/// Result of [`Model::sequence_nll`].
#[derive(Clone, Debug)]
pub struct SequenceNll {
    /// Mean negative log-likelihood in nats.
    pub loss: f64,
    pub bpc: f64,
    pub final_state: NetworkState,
    pub trace: BoundaryTrace,
}

/// Result of [`Model::forward_batch`].
pub struct BatchForward {
    /// Mean negative log-likelihood over every lane and step (scalar node).
    pub loss: NodeId,
    pub final_states: Vec<NetworkState>,
    /// Per-lane traces, when requested.
    pub traces: Vec<BoundaryTrace>,
    /// Branch tallies summed over lanes; `None` in soft mode.
    pub counts: Option<OpCounts>,
}

/// A model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn stack_rows(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / cols.max(1);
    Tensor::new(vec![n, cols], data)
}

impl Model {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    /// Registers every parameter on the tape.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelParams<NodeId> {
        self.params.map(|t| tape.param(t))
    }

    /// Column lookup of the input embedding.
    pub fn embed(&self, symbol: usize) -> Result<Tensor> {
        let k = self.config.vocab_size;
        if symbol >= k {
            return Err(Error::Index { index: symbol, size: k });
        }
        let e = &self.params.embedding;
        Ok(Tensor::vector((0..self.config.embed_dim).map(|i| e.data()[i * k + symbol]).collect()))
    }

    /// Advance one stream by one symbol, bottom layer first.
    pub fn step<R: Rng + ?Sized>(&self, symbol: usize, state: &NetworkState, slope: f64, rng: &mut R) -> Result<StepOutput> {
        self.step_with(symbol, state, slope, rng, false)
    }

    /// Like [`Model::step`], but with `force_update` every layer sees a
    /// fired boundary below and its own boundary pinned to 0, so each layer
    /// reduces to a plain LSTM.
    pub fn step_with<R: Rng + ?Sized>(
        &self,
        symbol: usize,
        state: &NetworkState,
        slope: f64,
        rng: &mut R,
        force_update: bool,
    ) -> Result<StepOutput> {
        state.check(&self.config)?;
        let mode = self.config.mode;
        let mut below_h = self.embed(symbol)?;
        let mut below_z = 1.0;
        let mut layers = Vec::with_capacity(self.config.layers());
        for (l, params) in self.params.layers.iter().enumerate() {
            let above = state.layers.get(l + 1).map(|s| &s.h);
            if force_update {
                below_z = 1.0;
            }
            let mut next = hm_cell::cell_step(params, &state.layers[l], &below_h, below_z, above, mode, slope, rng)?;
            if force_update {
                next.z = 0.0;
            }
            below_h = next.h.clone();
            below_z = next.z;
            layers.push(next);
        }
        let hidden = layers.iter().map(|s| s.h.clone()).collect();
        let boundaries = layers.iter().map(|s| s.z).collect();
        Ok(StepOutput { state: NetworkState { layers }, hidden, boundaries })
    }

    /// Pre-softmax scores of the output module for one stream.
    pub fn output_logits(&self, hidden: &[Tensor]) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if hidden.len() != cfg.layers() {
            return Err(Error::Dimension(format!("{} hidden vectors for {} layers", hidden.len(), cfg.layers())));
        }
        let concat = Tensor::vector(hidden.iter().flat_map(|h| h.data().to_vec()).collect());
        let out = &self.params.output;
        let gates: Vec<f64> = kernels::affine(&out.gate_weights, &concat, None)?.data().iter().map(|&v| sigmoid(v)).collect();
        let mut embedded = vec![0.0; cfg.out_embed_dim];
        for ((h, w), g) in hidden.iter().zip(&out.projections).zip(&gates) {
            let p = kernels::affine(w, h, None)?;
            for (e, v) in embedded.iter_mut().zip(p.data()) {
                *e += g * v;
            }
        }
        let embedded = Tensor::vector(embedded.into_iter().map(|v| v.max(0.0)).collect());
        Ok(kernels::affine(&out.softmax_weight, &embedded, Some(&out.softmax_bias))?.into_data())
    }

    /// Next-symbol distribution from the hidden states of all layers.
    pub fn output_distribution(&self, hidden: &[Tensor]) -> Result<Tensor> {
        Ok(Tensor::vector(kernels::softmax(&self.output_logits(hidden)?)))
    }

    /// Output-module logits for a batch, recorded on the tape.
    pub fn output_nodes(&self, tape: &mut Tape, params: &ModelParams<NodeId>, hidden: &[NodeId]) -> Result<NodeId> {
        let out = &params.output;
        let concat = tape.concat_cols(hidden)?;
        let gate_pre = tape.affine(&[AffineTerm::new(out.gate_weights, concat)], None)?;
        let gates = tape.activation(gate_pre, Activation::Sigmoid)?;
        let mut terms = Vec::with_capacity(hidden.len());
        for (l, (&h, &w)) in hidden.iter().zip(&out.projections).enumerate() {
            let g = tape.slice_cols(gates, l, l + 1)?;
            terms.push(AffineTerm::scaled(w, h, g));
        }
        let pre = tape.affine(&terms, None)?;
        let embedded = tape.activation(pre, Activation::Relu)?;
        tape.affine(&[AffineTerm::new(out.softmax_weight, embedded)], Some(out.softmax_bias))
    }

    /// Forward `B` lanes over `T` steps. `inputs[b]` and `targets[b]` hold
    /// the lane's `T` inputs and next-symbol targets.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &ModelParams<NodeId>,
        inputs: &[&[usize]],
        targets: &[&[usize]],
        states: &[NetworkState],
        slope: f64,
        rng: &mut R,
        record_traces: bool,
    ) -> Result<BatchForward> {
        let cfg = &self.config;
        let lanes = inputs.len();
        if lanes == 0 || targets.len() != lanes || states.len() != lanes {
            return Err(Error::Usage(format!(
                "{lanes} input lanes, {} target lanes, {} states",
                targets.len(),
                states.len()
            )));
        }
        let steps = inputs[0].len();
        if steps == 0 {
            return Err(Error::Usage("empty window".into()));
        }
        if inputs.iter().chain(targets).any(|s| s.len() != steps) {
            return Err(Error::Usage("every lane needs the same number of inputs and targets".into()));
        }
        for s in states {
            s.check(cfg)?;
        }
        let mode = cfg.mode;
        let layers = cfg.layers();

        let mut nodes: Vec<LayerNodes> = (0..layers)
            .map(|l| -> Result<LayerNodes> {
                let d = cfg.dims[l];
                Ok(LayerNodes {
                    h: tape.constant(stack_rows(states.iter().map(|s| s.layers[l].h.data().to_vec()), d)?),
                    c: tape.constant(stack_rows(states.iter().map(|s| s.layers[l].c.data().to_vec()), d)?),
                    z: tape.constant(stack_rows(states.iter().map(|s| vec![s.layers[l].z]), 1)?),
                })
            })
            .collect::<Result<_>>()?;

        let mut traces: Vec<BoundaryTrace> = if record_traces {
            (0..lanes)
                .map(|b| BoundaryTrace::new(mode, inputs[b].to_vec(), states[b].layers[..layers - 1].iter().map(|s| s.z).collect()))
                .collect()
        } else {
            Vec::new()
        };
        let mut counts = mode.is_hard().then(|| OpCounts::empty(layers));
        let mut losses = Vec::with_capacity(steps);
        let mut column = vec![0usize; lanes];

        for t in 0..steps {
            for (b, c) in column.iter_mut().enumerate() {
                *c = inputs[b][t];
            }
            let mut below_h = tape.embed(params.embedding, &column)?;
            let mut below_z: Option<NodeId> = None;
            let mut next = Vec::with_capacity(layers);
            for l in 0..layers {
                let above = nodes.get(l + 1).map(|n| n.h);
                let prev = nodes[l];
                if let Some(counts) = counts.as_mut() {
                    let zp = tape.value(prev.z).data();
                    for b in 0..lanes {
                        let zb = below_z.map_or(1.0, |z| tape.value(z).data()[b]);
                        counts.record(l, Branch::select(zp[b], zb));
                    }
                }
                let out = hm_cell::cell_forward(tape, &params.layers[l], prev, below_h, below_z, above, mode, slope, rng)?;
                below_h = out.h;
                below_z = Some(out.z);
                next.push(out);
            }
            nodes = next;
            if record_traces {
                for (b, trace) in traces.iter_mut().enumerate() {
                    let z: Vec<f64> = nodes[..layers - 1].iter().map(|n| tape.value(n.z).data()[b]).collect();
                    let norms: Vec<f64> = nodes.iter().map(|n| l2(tape.value(n.h).row(b))).collect();
                    trace.push_step(&z, &norms);
                }
            }
            let hidden: Vec<NodeId> = nodes.iter().map(|n| n.h).collect();
            let logits = self.output_nodes(tape, params, &hidden)?;
            column.iter_mut().enumerate().for_each(|(b, c)| *c = targets[b][t]);
            losses.push(tape.softmax_xent(logits, &column)?);
        }
        if let Some(c) = counts.as_mut() {
            c.steps = steps * lanes;
        }
        let loss = tape.sum(&losses, 1.0 / (steps * lanes) as f64)?;

        let final_states = (0..lanes)
            .map(|b| NetworkState {
                layers: nodes
                    .iter()
                    .map(|n| LayerState {
                        h: Tensor::vector(tape.value(n.h).row(b).to_vec()),
                        c: Tensor::vector(tape.value(n.c).row(b).to_vec()),
                        z: tape.value(n.z).data()[b],
                    })
                    .collect(),
            })
            .collect();
        Ok(BatchForward { loss, final_states, traces, counts })
    }

    /// Mean next-symbol NLL over a window `x_1..x_{T+1}` with a trace of the
    /// `T` steps that read `x_1..x_T`.
    pub fn sequence_nll<R: Rng + ?Sized>(&self, window: &[usize], initial: &NetworkState, slope: f64, rng: &mut R) -> Result<SequenceNll> {
        if window.len() < 2 {
            return Err(Error::Usage(format!("a window needs at least 2 symbols, got {}", window.len())));
        }
        let mut tape = Tape::no_grad();
        let params = self.bind(&mut tape);
        let t = window.len() - 1;
        let fwd = self.forward_batch(
            &mut tape,
            &params,
            &[&window[..t]],
            &[&window[1..]],
            std::slice::from_ref(initial),
            slope,
            rng,
            true,
        )?;
        let loss = tape.value(fwd.loss).data()[0];
        let mut states = fwd.final_states;
        let mut traces = fwd.traces;
        Ok(SequenceNll {
            loss,
            bpc: loss / std::f64::consts::LN_2,
            final_state: states.pop().expect("one lane"),
            trace: traces.pop().expect("one lane"),
        })
    }

    /// Feed `prime`, then draw `n` symbols. Temperature 0 takes the argmax
    /// (lowest index on ties).
    pub fn sample_text<R: Rng + ?Sized>(&self, prime: &[usize], n: usize, temperature: f64, slope: f64, rng: &mut R) -> Result<Vec<usize>> {
        if self.config.vocab_size == 0 {
            return Err(Error::Usage("empty vocabulary".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and non-negative, got {temperature}")));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if prime.is_empty() {
            return Err(Error::Usage("sampling needs at least one priming symbol".into()));
        }
        let mut state = NetworkState::zeros(&self.config);
        let mut hidden = Vec::new();
        for &s in prime {
            let out = self.step(s, &state, slope, rng)?;
            state = out.state;
            hidden = out.hidden;
        }
        let mut produced = Vec::with_capacity(n);
        loop {
            let logits = self.output_logits(&hidden)?;
            let next = if temperature == 0.0 {
                argmax(&logits)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                draw(&kernels::softmax(&scaled), rng.gen::<f64>())
            };
            produced.push(next);
            if produced.len() == n {
                return Ok(produced);
            }
            let out = self.step(next, &state, slope, rng)?;
            state = out.state;
            hidden = out.hidden;
        }
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests;
