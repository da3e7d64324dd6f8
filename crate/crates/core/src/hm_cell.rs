//! One HM-LSTM layer's per-step transition.
//!
//! Two entry points share the same parameters:
//!
//! * [`cell_step`] works on plain values for one stream. In the hard modes it
//!   picks exactly one of UPDATE / COPY / FLUSH and skips the gates when it
//!   copies.
//! * [`cell_forward`] records a batch of lanes on a [`Tape`]. Branch selection
//!   is written as a multilinear blend in the boundary values, which equals
//!   the branch table exactly when the boundaries are binary and lets the
//!   straight-through gradient reach the boundary detectors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, hard_sigmoid, hard_sigmoid_derivative, sigmoid, Activation};
use crate::numerics::{AffineTerm, NodeId, Tape, Tensor};

/// Forget-gate bias at initialization.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// How the boundary probability becomes a boundary value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Deterministic threshold at 0.5.
    Step,
    /// Bernoulli draw.
    Sample,
    /// The probability itself, no binarization.
    Soft,
}

impl BoundaryMode {
    pub fn is_hard(self) -> bool {
        !matches!(self, BoundaryMode::Soft)
    }
}

impl fmt::Display for BoundaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryMode::Step => "step",
            BoundaryMode::Sample => "sample",
            BoundaryMode::Soft => "soft",
        })
    }
}

impl FromStr for BoundaryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(BoundaryMode::Step),
            "sample" => Ok(BoundaryMode::Sample),
            "soft" => Ok(BoundaryMode::Soft),
            other => Err(Error::Config(format!("unknown boundary mode {other:?}"))),
        }
    }
}

/// Operation a layer performs at one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Update,
    Copy,
    Flush,
}

impl Branch {
    /// Branch table over the layer's previous boundary and the boundary
    /// below at the current step. FLUSH wins whenever `z_prev` is set.
    pub fn select(z_prev: f64, z_below: f64) -> Branch {
        if z_prev > 0.5 {
            Branch::Flush
        } else if z_below > 0.5 {
            Branch::Update
        } else {
            Branch::Copy
        }
    }
}

/// Dimensions of one layer and its neighbours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub dim: usize,
    pub below_dim: usize,
    /// `None` for the top layer, which has neither top-down input nor boundary.
    pub above_dim: Option<usize>,
}

impl LayerShape {
    pub fn has_boundary(&self) -> bool {
        self.above_dim.is_some()
    }

    /// Pre-activation rows: four gate blocks plus the boundary row.
    pub fn rows(&self) -> usize {
        4 * self.dim + usize::from(self.has_boundary())
    }
}

/// Per-summand layer-normalization gains over the `4·d` gate rows.
#[derive(Clone, Debug, PartialEq)]
pub struct NormGains<T = Tensor> {
    pub recurrent: T,
    pub top_down: Option<T>,
    pub bottom_up: T,
}

/// Transition parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = Tensor> {
    /// `[(4d + r) x d]`, the layer's own previous hidden state.
    pub recurrent: T,
    /// `[(4d + r) x d_above]`, absent at the top layer.
    pub top_down: Option<T>,
    /// `[(4d + r) x d_below]`.
    pub bottom_up: T,
    /// `[4d + r]`.
    pub bias: T,
    pub norm_gains: Option<NormGains<T>>,
}

impl<T> LayerParams<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&'s T) -> U) -> LayerParams<U> {
        LayerParams {
            recurrent: f(&self.recurrent),
            top_down: self.top_down.as_ref().map(&mut f),
            bottom_up: f(&self.bottom_up),
            bias: f(&self.bias),
            norm_gains: self.norm_gains.as_ref().map(|g| NormGains {
                recurrent: f(&g.recurrent),
                top_down: g.top_down.as_ref().map(&mut f),
                bottom_up: f(&g.bottom_up),
            }),
        }
    }

    /// Tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<(&'static str, &T)> {
        let mut out = vec![("recurrent", &self.recurrent)];
        if let Some(t) = &self.top_down {
            out.push(("top_down", t));
        }
        out.push(("bottom_up", &self.bottom_up));
        out.push(("bias", &self.bias));
        if let Some(g) = &self.norm_gains {
            out.push(("norm_gain.recurrent", &g.recurrent));
            if let Some(t) = &g.top_down {
                out.push(("norm_gain.top_down", t));
            }
            out.push(("norm_gain.bottom_up", &g.bottom_up));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut T)> {
        let mut out = vec![("recurrent", &mut self.recurrent)];
        if let Some(t) = &mut self.top_down {
            out.push(("top_down", t));
        }
        out.push(("bottom_up", &mut self.bottom_up));
        out.push(("bias", &mut self.bias));
        if let Some(g) = &mut self.norm_gains {
            out.push(("norm_gain.recurrent", &mut g.recurrent));
            if let Some(t) = &mut g.top_down {
                out.push(("norm_gain.top_down", t));
            }
            out.push(("norm_gain.bottom_up", &mut g.bottom_up));
        }
        out
    }
}

impl LayerParams<Tensor> {
    /// Uniform weights in `±sqrt(1/fan_in)`, forget bias 1, other biases 0,
    /// normalization gains 1.
    pub fn init<R: Rng + ?Sized>(shape: LayerShape, layer_norm: bool, rng: &mut R) -> Self {
        let rows = shape.rows();
        let mut uniform = |cols: usize| {
            let bound = (1.0 / cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(vec![rows, cols], data).expect("positive extents")
        };
        let recurrent = uniform(shape.dim);
        let top_down = shape.above_dim.map(&mut uniform);
        let bottom_up = uniform(shape.below_dim);
        let mut bias = Tensor::zeros(&[rows]);
        bias.data_mut()[..shape.dim].fill(FORGET_BIAS_INIT);
        Self { recurrent, top_down, bottom_up, bias, norm_gains: Self::unit_gains(shape, layer_norm) }
    }

    pub fn zeros(shape: LayerShape, layer_norm: bool) -> Self {
        let rows = shape.rows();
        Self {
            recurrent: Tensor::zeros(&[rows, shape.dim]),
            top_down: shape.above_dim.map(|a| Tensor::zeros(&[rows, a])),
            bottom_up: Tensor::zeros(&[rows, shape.below_dim]),
            bias: Tensor::zeros(&[rows]),
            norm_gains: Self::unit_gains(shape, layer_norm),
        }
    }

    fn unit_gains(shape: LayerShape, layer_norm: bool) -> Option<NormGains> {
        layer_norm.then(|| {
            let ones = Tensor::full(&[4 * shape.dim], 1.0);
            NormGains {
                recurrent: ones.clone(),
                top_down: shape.above_dim.map(|_| ones.clone()),
                bottom_up: ones,
            }
        })
    }

    pub fn shape(&self) -> LayerShape {
        let dim = self.recurrent.shape()[1];
        LayerShape {
            dim,
            below_dim: self.bottom_up.shape()[1],
            above_dim: self.top_down.as_ref().map(|t| t.shape()[1]),
        }
    }

    pub fn has_boundary(&self) -> bool {
        self.top_down.is_some()
    }

    /// Checks that every tensor agrees with `shape`.
    pub fn validate(&self, shape: LayerShape) -> Result<()> {
        let rows = shape.rows();
        let check = |name: &str, t: &Tensor, expect: &[usize]| {
            if t.shape() == expect {
                Ok(())
            } else {
                Err(Error::Dimension(format!("{name}: expected {expect:?}, got {:?}", t.shape())))
            }
        };
        check("recurrent", &self.recurrent, &[rows, shape.dim])?;
        check("bottom_up", &self.bottom_up, &[rows, shape.below_dim])?;
        check("bias", &self.bias, &[rows])?;
        match (&self.top_down, shape.above_dim) {
            (Some(t), Some(a)) => check("top_down", t, &[rows, a])?,
            (None, None) => {}
            _ => return Err(Error::Dimension("top-down matrix must exist exactly below the top layer".into())),
        }
        if let Some(g) = &self.norm_gains {
            let gate = [4 * shape.dim];
            check("norm_gain.recurrent", &g.recurrent, &gate)?;
            check("norm_gain.bottom_up", &g.bottom_up, &gate)?;
            match (&g.top_down, shape.above_dim) {
                (Some(t), Some(_)) => check("norm_gain.top_down", t, &gate)?,
                (None, None) => {}
                _ => return Err(Error::Dimension("top-down gain must follow the top-down matrix".into())),
            }
        }
        Ok(())
    }
}

/// State of one layer for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Tensor,
    /// Binary in the hard modes, in `[0, 1]` in soft mode.
    pub z: f64,
}

impl LayerState {
    pub fn zeros(dim: usize) -> Self {
        Self { h: Tensor::zeros(&[dim]), c: Tensor::zeros(&[dim]), z: 0.0 }
    }
}

/// Activated gates of one layer at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct GateBundle {
    pub f: Tensor,
    pub i: Tensor,
    pub o: Tensor,
    pub g: Tensor,
    /// Boundary probability; `None` at the top layer.
    pub z_tilde: Option<f64>,
    /// Boundary pre-activation fed to the hard sigmoid.
    pub z_preact: Option<f64>,
}

fn check_slope(slope: f64) -> Result<()> {
    Activation::hard_sigmoid(slope).map(|_| ())
}

fn normalize_gate_rows(v: &mut [f64], gain: &Tensor, gate_rows: usize) {
    let (mean, rstd) = kernels::row_moments(&v[..gate_rows]);
    for (x, g) in v[..gate_rows].iter_mut().zip(gain.data()) {
        *x = (*x - mean) * rstd * g;
    }
}

/// Pre-activations and activated gates for one stream.
pub fn compute_gates(
    params: &LayerParams,
    h_prev: &Tensor,
    z_prev: f64,
    h_below: &Tensor,
    z_below: f64,
    h_above_prev: Option<&Tensor>,
    slope: f64,
) -> Result<GateBundle> {
    check_slope(slope)?;
    let shape = params.shape();
    let d = shape.dim;
    let gate_rows = 4 * d;
    let gains = params.norm_gains.as_ref();

    let mut recurrent = kernels::affine(&params.recurrent, h_prev, None)?.into_data();
    if let Some(g) = gains {
        normalize_gate_rows(&mut recurrent, &g.recurrent, gate_rows);
    }
    let mut s = recurrent;

    match (&params.top_down, h_above_prev) {
        (Some(u), Some(h_above)) => {
            let mut td = kernels::affine(u, h_above, None)?.into_data();
            if let Some(g) = gains.and_then(|g| g.top_down.as_ref()) {
                normalize_gate_rows(&mut td, g, gate_rows);
            }
            for (x, t) in s.iter_mut().zip(&td) {
                *x += z_prev * t;
            }
        }
        (None, None) => {}
        (Some(_), None) => return Err(Error::Usage("non-top layer needs the hidden state of the layer above".into())),
        (None, Some(_)) => return Err(Error::Usage("the top layer takes no top-down input".into())),
    }

    let mut bu = kernels::affine(&params.bottom_up, h_below, None)?.into_data();
    if let Some(g) = gains {
        normalize_gate_rows(&mut bu, &g.bottom_up, gate_rows);
    }
    for ((x, u), b) in s.iter_mut().zip(&bu).zip(params.bias.data()) {
        *x += z_below * u;
        *x += b;
    }

    let act = |range: std::ops::Range<usize>, f: fn(f64) -> f64| Tensor::vector(s[range].iter().map(|&v| f(v)).collect());
    let z_preact = shape.has_boundary().then(|| s[gate_rows]);
    Ok(GateBundle {
        f: act(0..d, sigmoid),
        i: act(d..2 * d, sigmoid),
        o: act(2 * d..3 * d, sigmoid),
        g: act(3 * d..4 * d, f64::tanh),
        z_tilde: z_preact.map(|p| hard_sigmoid(p, slope)),
        z_preact,
    })
}

/// Turn a boundary probability into a boundary value.
pub fn binarize<R: Rng + ?Sized>(z_tilde: f64, mode: BoundaryMode, rng: &mut R) -> Result<f64> {
    let u = matches!(mode, BoundaryMode::Sample).then(|| rng.gen::<f64>());
    binarize_with(z_tilde, mode, u)
}

fn binarize_with(z_tilde: f64, mode: BoundaryMode, uniform: Option<f64>) -> Result<f64> {
    if !(0.0..=1.0).contains(&z_tilde) {
        return Err(Error::Invariant(format!("boundary probability {z_tilde} outside [0, 1]")));
    }
    Ok(match mode {
        BoundaryMode::Soft => z_tilde,
        BoundaryMode::Step => kernels::binarize_value(z_tilde, None),
        BoundaryMode::Sample => kernels::binarize_value(z_tilde, uniform),
    })
}

/// Straight-through gradient with respect to the boundary pre-activation:
/// identity through the binarizer, then the hard sigmoid's slope.
pub fn straight_through_grad(upstream: f64, preact: f64, slope: f64) -> f64 {
    upstream * hard_sigmoid_derivative(preact, slope)
}

fn is_binary(z: f64) -> bool {
    z == 0.0 || z == 1.0
}

/// One layer, one step, one stream.
#[allow(clippy::too_many_arguments)]
pub fn cell_step<R: Rng + ?Sized>(
    params: &LayerParams,
    prev: &LayerState,
    h_below: &Tensor,
    z_below: f64,
    h_above_prev: Option<&Tensor>,
    mode: BoundaryMode,
    slope: f64,
    rng: &mut R,
) -> Result<LayerState> {
    check_slope(slope)?;
    let has_boundary = params.has_boundary();
    if has_boundary != h_above_prev.is_some() {
        return Err(Error::Usage("top-down input must be given exactly below the top layer".into()));
    }
    // one draw per step for sampling layers, whatever the branch
    let uniform = (has_boundary && mode == BoundaryMode::Sample).then(|| rng.gen::<f64>());

    if mode.is_hard() {
        if !is_binary(prev.z) || !is_binary(z_below) {
            return Err(Error::Usage(format!(
                "{mode} mode needs binary boundaries, got z_prev={} z_below={z_below}",
                prev.z
            )));
        }
        let branch = Branch::select(prev.z, z_below);
        if branch == Branch::Copy {
            return Ok(prev.clone());
        }
        let gates = compute_gates(params, &prev.h, prev.z, h_below, z_below, h_above_prev, slope)?;
        let d = gates.f.len();
        let c: Vec<f64> = (0..d)
            .map(|j| {
                let ig = gates.i.data()[j] * gates.g.data()[j];
                match branch {
                    Branch::Update => gates.f.data()[j] * prev.c.data()[j] + ig,
                    _ => ig,
                }
            })
            .collect();
        let h = c.iter().zip(gates.o.data()).map(|(c, o)| o * c.tanh()).collect();
        let z = match gates.z_tilde {
            Some(p) => binarize_with(p, mode, uniform)?,
            None => 0.0,
        };
        return Ok(LayerState { h: Tensor::vector(h), c: Tensor::vector(c), z });
    }

    let (zp, zb) = (prev.z, z_below);
    if !(0.0..=1.0).contains(&zp) || !(0.0..=1.0).contains(&zb) {
        return Err(Error::Usage(format!("soft boundaries must lie in [0, 1], got {zp} and {zb}")));
    }
    let gates = compute_gates(params, &prev.h, zp, h_below, zb, h_above_prev, slope)?;
    let d = gates.f.len();
    let mut c = Vec::with_capacity(d);
    let mut h = Vec::with_capacity(d);
    for j in 0..d {
        let ig = gates.i.data()[j] * gates.g.data()[j];
        let upd = gates.f.data()[j] * prev.c.data()[j] + ig;
        let cj = (1.0 - zp) * (zb * upd + (1.0 - zb) * prev.c.data()[j]) + zp * ig;
        let oth = gates.o.data()[j] * cj.tanh();
        h.push((1.0 - zp) * (zb * oth + (1.0 - zb) * prev.h.data()[j]) + zp * oth);
        c.push(cj);
    }
    let z = match gates.z_tilde {
        Some(p) => (1.0 - (1.0 - zp) * (1.0 - zb)) * p,
        None => 0.0,
    };
    Ok(LayerState { h: Tensor::vector(h), c: Tensor::vector(c), z })
}

/// Tape handles for a batch of layer states: `h`, `c` are `[B x d]`, `z` is `[B x 1]`.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub h: NodeId,
    pub c: NodeId,
    pub z: NodeId,
}

/// Tape handles of the activated gates.
#[derive(Clone, Copy, Debug)]
pub struct GateNodes {
    pub f: NodeId,
    pub i: NodeId,
    pub o: NodeId,
    pub g: NodeId,
    pub z_tilde: Option<NodeId>,
}

/// Gate computation for a batch of lanes on the tape. `z_below = None` means
/// the input layer, whose boundary is always 1.
#[allow(clippy::too_many_arguments)]
pub fn gate_nodes(
    tape: &mut Tape,
    params: &LayerParams<NodeId>,
    h_prev: NodeId,
    z_prev: NodeId,
    h_below: NodeId,
    z_below: Option<NodeId>,
    h_above_prev: Option<NodeId>,
    slope: f64,
) -> Result<GateNodes> {
    let hs = Activation::hard_sigmoid(slope)?;
    let rows = tape.value(params.bias).len();
    let has_boundary = params.top_down.is_some();
    let d = (rows - usize::from(has_boundary)) / 4;
    let top_down = match (params.top_down, h_above_prev) {
        (Some(u), Some(h)) => Some(AffineTerm::scaled(u, h, z_prev)),
        (None, None) => None,
        (Some(_), None) => return Err(Error::Usage("non-top layer needs the hidden state of the layer above".into())),
        (None, Some(_)) => return Err(Error::Usage("the top layer takes no top-down input".into())),
    };
    let bottom_up = AffineTerm { weight: params.bottom_up, input: h_below, row_scale: z_below };
    let recurrent = AffineTerm::new(params.recurrent, h_prev);

    let s = match &params.norm_gains {
        None => {
            let terms: Vec<AffineTerm> = [Some(recurrent), top_down, Some(bottom_up)].into_iter().flatten().collect();
            tape.affine(&terms, Some(params.bias))?
        }
        Some(gains) => {
            let mut parts = vec![normalized_term(tape, recurrent, gains.recurrent, 4 * d, has_boundary)?];
            if let (Some(term), Some(gain)) = (top_down, gains.top_down) {
                parts.push(normalized_term(tape, term, gain, 4 * d, has_boundary)?);
            }
            parts.push(normalized_term(tape, bottom_up, gains.bottom_up, 4 * d, has_boundary)?);
            let total = tape.sum(&parts, 1.0)?;
            tape.add_bias(total, params.bias)?
        }
    };

    let block = |tape: &mut Tape, k: usize, kind: Activation| -> Result<NodeId> {
        let x = tape.slice_cols(s, k * d, (k + 1) * d)?;
        tape.activation(x, kind)
    };
    let f = block(tape, 0, Activation::Sigmoid)?;
    let i = block(tape, 1, Activation::Sigmoid)?;
    let o = block(tape, 2, Activation::Sigmoid)?;
    let g = block(tape, 3, Activation::Tanh)?;
    let z_tilde = if has_boundary {
        let pre = tape.slice_cols(s, 4 * d, 4 * d + 1)?;
        Some(tape.activation(pre, hs)?)
    } else {
        None
    };
    Ok(GateNodes { f, i, o, g, z_tilde })
}

/// `row_scale ⊙ [LN(W x)[gates] ; (W x)[boundary]]`.
fn normalized_term(tape: &mut Tape, term: AffineTerm, gain: NodeId, gate_rows: usize, has_boundary: bool) -> Result<NodeId> {
    let raw = tape.affine(&[AffineTerm::new(term.weight, term.input)], None)?;
    let gates = tape.slice_cols(raw, 0, gate_rows)?;
    let mut out = tape.layer_norm(gates, gain, None)?;
    if has_boundary {
        let boundary = tape.slice_cols(raw, gate_rows, gate_rows + 1)?;
        out = tape.concat_cols(&[out, boundary])?;
    }
    match term.row_scale {
        Some(s) => tape.scale_rows(out, s),
        None => Ok(out),
    }
}

/// One layer, one step, a batch of lanes, recorded on the tape.
#[allow(clippy::too_many_arguments)]
pub fn cell_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &LayerParams<NodeId>,
    prev: LayerNodes,
    h_below: NodeId,
    z_below: Option<NodeId>,
    h_above_prev: Option<NodeId>,
    mode: BoundaryMode,
    slope: f64,
    rng: &mut R,
) -> Result<LayerNodes> {
    let lanes = tape.value(prev.h).rows();
    let has_boundary = params.top_down.is_some();
    let uniforms: Option<Vec<f64>> =
        (has_boundary && mode == BoundaryMode::Sample).then(|| (0..lanes).map(|_| rng.gen::<f64>()).collect());

    if mode.is_hard() {
        let zp = tape.value(prev.z).data();
        let zb = z_below.map(|z| tape.value(z).data());
        if !zp.iter().copied().all(is_binary) || !zb.is_none_or(|z| z.iter().copied().all(is_binary)) {
            return Err(Error::Usage(format!("{mode} mode needs binary boundaries")));
        }
        let all_copy = (0..lanes).all(|b| Branch::select(zp[b], zb.map_or(1.0, |z| z[b])) == Branch::Copy);
        if all_copy && !tape.grad_enabled() {
            return Ok(prev);
        }
    }

    let gates = gate_nodes(tape, params, prev.h, prev.z, h_below, z_below, h_above_prev, slope)?;
    let keep = tape.one_minus(prev.z)?;
    let fc = tape.mul(gates.f, prev.c)?;
    let ig = tape.mul(gates.i, gates.g)?;
    let upd = tape.add(fc, ig)?;
    let blend_below = |tape: &mut Tape, fresh: NodeId, old: NodeId| -> Result<NodeId> {
        match z_below {
            None => Ok(fresh),
            Some(zb) => {
                let a = tape.scale_rows(fresh, zb)?;
                let not_zb = tape.one_minus(zb)?;
                let b = tape.scale_rows(old, not_zb)?;
                tape.add(a, b)
            }
        }
    };
    let inner_c = blend_below(tape, upd, prev.c)?;
    let kept_c = tape.scale_rows(inner_c, keep)?;
    let flushed_c = tape.scale_rows(ig, prev.z)?;
    let c = tape.add(kept_c, flushed_c)?;

    let tc = tape.activation(c, Activation::Tanh)?;
    let oth = tape.mul(gates.o, tc)?;
    let inner_h = blend_below(tape, oth, prev.h)?;
    let kept_h = tape.scale_rows(inner_h, keep)?;
    let flushed_h = tape.scale_rows(oth, prev.z)?;
    let h = tape.add(kept_h, flushed_h)?;

    let z = match gates.z_tilde {
        None => tape.constant(Tensor::zeros(&[lanes, 1])),
        Some(zt) => {
            let bin = if mode.is_hard() { tape.straight_through(zt, uniforms.as_deref())? } else { zt };
            match z_below {
                None => bin,
                Some(zb) => {
                    let not_zb = tape.one_minus(zb)?;
                    let copy_weight = tape.mul(keep, not_zb)?;
                    let active = tape.one_minus(copy_weight)?;
                    tape.mul(active, bin)?
                }
            }
        }
    };
    Ok(LayerNodes { h, c, z })
}
