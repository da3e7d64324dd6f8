use rand::rngs::mock::StepRng;

use crate::error::{Error, Result};
use crate::hm_cell::{cell_step, BoundaryMode, LayerParams, LayerState};
use crate::numerics::Tensor;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A textbook LSTM step written out element by element. Uses the first `4d`
/// rows of the recurrent and bottom-up matrices and of the bias.
pub fn plain_lstm_step(params: &LayerParams, h: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let u = params.recurrent.data();
    let w = params.bottom_up.data();
    let b = params.bias.data();
    let pre = |row: usize| -> f64 {
        let mut s = b[row];
        for (j, hj) in h.iter().enumerate() {
            s += u[row * d + j] * hj;
        }
        for (j, xj) in x.iter().enumerate() {
            s += w[row * x.len() + j] * xj;
        }
        s
    };
    let mut h_new = vec![0.0; d];
    let mut c_new = vec![0.0; d];
    for k in 0..d {
        let f = logistic(pre(k));
        let i = logistic(pre(d + k));
        let o = logistic(pre(2 * d + k));
        let g = pre(3 * d + k).tanh();
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

/// Runs one layer against [`plain_lstm_step`] on the same inputs and returns
/// the largest absolute deviation of `h` or `c`. With `force_boundaries` the
/// layer below always fires, the layer's own boundary is pinned to 0 and the
/// top-down input is zero, which reduces every step to a plain LSTM update.
pub fn lstm_oracle_compare(params: &LayerParams, inputs: &[Tensor], force_boundaries: bool) -> Result<f64> {
    if params.norm_gains.is_some() {
        return Err(Error::Usage("the oracle compares layers without normalization".into()));
    }
    let shape = params.shape();
    let above = shape.above_dim.map(|n| Tensor::zeros(&[n]));
    let mut state = LayerState::zeros(shape.dim);
    let (mut h, mut c) = (vec![0.0; shape.dim], vec![0.0; shape.dim]);
    let mut rng = StepRng::new(0, 0);
    let mut worst: f64 = 0.0;
    for x in inputs {
        if x.len() != shape.below_dim {
            return Err(Error::Dimension(format!("input of length {} for a layer reading {}", x.len(), shape.below_dim)));
        }
        state = cell_step(params, &state, x, 1.0, above.as_ref(), BoundaryMode::Step, 1.0, &mut rng)?;
        if force_boundaries {
            state.z = 0.0;
        }
        (h, c) = plain_lstm_step(params, &h, &c, x.data());
        for (a, b) in state.h.data().iter().zip(&h).chain(state.c.data().iter().zip(&c)) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}
