use std::fmt;

use rand::rngs::mock::StepRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hm_cell::BoundaryMode;
use crate::network::{Model, ModelConfig, ModelParams, NetworkState};
use crate::numerics::{BackwardFault, Tape};

/// Settings of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub probes: usize,
    pub eps: f64,
    /// Pre-activations closer than this to a ReLU or hard-sigmoid kink make a
    /// probe unusable if the perturbation moves them.
    pub kink_margin: f64,
    /// Replacement coordinates tried per unusable probe.
    pub max_resamples: usize,
    pub tolerance: f64,
    pub slope: f64,
    pub seed: u64,
    /// Deliberately corrupts a backward rule (mutation testing).
    pub backward_fault: Option<BackwardFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            probes: 200,
            eps: 1e-5,
            kink_margin: 1e-3,
            max_resamples: 20,
            tolerance: 1e-5,
            slope: 1.0,
            seed: 0,
            backward_fault: None,
        }
    }
}

/// Analytic versus central-difference derivative for one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Sorted worst first.
    pub checked: Vec<CoordinateCheck>,
    /// Probes that stayed near a kink after every resample.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checked.first().map_or(0.0, |c| c.rel_error)
    }

    pub fn passed(&self) -> bool {
        !self.checked.is_empty() && self.max_rel_error() <= self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checked {} coordinates, skipped {}", self.checked.len(), self.skipped)?;
        writeln!(f, "max relative error {:.3e} (tolerance {:.0e})", self.max_rel_error(), self.tolerance)?;
        writeln!(f, "worst coordinates:")?;
        for c in self.checked.iter().take(10) {
            writeln!(
                f,
                "  {}[{}] analytic {:+.10e} numeric {:+.10e} rel {:.3e}",
                c.tensor, c.index, c.analytic, c.numeric, c.rel_error
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`. The floor keeps vanishing derivatives
/// from turning roundoff into large ratios.
pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

fn evaluate(model: &Model, window: &[usize], initial: &NetworkState, slope: f64) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut tape = Tape::no_grad();
    let params = model.bind(&mut tape);
    let t = window.len() - 1;
    let fwd = model.forward_batch(
        &mut tape,
        &params,
        &[&window[..t]],
        &[&window[1..]],
        std::slice::from_ref(initial),
        slope,
        &mut StepRng::new(0, 0),
        false,
    )?;
    Ok((tape.value(fwd.loss).data()[0], tape.kink_profile()))
}

/// Draws a model with weights uniform in `±scale` and a random window of
/// `steps + 1` symbols, redrawing until no ReLU or hard-sigmoid input lies
/// within `margin` of a kink. Gives up after `max_tries` draws.
pub fn smooth_probe(
    config: &ModelConfig,
    steps: usize,
    scale: f64,
    margin: f64,
    slope: f64,
    max_tries: usize,
    seed: u64,
) -> Result<(Model, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_tries {
        let mut params = ModelParams::zeros(config)?;
        for (_, t) in params.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..=scale));
        }
        let model = Model::new(config.clone(), params)?;
        let window: Vec<usize> = (0..=steps).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let (_, profile) = evaluate(&model, &window, &NetworkState::zeros(config), slope)?;
        if profile.iter().all(|&(_, d)| d >= margin) {
            return Ok((model, window));
        }
    }
    Err(Error::Usage(format!("no probe point clear of kinks after {max_tries} draws")))
}

/// Compares backpropagated derivatives of the mean window NLL with central
/// differences on randomly chosen parameter coordinates. Soft mode only.
pub fn gradcheck(model: &Model, window: &[usize], initial: &NetworkState, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if model.config.mode != BoundaryMode::Soft {
        return Err(Error::Usage(format!("gradient checks need soft boundaries, model uses {}", model.config.mode)));
    }
    if window.len() < 2 {
        return Err(Error::Usage("a window needs at least 2 symbols".into()));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {}", opts.eps)));
    }

    let (analytic, names) = {
        let mut tape = Tape::new();
        tape.set_backward_fault(opts.backward_fault);
        let params = model.bind(&mut tape);
        let t = window.len() - 1;
        let fwd = model.forward_batch(
            &mut tape,
            &params,
            &[&window[..t]],
            &[&window[1..]],
            std::slice::from_ref(initial),
            opts.slope,
            &mut StepRng::new(0, 0),
            false,
        )?;
        let mut grads = tape.backward(fwd.loss)?;
        let mut analytic = Vec::new();
        let mut names = Vec::new();
        for (name, id) in params.named() {
            let g = grads.take(*id).unwrap_or_else(|| crate::numerics::Tensor::zeros(tape.value(*id).shape()));
            analytic.push(g.into_data());
            names.push(name);
        }
        (analytic, names)
    };
    let (_, base_profile) = evaluate(model, window, initial, opts.slope)?;

    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let budget = (opts.probes * (opts.max_resamples + 1)).min(total);
    let mut candidates = rand::seq::index::sample(&mut rng, total, budget).into_iter();

    let mut probe = model.clone();
    let mut checked = Vec::with_capacity(opts.probes);
    let mut skipped = 0;
    'probes: for _ in 0..opts.probes.min(total) {
        for _ in 0..=opts.max_resamples {
            let Some(flat) = candidates.next() else {
                skipped += 1;
                continue 'probes;
            };
            let (mut tensor, mut index) = (0, flat);
            while index >= sizes[tensor] {
                index -= sizes[tensor];
                tensor += 1;
            }
            let original = probe.params.named()[tensor].1.data()[index];
            let set = |probe: &mut Model, v: f64| {
                let mut named = probe.params.named_mut();
                named[tensor].1.data_mut()[index] = v;
            };
            set(&mut probe, original + opts.eps);
            let (plus, plus_profile) = evaluate(&probe, window, initial, opts.slope)?;
            set(&mut probe, original - opts.eps);
            let (minus, minus_profile) = evaluate(&probe, window, initial, opts.slope)?;
            set(&mut probe, original);

            let near_kink = base_profile.iter().zip(&plus_profile).zip(&minus_profile).any(|((b, p), m)| {
                let moved = p.0 != m.0 || p.0 != b.0;
                moved && b.1.min(p.1).min(m.1) < opts.kink_margin
            });
            if near_kink {
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[tensor][index];
            checked.push(CoordinateCheck {
                tensor: names[tensor].clone(),
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
            continue 'probes;
        }
        skipped += 1;
    }
    checked.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    Ok(GradcheckReport { checked, skipped, tolerance: opts.tolerance })
}
