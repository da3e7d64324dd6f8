use std::fmt;

use serde::{Deserialize, Serialize};

use super::BoundaryTrace;
use crate::error::{Error, Result};
use crate::hm_cell::{BoundaryMode, Branch};

/// Branch tally of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOps {
    pub update: usize,
    pub copy: usize,
    pub flush: usize,
}

impl LayerOps {
    /// Steps that touched the layer's state (UPDATE or FLUSH).
    pub fn updates(&self) -> usize {
        self.update + self.flush
    }

    pub fn total(&self) -> usize {
        self.update + self.copy + self.flush
    }
}

/// Per-layer branch counts over `steps` steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub layers: Vec<LayerOps>,
    pub steps: usize,
}

impl OpCounts {
    pub fn empty(layers: usize) -> Self {
        Self { layers: vec![LayerOps::default(); layers], steps: 0 }
    }

    /// Counts from per-layer update totals alone; the rest of each row is COPY.
    pub fn from_update_totals(updates: &[usize], steps: usize) -> Result<Self> {
        let layers = updates
            .iter()
            .map(|&u| {
                if u > steps {
                    Err(Error::Config(format!("{u} updates exceed {steps} steps")))
                } else {
                    Ok(LayerOps { update: u, copy: steps - u, flush: 0 })
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, steps })
    }

    pub fn record(&mut self, layer: usize, branch: Branch) {
        let l = &mut self.layers[layer];
        match branch {
            Branch::Update => l.update += 1,
            Branch::Copy => l.copy += 1,
            Branch::Flush => l.flush += 1,
        }
    }

    pub fn merge(&mut self, other: &OpCounts) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.update += b.update;
            a.copy += b.copy;
            a.flush += b.flush;
        }
        self.steps += other.steps;
    }

    pub fn total_updates(&self) -> usize {
        self.layers.iter().map(LayerOps::updates).sum()
    }

    /// Work of a model that updates every layer at every step.
    pub fn baseline(&self) -> usize {
        self.layers.len() * self.steps
    }

    pub fn reduction(&self) -> f64 {
        if self.baseline() == 0 {
            return 0.0;
        }
        1.0 - self.total_updates() as f64 / self.baseline() as f64
    }
}

impl fmt::Display for OpCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer  update    copy   flush")?;
        for (l, ops) in self.layers.iter().enumerate() {
            writeln!(f, "{:>5} {:>7} {:>7} {:>7}", l + 1, ops.update, ops.copy, ops.flush)?;
        }
        write!(
            f,
            "updates {} of {} ({:.1}% reduction)",
            self.total_updates(),
            self.baseline(),
            100.0 * self.reduction()
        )
    }
}

/// Classifies every (layer, step) of a hard-boundary trace by branch.
pub fn count_ops(trace: &BoundaryTrace) -> Result<OpCounts> {
    if trace.mode == BoundaryMode::Soft {
        return Err(Error::Usage("operation counts need a step or sample mode trace".into()));
    }
    trace.validate()?;
    let binary = |z: f64| z == 0.0 || z == 1.0;
    if !trace.boundaries.iter().flatten().chain(&trace.initial_boundaries).all(|&z| binary(z)) {
        return Err(Error::Usage("trace holds non-binary boundaries".into()));
    }
    let layers = trace.layers();
    let steps = trace.len();
    let mut counts = OpCounts::empty(layers);
    counts.steps = steps;
    for l in 0..layers {
        for t in 0..steps {
            let z_prev = match trace.boundaries.get(l) {
                None => 0.0,
                Some(_) if t == 0 => trace.initial_boundaries[l],
                Some(row) => row[t - 1],
            };
            let z_below = if l == 0 { 1.0 } else { trace.boundaries[l - 1][t] };
            counts.record(l, Branch::select(z_prev, z_below));
        }
    }
    Ok(counts)
}
