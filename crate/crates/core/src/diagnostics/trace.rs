use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hm_cell::BoundaryMode;

/// Panel width used when none is given.
pub const DEFAULT_TRACE_WIDTH: usize = 90;

/// Time-major record of a read window: boundary values of layers `1..L-1`,
/// hidden-state norms of all `L` layers, and the input itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrace {
    pub mode: BoundaryMode,
    pub symbols: Vec<usize>,
    /// Decoded input; empty until [`BoundaryTrace::with_text`] is called.
    pub text: Vec<char>,
    /// Boundary state of each boundary layer before the first step.
    pub initial_boundaries: Vec<f64>,
    /// `boundaries[ℓ][t]`, one row per boundary layer.
    pub boundaries: Vec<Vec<f64>>,
    /// `norms[ℓ][t] = ‖h^ℓ_t‖₂`, one row per layer.
    pub norms: Vec<Vec<f64>>,
}

impl BoundaryTrace {
    pub fn new(mode: BoundaryMode, symbols: Vec<usize>, initial_boundaries: Vec<f64>) -> Self {
        let steps = symbols.len();
        let rows = initial_boundaries.len();
        Self {
            mode,
            symbols,
            text: Vec::new(),
            initial_boundaries,
            boundaries: vec![Vec::with_capacity(steps); rows],
            norms: vec![Vec::with_capacity(steps); rows + 1],
        }
    }

    pub fn push_step(&mut self, z: &[f64], norms: &[f64]) {
        for (row, &v) in self.boundaries.iter_mut().zip(z) {
            row.push(v);
        }
        for (row, &v) in self.norms.iter_mut().zip(norms) {
            row.push(v);
        }
    }

    pub fn with_text(mut self, text: &str) -> Self {
        self.text = text.chars().collect();
        self
    }

    /// Number of recorded steps.
    pub fn len(&self) -> usize {
        self.norms.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        self.norms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.norms.len() != self.boundaries.len() + 1 || self.initial_boundaries.len() != self.boundaries.len() {
            return Err(Error::Dimension("trace needs L norm rows and L-1 boundary rows".into()));
        }
        if self.boundaries.iter().chain(&self.norms).any(|r| r.len() != t) || self.symbols.len() != t {
            return Err(Error::Dimension("trace rows differ in length".into()));
        }
        Ok(())
    }
}

fn display_char(c: char) -> char {
    match c {
        '\n' => '¶',
        '\t' => '→',
        c if c.is_control() => '·',
        c => c,
    }
}

/// Boundary rows (highest layer on top, `#` for a fired boundary) stacked over
/// the input characters, wrapped into panels of `width` columns.
pub fn render_trace(trace: &BoundaryTrace, width: usize) -> String {
    let t = trace.len();
    let width = width.max(1);
    let text: Vec<char> = if trace.text.len() == t {
        trace.text.iter().map(|&c| display_char(c)).collect()
    } else {
        vec!['?'; t]
    };
    let mut out = String::new();
    let mut start = 0;
    loop {
        let end = (start + width).min(t);
        if start > 0 {
            out.push('\n');
        }
        for row in trace.boundaries.iter().rev() {
            out.extend(row[start..end].iter().map(|&z| if z > 0.5 { '#' } else { '.' }));
            out.push('\n');
        }
        out.extend(&text[start..end]);
        out.push('\n');
        start = end;
        if start >= t {
            return out;
        }
    }
}

/// Recovers the boundary bits from [`render_trace`] output, bottom layer first.
pub fn parse_rendered(block: &str, boundary_layers: usize) -> Result<Vec<Vec<bool>>> {
    let lines: Vec<&str> = block.lines().collect();
    let mut rows = vec![Vec::new(); boundary_layers];
    let mut i = 0;
    while i < lines.len() {
        if lines[i].is_empty() {
            i += 1;
            continue;
        }
        if i + boundary_layers >= lines.len() {
            return Err(Error::Format(format!("truncated panel at line {}", i + 1)));
        }
        for (k, row) in rows.iter_mut().rev().enumerate() {
            for c in lines[i + k].chars() {
                match c {
                    '#' => row.push(true),
                    '.' => row.push(false),
                    other => return Err(Error::Format(format!("unexpected {other:?} in boundary row at line {}", i + k + 1))),
                }
            }
        }
        i += boundary_layers + 1;
    }
    Ok(rows)
}

/// `L x T` matrix of hidden-state norms.
pub fn norm_heatmap(trace: &BoundaryTrace) -> Vec<Vec<f64>> {
    trace.norms.clone()
}

/// Comma-separated heatmap: a header of step indices, then one row per layer.
pub fn heatmap_table(trace: &BoundaryTrace) -> String {
    let mut out = String::from("layer");
    for t in 1..=trace.len() {
        out.push_str(&format!(",{t}"));
    }
    out.push('\n');
    for (l, row) in trace.norms.iter().enumerate() {
        out.push_str(&(l + 1).to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
