use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_k = k * dt`, `k = 0..=steps`, on `[0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::Input(format!("t_end must be positive and finite, got {t_end}")));
        }
        if steps == 0 {
            return Err(Error::Input("time grid needs at least one step".into()));
        }
        Ok(Self { t_end, steps })
    }

    /// The default propagation window `[0, 2π]` with 4096 steps.
    pub fn standard() -> Self {
        Self { t_end: std::f64::consts::TAU, steps: 4096 }
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    /// Number of nodes (`steps + 1`).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }
}

/// Checks that `t` is uniformly spaced and returns the spacing.
pub fn uniform_spacing(t: &[f64]) -> Result<f64> {
    if t.len() < 2 {
        return Err(Error::Input(format!("grid needs at least 2 nodes, got {}", t.len())));
    }
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Input("grid must be strictly increasing".into()));
    }
    for (k, w) in t.windows(2).enumerate() {
        let step = w[1] - w[0];
        if (step - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::Input(format!(
                "grid is not uniform: step {k} has width {step}, expected {dt}"
            )));
        }
    }
    Ok(dt)
}
