//! Uniform time grids.
//!
//! Everything downstream (moments, discrete convolution, Riccati stepping,
//! path simulation) assumes a uniform grid 0 = t_0 < t_1 < ... < t_n = T with
//! t_i = i·Δt, which is what makes convolutions Toeplitz.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::invalid(format!(
                "grid horizon must be finite and positive, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(TimeGrid { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of nodes including both endpoints: n_steps + 1.
    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Node t_i = i·Δt. Computed as i·Δt (not cumulative summation) so the
    /// value is bit-reproducible regardless of evaluation order.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.n_steps);
        i as f64 * self.dt()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        TimeGrid::new(self.t_end, self.n_steps * factor.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_uniform() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        assert_eq!(g.n_nodes(), 9);
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(8), 2.0);
        assert_eq!(g.node(3), 0.75);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(-1.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }
}
