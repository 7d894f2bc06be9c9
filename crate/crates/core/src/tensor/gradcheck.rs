//! Central-difference gradient checker.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Number of coordinates to probe; all coordinates when it exceeds the count.
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-5, probes: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probed: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport { max_relative_error: 0.0, probed: 0, worst_index: 0, worst_analytic: 0.0, worst_numeric: 0.0 }
    }

    /// Combine two reports, keeping the worst coordinate.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let probed = self.probed + other.probed;
        let worst = if other.max_relative_error > self.max_relative_error { other } else { self };
        GradCheckReport { probed, ..worst }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

impl GradCheck {
    /// Compare `analytic` against central differences of `loss` around `values`.
    pub fn run<F>(&self, values: &[f64], analytic: &[f64], mut loss: F) -> Result<GradCheckReport>
    where
        F: FnMut(&[f64]) -> Result<f64>,
    {
        if values.len() != analytic.len() {
            return Err(Error::shape("grad_check", values.len(), analytic.len()));
        }
        let n = values.len();
        let coords: Vec<usize> = if self.probes >= n {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut v = index::sample(&mut rng, n, self.probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = GradCheckReport::empty();
        let mut work = values.to_vec();
        for &i in &coords {
            let orig = work[i];
            work[i] = orig + self.eps;
            let up = loss(&work)?;
            work[i] = orig - self.eps;
            let down = loss(&work)?;
            work[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let numeric = (up - down) / (2.0 * self.eps);
            let err = relative_error(analytic[i], numeric);
            report.probed += 1;
            if err > report.max_relative_error || report.probed == 1 {
                report.max_relative_error = err;
                report.worst_index = i;
                report.worst_analytic = analytic[i];
                report.worst_numeric = numeric;
            }
        }
        Ok(report)
    }
}

/// Max relative error of `analytic` against central differences of `loss`.
pub fn grad_check<F>(loss: F, values: &[f64], analytic: &[f64], probe_count: usize, eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let gc = GradCheck { eps, probes: probe_count, seed: 0 };
    Ok(gc.run(values, analytic, loss)?.max_relative_error)
}
