use crate::autodiff::max_relative_error_scaled;
use crate::error::Result;
use crate::guidance::GuidanceObjective;
use crate::reinit::initial_noise;
use crate::rng;
use crate::tensor::Tensor;

use super::Pipeline;

pub const FD_EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub timestep: usize,
    pub loss: f64,
    /// Coordinates compared.
    pub checked: usize,
    pub total: usize,
    pub max_relative_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Compares the analytic gradient of the total constraint loss with central
/// differences at the seeded initial latent and `t = T`.
///
/// With `limit = Some(k)` only `k` seeded coordinates are differenced.
pub fn gradcheck(pipeline: &Pipeline, seed: u64, limit: Option<usize>) -> Result<GradcheckReport> {
    let t = pipeline.schedule.steps();
    let z = initial_noise(seed, pipeline.latent_shape());
    let eval = pipeline.evaluate(&z, t)?;
    let n = z.numel();
    let coords: Vec<usize> = match limit {
        Some(k) if k < n => {
            let mut r = rng::stream(seed, "gradcheck/coords");
            rand::seq::index::sample(&mut r, n, k).into_vec()
        }
        _ => (0..n).collect(),
    };
    let mut numeric = Vec::with_capacity(coords.len());
    let mut probe = z.clone();
    for &i in &coords {
        let x = z.data()[i];
        probe.data_mut()[i] = x + FD_EPS;
        let up = pipeline.loss(&probe, t)?;
        probe.data_mut()[i] = x - FD_EPS;
        let down = pipeline.loss(&probe, t)?;
        probe.data_mut()[i] = x;
        numeric.push((up - down) / (2.0 * FD_EPS));
    }
    let analytic: Vec<f64> = coords.iter().map(|&i| eval.grad.data()[i]).collect();
    let numeric = Tensor::vector(numeric)?;
    // A subset is judged against the floor the full comparison would use.
    let scale = numeric.max_abs().max(eval.grad.max_abs());
    let err = max_relative_error_scaled(&Tensor::vector(analytic)?, &numeric, scale);
    Ok(GradcheckReport {
        timestep: t,
        loss: eval.breakdown.total,
        checked: coords.len(),
        total: n,
        max_relative_error: err,
    })
}
