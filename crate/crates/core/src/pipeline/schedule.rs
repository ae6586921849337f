use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALPHA_BAR_CLEAN: f64 = 0.999;
pub const ALPHA_BAR_NOISY: f64 = 0.01;

/// Cumulative signal coefficients `ᾱ_0 … ᾱ_T`, linear in `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSchedule {
    alpha_bar: Vec<f64>,
}

impl SamplerSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Configuration(
                "a schedule needs at least one step".into(),
            ));
        }
        let alpha_bar = (0..=steps)
            .map(|t| match t {
                0 => ALPHA_BAR_CLEAN,
                t if t == steps => ALPHA_BAR_NOISY,
                t => {
                    ALPHA_BAR_CLEAN + (ALPHA_BAR_NOISY - ALPHA_BAR_CLEAN) * t as f64 / steps as f64
                }
            })
            .collect();
        Ok(SamplerSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Deterministic step from `t` to `t − 1`.
    pub fn ddim_step(&self, z: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        if t == 0 || t > self.steps() {
            return Err(Error::Argument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        ddim_step_with(z, eps, self.alpha_bar[t], self.alpha_bar[t - 1])
    }
}

/// `x̂₀ = (z − √(1−ᾱ_t)·ε)/√ᾱ_t`, then `√ᾱ_prev·x̂₀ + √(1−ᾱ_prev)·ε`.
pub fn ddim_step_with(z: &Tensor, eps: &Tensor, alpha_t: f64, alpha_prev: f64) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise prediction {:?} for latent {:?}",
            eps.shape(),
            z.shape()
        )));
    }
    let (sa, sn) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let (pa, pn) = (alpha_prev.sqrt(), (1.0 - alpha_prev).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zv, &ev)| {
            let x0 = (zv - sn * ev) / sa;
            pa * x0 + pn * ev
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = SamplerSchedule::new(25).unwrap();
        assert_eq!(s.alpha_bar(0), 0.999);
        assert_eq!(s.alpha_bar(25), 0.01);
        for t in 1..=25 {
            assert!(s.alpha_bar(t - 1) > s.alpha_bar(t));
        }
    }

    #[test]
    fn equal_coefficients_leave_latent_alone() {
        let z = Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap();
        let e = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ddim_step_with(&z, &e, 0.5, 0.5).unwrap(), z);
    }
}
