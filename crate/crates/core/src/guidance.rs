//! Attention-map constraint losses and the gradient update they drive.
//!
//! Three terms are computed from the attention maps of the full-resolution
//! blocks and averaged over those blocks:
//!
//! * concept enhancement: `1 − mean(topk(A ⊙ M ⊙ G, S))` per concept,
//! * fill: `1 − mean` of the axis max-projections of `A` restricted to the
//!   rows/columns the box touches,
//! * region: `mean(topk(Ā[M, 1−M], P))` over the self-attention block from
//!   a concept's pixels to everything outside it.
//!
//! Their weighted sum `L = L_ce + α·L_fill + β·L_region` moves the latent by
//! `z ← z − φ_t ∇L`, with `φ_t` decaying linearly to zero over the schedule.

use serde::{Deserialize, Serialize};

use crate::attention::{
    gaussian_weight, mask_bits, AttnRecord, Conditioning, LayerMaps, TapedLayer,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Fraction of a concept's mask used as the top-k size of the enhancement term.
    pub s_ratio: f64,
    /// Fraction of the foreground-to-background block used by the region term.
    pub p_ratio: f64,
    pub phi0: f64,
    /// Leading fraction of timesteps that receive updates; 0 disables guidance.
    pub guidance_fraction: f64,
    pub max_iters: usize,
    pub patience: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            alpha: 0.25,
            beta: 0.8,
            s_ratio: 0.2,
            p_ratio: 0.2,
            phi0: 10.0,
            guidance_fraction: 0.7,
            max_iters: 5,
            patience: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Configuration(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        let fraction = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Configuration(format!(
                    "{name} must lie in (0, 1], got {v}"
                )))
            }
        };
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("phi0", self.phi0)?;
        fraction("s_ratio", self.s_ratio)?;
        fraction("p_ratio", self.p_ratio)?;
        if !(0.0..=1.0).contains(&self.guidance_fraction) {
            return Err(Error::Configuration(format!(
                "guidance_fraction must lie in [0, 1], got {}",
                self.guidance_fraction
            )));
        }
        if self.patience == 0 {
            return Err(Error::Configuration("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// `ceil(ratio · n)` clamped to `1..=n`, tolerant of float noise in the product.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Loss terms of one concept, averaged over the contributing layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptTerms {
    pub concept_id: String,
    pub ce: f64,
    pub fill: f64,
    pub region: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_fill: f64,
    pub l_region: f64,
    pub total: f64,
    pub per_concept: Vec<ConceptTerms>,
}

/// Combines component losses with the configured weights.
pub fn total_loss(l_ce: f64, l_fill: f64, l_region: f64, config: &GuidanceConfig) -> LossBreakdown {
    LossBreakdown {
        l_ce,
        l_fill,
        l_region,
        total: l_ce + config.alpha * l_fill + config.beta * l_region,
        per_concept: Vec::new(),
    }
}

/// Linearly decaying step size `φ_t = φ0 · t / T`.
pub fn step_size(t: usize, steps: usize, phi0: f64) -> f64 {
    assert!(steps > 0 && t <= steps, "timestep {t} outside 0..={steps}");
    phi0 * (t as f64 / steps as f64)
}

/// Whether timestep `t` (counting down from `steps`) receives guidance.
pub fn in_guidance_window(t: usize, steps: usize, guidance_fraction: f64) -> bool {
    guidance_fraction > 0.0 && t >= 1 && t as f64 / steps as f64 >= 1.0 - guidance_fraction - 1e-12
}

/// Masks and Gaussian weights of every concept at the loss resolution.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub resolution: (usize, usize),
    pub ids: Vec<String>,
    pub masks: Vec<Tensor>,
    pub gaussians: Vec<Tensor>,
}

impl LossTargets {
    pub fn new(cond: &Conditioning<'_>, h: usize, w: usize) -> Result<Self> {
        let masks = cond.masks(h, w)?;
        let gaussians = cond
            .concepts
            .iter()
            .map(|c| gaussian_weight(&c.layout_box, h, w))
            .collect::<Result<Vec<_>>>()?;
        Ok(LossTargets {
            resolution: (h, w),
            ids: cond.concepts.iter().map(|c| c.id.to_string()).collect(),
            masks,
            gaussians,
        })
    }

    fn from_masks(masks: &[Tensor], gaussians: Option<&[Tensor]>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Ok(LossTargets {
                resolution: (0, 0),
                ids: Vec::new(),
                masks: Vec::new(),
                gaussians: Vec::new(),
            });
        };
        let resolution = first.dims2()?;
        let gaussians = match gaussians {
            Some(g) => g.to_vec(),
            None => masks.to_vec(),
        };
        if gaussians.len() != masks.len() {
            return Err(Error::Argument(format!(
                "{} Gaussian maps for {} masks",
                gaussians.len(),
                masks.len()
            )));
        }
        Ok(LossTargets {
            resolution,
            ids: (0..masks.len()).map(|i| format!("concept{i}")).collect(),
            masks: masks.to_vec(),
            gaussians,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn mask_size(mask: &Tensor, concept: &str) -> Result<usize> {
    let n = mask.data().iter().filter(|&&v| v != 0.0).count();
    if n == 0 {
        return Err(Error::EmptyMask(format!("mask of {concept} is empty")));
    }
    Ok(n)
}

fn loss_layers<'a>(layers: &'a [TapedLayer], targets: &LossTargets) -> Result<Vec<&'a TapedLayer>> {
    let picked: Vec<_> = layers
        .iter()
        .filter(|l| l.resolution == targets.resolution)
        .collect();
    if picked.is_empty() && !targets.is_empty() {
        return Err(Error::Configuration(format!(
            "no attention layer at the loss resolution {:?}",
            targets.resolution
        )));
    }
    for l in &picked {
        if l.cross.len() != targets.len() {
            return Err(Error::Configuration(format!(
                "layer records {} concept maps, layout has {}",
                l.cross.len(),
                targets.len()
            )));
        }
    }
    Ok(picked)
}

fn enhancement_term(
    tape: &mut Tape,
    map: Var,
    mask: &Tensor,
    gaussian: &Tensor,
    s_ratio: f64,
    concept: &str,
) -> Result<Var> {
    let size = mask_size(mask, concept)?;
    let weight = tape.leaf(mask.hadamard(gaussian)?);
    let weighted = tape.mul(map, weight)?;
    let top = tape.topk_mean(weighted, ratio_count(s_ratio, size))?;
    let neg = tape.scale(top, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

fn fill_term(tape: &mut Tape, map: Var, mask: &Tensor, concept: &str) -> Result<Var> {
    mask_size(mask, concept)?;
    let (h, w) = mask.dims2()?;
    let cols: Vec<usize> = (0..w)
        .filter(|&j| (0..h).any(|i| mask.at2(i, j) != 0.0))
        .collect();
    let rows: Vec<usize> = (0..h)
        .filter(|&i| (0..w).any(|j| mask.at2(i, j) != 0.0))
        .collect();
    let k = cols.len() + rows.len();
    let over_rows = tape.axis_max(map, Axis::Rows)?;
    let over_cols = tape.axis_max(map, Axis::Cols)?;
    let a = tape.gather(over_rows, cols)?;
    let b = tape.gather(over_cols, rows)?;
    let both = tape.concat(&[a, b])?;
    let s = tape.sum(both)?;
    let neg = tape.scale(s, -1.0 / k as f64)?;
    tape.add_scalar(neg, 1.0)
}

fn region_term(
    tape: &mut Tape,
    self_map: Var,
    mask: &Tensor,
    p_ratio: f64,
    concept: &str,
) -> Result<Option<Var>> {
    mask_size(mask, concept)?;
    let bits = mask_bits(mask);
    let n = bits.len();
    if tape.value(self_map).shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "self-attention map {:?} for {n} pixels",
            tape.value(self_map).shape()
        )));
    }
    let fg: Vec<usize> = (0..n).filter(|&p| bits[p]).collect();
    let bg: Vec<usize> = (0..n).filter(|&p| !bits[p]).collect();
    if bg.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = fg
        .iter()
        .flat_map(|&q| bg.iter().map(move |&k| q * n + k))
        .collect();
    let k = ratio_count(p_ratio, idx.len());
    let block = tape.gather(self_map, idx)?;
    Ok(Some(tape.topk_mean(block, k)?))
}

/// The three constraint losses and their weighted sum, recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedLosses {
    pub ce: Var,
    pub fill: Var,
    pub region: Var,
    pub total: Var,
    per_concept: Vec<[Vec<Var>; 3]>,
    ids: Vec<String>,
}

impl TapedLosses {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).data()[0];
        let mean = |vars: &[Var]| {
            if vars.is_empty() {
                0.0
            } else {
                vars.iter().map(|&x| v(x)).sum::<f64>() / vars.len() as f64
            }
        };
        LossBreakdown {
            l_ce: v(self.ce),
            l_fill: v(self.fill),
            l_region: v(self.region),
            total: v(self.total),
            per_concept: self
                .ids
                .iter()
                .zip(&self.per_concept)
                .map(|(id, [ce, fill, region])| ConceptTerms {
                    concept_id: id.clone(),
                    ce: mean(ce),
                    fill: mean(fill),
                    region: mean(region),
                })
                .collect(),
        }
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var], scale: f64) -> Result<Var> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, scale)
}

/// Builds all constraint losses over the layers at the loss resolution.
pub fn constraint_losses(
    tape: &mut Tape,
    layers: &[TapedLayer],
    targets: &LossTargets,
    config: &GuidanceConfig,
) -> Result<TapedLosses> {
    let picked = loss_layers(layers, targets)?;
    let inv_layers = if picked.is_empty() {
        0.0
    } else {
        1.0 / picked.len() as f64
    };
    let mut per_concept: Vec<[Vec<Var>; 3]> = vec![Default::default(); targets.len()];
    let (mut ce, mut fill, mut region) = (Vec::new(), Vec::new(), Vec::new());
    for layer in &picked {
        for (n, (id, map)) in layer.cross.iter().enumerate() {
            let mask = &targets.masks[n];
            let c = enhancement_term(tape, *map, mask, &targets.gaussians[n], config.s_ratio, id)?;
            let f = fill_term(tape, *map, mask, id)?;
            ce.push(c);
            fill.push(f);
            per_concept[n][0].push(c);
            per_concept[n][1].push(f);
            if let Some(r) = region_term(tape, layer.self_map, mask, config.p_ratio, id)? {
                region.push(r);
                per_concept[n][2].push(r);
            }
        }
    }
    let ce = sum_vars(tape, &ce, inv_layers)?;
    let fill = sum_vars(tape, &fill, inv_layers)?;
    let region = sum_vars(tape, &region, inv_layers)?;
    let a = tape.scale(fill, config.alpha)?;
    let b = tape.scale(region, config.beta)?;
    let total = tape.add(ce, a)?;
    let total = tape.add(total, b)?;
    Ok(TapedLosses {
        ce,
        fill,
        region,
        total,
        per_concept,
        ids: targets.ids.clone(),
    })
}

/// Loads the layers of `record` at the mask resolution onto a fresh tape.
fn taped_record(tape: &mut Tape, record: &AttnRecord, targets: &LossTargets) -> Vec<TapedLayer> {
    record
        .at_resolution(targets.resolution.0, targets.resolution.1)
        .map(|l| LayerMaps {
            resolution: l.resolution,
            cross: l
                .cross
                .iter()
                .map(|(id, m)| (id.clone(), tape.leaf(m.clone())))
                .collect(),
            self_map: tape.leaf(l.self_map.clone()),
        })
        .collect()
}

fn evaluate_record(
    record: &AttnRecord,
    masks: &[Tensor],
    gaussians: Option<&[Tensor]>,
    config: &GuidanceConfig,
) -> Result<LossBreakdown> {
    let targets = LossTargets::from_masks(masks, gaussians)?;
    let mut tape = Tape::new();
    let layers = taped_record(&mut tape, record, &targets);
    let losses = constraint_losses(&mut tape, &layers, &targets, config)?;
    Ok(losses.breakdown(&tape))
}

/// Concept enhancement loss of a recorded forward pass.
pub fn concept_enhancement_loss(
    record: &AttnRecord,
    masks: &[Tensor],
    gaussians: &[Tensor],
    s_ratio: f64,
) -> Result<f64> {
    let config = GuidanceConfig {
        s_ratio,
        ..GuidanceConfig::default()
    };
    Ok(evaluate_record(record, masks, Some(gaussians), &config)?.l_ce)
}

/// Box-fill loss of a recorded forward pass.
pub fn fill_loss(record: &AttnRecord, masks: &[Tensor]) -> Result<f64> {
    Ok(evaluate_record(record, masks, None, &GuidanceConfig::default())?.l_fill)
}

/// Foreground-to-background self-attention leakage of a recorded forward pass.
pub fn region_loss(record: &AttnRecord, masks: &[Tensor], p_ratio: f64) -> Result<f64> {
    let config = GuidanceConfig {
        p_ratio,
        ..GuidanceConfig::default()
    };
    Ok(evaluate_record(record, masks, None, &config)?.l_region)
}

/// Decision taken after observing one loss value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// The loss improved on the best seen so far.
    pub accepted: bool,
    /// `patience` consecutive observations failed to improve.
    pub stop: bool,
}

/// Stops once the loss has failed to decrease `patience` times in a row.
#[derive(Clone, Debug)]
pub struct AdaptiveStop {
    patience: usize,
    best: f64,
    stale: usize,
}

impl AdaptiveStop {
    pub fn new(patience: usize) -> Self {
        AdaptiveStop {
            patience: patience.max(1),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            StopDecision {
                accepted: true,
                stop: false,
            }
        } else {
            self.stale += 1;
            StopDecision {
                accepted: false,
                stop: self.stale >= self.patience,
            }
        }
    }
}

/// One row of the sampling trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub timestep: usize,
    pub iteration: usize,
    pub l_ce: f64,
    pub l_fill: f64,
    pub l_region: f64,
    pub total: f64,
    pub phi_t: f64,
    pub accepted: bool,
}

/// Loss, gradient and maps of the latent at one guidance iteration.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub grad: Tensor,
    pub record: AttnRecord,
}

/// Something that can score a latent and differentiate the score.
pub trait GuidanceObjective {
    fn evaluate(&self, z: &Tensor, t: usize) -> Result<Evaluation>;
}

impl<F> GuidanceObjective for F
where
    F: Fn(&Tensor, usize) -> Result<Evaluation>,
{
    fn evaluate(&self, z: &Tensor, t: usize) -> Result<Evaluation> {
        self(z, t)
    }
}

/// Result of guiding one timestep.
#[derive(Clone, Debug)]
pub struct GuidedUpdate {
    /// Best-loss latent seen.
    pub z: Tensor,
    pub rows: Vec<TraceRow>,
    /// Evaluation of the incoming latent.
    pub initial: Evaluation,
    /// Evaluation of the returned latent.
    pub best: Evaluation,
}

/// Iterates `z ← z − φ_t ∇L` up to `max_iters` times, stopping early when
/// the loss stops decreasing, and returns the best latent seen.
pub fn guided_update(
    z: &Tensor,
    t: usize,
    steps: usize,
    objective: &dyn GuidanceObjective,
    config: &GuidanceConfig,
) -> Result<GuidedUpdate> {
    let phi = step_size(t, steps, config.phi0);
    let mut current = z.clone();
    let mut stop = AdaptiveStop::new(config.patience);
    let mut rows = Vec::new();
    let mut initial: Option<Evaluation> = None;
    let mut best: Option<(Tensor, Evaluation)> = None;
    for iteration in 0..=config.max_iters {
        let eval = objective.evaluate(&current, t)?;
        let b = &eval.breakdown;
        if !b.total.is_finite() || !eval.grad.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite guidance at t={t}, iteration {iteration}: \
                 l_ce={}, l_fill={}, l_region={}, total={}, |grad|max={}",
                b.l_ce,
                b.l_fill,
                b.l_region,
                b.total,
                eval.grad.max_abs()
            )));
        }
        if eval.grad.shape() != current.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for latent {:?}",
                eval.grad.shape(),
                current.shape()
            )));
        }
        let decision = stop.observe(b.total);
        rows.push(TraceRow {
            timestep: t,
            iteration,
            l_ce: b.l_ce,
            l_fill: b.l_fill,
            l_region: b.l_region,
            total: b.total,
            phi_t: phi,
            accepted: decision.accepted,
        });
        let next = current.sub(&eval.grad.scale(phi))?;
        if initial.is_none() {
            initial = Some(eval.clone());
        }
        if decision.accepted {
            best = Some((current, eval));
        }
        if decision.stop || iteration == config.max_iters {
            break;
        }
        current = next;
    }
    let (z, best) = best.expect("first evaluation is always accepted");
    Ok(GuidedUpdate {
        z,
        rows,
        initial: initial.expect("at least one evaluation"),
        best,
    })
}
