//! Scalar loss kernels, the weighted composite and the alternating
//! discriminator/generator schedule.
//!
//! Expectations are arithmetic means over the given score or feature
//! arrays. The kernels work on plain slices so they can serve as reference
//! values for the differentiable versions in the training code.

use crate::error::{Error, Result};
use crate::events::EventHistogram;
use crate::field::{spatial_gradient, ScalarField};
use serde::{Deserialize, Serialize};

/// Event-density margin of the gradient-coverage loss.
pub const COVERAGE_MARGIN: f64 = 0.7;
/// Only pixels whose normalized gradient magnitude exceeds this take part.
pub const COVERAGE_GRAD_THRESHOLD: f64 = 0.7;
/// Weight of the augmentation term in the generator objective.
pub const AUGM_WEIGHT: f64 = 2.0;

fn nonempty(name: &str, a: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Usage(format!("{name}: empty score array")));
    }
    Ok(())
}

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

fn l1_mean(name: &str, a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "{name}: {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    nonempty(name, a)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `mean(max(0, 1 - s_pos)) + mean(max(0, 1 + s_neg))`.
pub fn hinge_disc_loss(scores_pos_class: &[f64], scores_neg_class: &[f64]) -> Result<f64> {
    nonempty("hinge_disc_loss (positive class)", scores_pos_class)?;
    nonempty("hinge_disc_loss (negative class)", scores_neg_class)?;
    let pos = scores_pos_class
        .iter()
        .map(|s| (1.0 - s).max(0.0))
        .sum::<f64>()
        / scores_pos_class.len() as f64;
    let neg = scores_neg_class
        .iter()
        .map(|s| (1.0 + s).max(0.0))
        .sum::<f64>()
        / scores_neg_class.len() as f64;
    Ok(pos + neg)
}

/// Latent alignment objective of the encoders: `mean(F(z_img)) - mean(F(z_event))`.
pub fn hinge_gen_loss_latent(scores_img: &[f64], scores_event: &[f64]) -> Result<f64> {
    nonempty("hinge_gen_loss_latent (image)", scores_img)?;
    nonempty("hinge_gen_loss_latent (event)", scores_event)?;
    Ok(mean(scores_img) - mean(scores_event))
}

/// Generator objective on translated events: `mean(F(ŷ))`, or its negation
/// with `standard_sign`.
pub fn hinge_gen_loss_recons(scores_fake: &[f64], standard_sign: bool) -> Result<f64> {
    nonempty("hinge_gen_loss_recons", scores_fake)?;
    let m = mean(scores_fake);
    Ok(if standard_sign { -m } else { m })
}

/// Discriminator objective on events. As written, translated events take
/// the positive margin and real events the negative one; `standard_sign`
/// swaps the roles.
pub fn hinge_disc_loss_recons(
    scores_fake: &[f64],
    scores_real: &[f64],
    standard_sign: bool,
) -> Result<f64> {
    if standard_sign {
        hinge_disc_loss(scores_real, scores_fake)
    } else {
        hinge_disc_loss(scores_fake, scores_real)
    }
}

/// `mean|z - z_rec| + mean|ζ - ζ_rec|`.
pub fn l1_cycle_loss(
    z_img: &[f64],
    z_img_rec: &[f64],
    zeta: &[f64],
    zeta_rec: &[f64],
) -> Result<f64> {
    Ok(l1_mean("cycle (shared)", z_img, z_img_rec)?
        + l1_mean("cycle (event-specific)", zeta, zeta_rec)?)
}

pub fn augmentation_loss(zeta_aug: &[f64], zeta_rec: &[f64]) -> Result<f64> {
    l1_mean("augmentation", zeta_aug, zeta_rec)
}

/// `Σ max(0, 0.7 - n) · g` over pixels with `g > 0.7`.
pub fn gradient_coverage_loss(n_norm: &ScalarField, grad_mag: &ScalarField) -> Result<f64> {
    if n_norm.shape() != grad_mag.shape() {
        return Err(Error::Dimension(
            "gradient_coverage_loss: field shapes differ".into(),
        ));
    }
    if let Some(bad) = n_norm.data().iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Validation(format!(
            "normalized event count {bad} outside [0, 1]"
        )));
    }
    if let Some(bad) = grad_mag.data().iter().find(|a| **a < 0.0) {
        return Err(Error::Validation(format!(
            "gradient magnitude {bad} is negative"
        )));
    }
    Ok(n_norm
        .data()
        .iter()
        .zip(grad_mag.data())
        .filter(|(_, &g)| g > COVERAGE_GRAD_THRESHOLD)
        .map(|(&n, &g)| (COVERAGE_MARGIN - n).max(0.0) * g)
        .sum())
}

/// Per-pixel event total divided by its frame maximum (0/0 -> 0).
pub fn normalized_event_density(h: &EventHistogram) -> ScalarField {
    h.total_per_pixel().normalize_by_max()
}

/// Gradient magnitude of the intensity image divided by its frame maximum.
pub fn normalized_gradient_magnitude(img: &ScalarField) -> Result<ScalarField> {
    Ok(spatial_gradient(img)?.magnitude().normalize_by_max())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_task_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Usage(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let (arg, m) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, l)| {
                if l > best.1 {
                    (i, l)
                } else {
                    best
                }
            });
    // the max term contributes exactly 1; ln_1p keeps the tail precise
    let tail: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, l)| (l - m).exp())
        .sum();
    Ok((m - logits[label]) + tail.ln_1p())
}

/// Unweighted loss terms of one training iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub lat_gen: f64,
    pub lat_disc: f64,
    pub recons_gen: f64,
    pub recons_disc: f64,
    pub cycle: f64,
    pub augm: f64,
    pub grad_coverage: f64,
    pub smooth: f64,
    pub task: f64,
}

impl LossParts {
    pub fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("lat_gen", self.lat_gen),
            ("lat_disc", self.lat_disc),
            ("recons_gen", self.recons_gen),
            ("recons_disc", self.recons_disc),
            ("cycle", self.cycle),
            ("augm", self.augm),
            ("grad_coverage", self.grad_coverage),
            ("smooth", self.smooth),
            ("task", self.task),
        ]
    }
}

/// Loss terms plus the two weighted objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub parts: LossParts,
    pub composite_gen: f64,
    pub composite_disc: f64,
}

impl LossReport {
    /// Recomputes both composites from the stored parts and compares.
    pub fn check_weighting(&self) -> Result<()> {
        let again = compose_losses(self.parts)?;
        if again.composite_gen != self.composite_gen || again.composite_disc != self.composite_disc
        {
            return Err(Error::Validation(format!(
                "composite mismatch: stored gen {} / disc {}, recomputed gen {} / disc {}",
                self.composite_gen, self.composite_disc, again.composite_gen, again.composite_disc
            )));
        }
        Ok(())
    }
}

pub fn compose_losses(parts: LossParts) -> Result<LossReport> {
    if let Some((name, v)) = parts.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "loss term {name} is not finite ({v})"
        )));
    }
    let p = &parts;
    let composite_gen = p.lat_gen
        + p.recons_gen
        + p.cycle
        + AUGM_WEIGHT * p.augm
        + p.grad_coverage
        + p.task
        + p.smooth;
    let composite_disc = p.lat_disc + p.recons_disc;
    Ok(LossReport {
        parts,
        composite_gen,
        composite_disc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Disc,
    Gen,
}

/// Counters of the two-discriminator-steps-per-generator-step schedule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScheduleState {
    pub disc_steps_taken: u64,
    pub gen_steps_taken: u64,
}

/// Discriminator steps per generator step.
pub const DISC_STEPS_PER_GEN: u64 = 2;

pub fn schedule_next(state: &mut ScheduleState) -> Step {
    if state.disc_steps_taken < DISC_STEPS_PER_GEN * (state.gen_steps_taken + 1) {
        state.disc_steps_taken += 1;
        Step::Disc
    } else {
        state.gen_steps_taken += 1;
        Step::Gen
    }
}

impl ScheduleState {
    pub fn invariant_holds(&self) -> bool {
        let d = self.disc_steps_taken as i128 - (DISC_STEPS_PER_GEN * self.gen_steps_taken) as i128;
        (0..=2).contains(&d)
    }
}
