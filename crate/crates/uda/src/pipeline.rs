//! Loss graphs of one generator step and one discriminator step.
//!
//! All randomness of a step (batch choice, noise maps, augmentation
//! directions) is drawn up front into a [`StepInputs`], so a step is a
//! deterministic function of the parameters. The gradient checks rely on
//! that.

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::nets::{
    decode, disc_event, disc_latent, encode_attr, encode_event, encode_image, initial_guess,
    refine, task_head, Bind,
};
use evbridge_autodiff::{Graph, Tensor, Var};
use evbridge_core::flow::{neighbor_pair_count, CHARBONNIER_ALPHA, CHARBONNIER_EPS};
use evbridge_core::losses::{LossParts, COVERAGE_GRAD_THRESHOLD, COVERAGE_MARGIN};
use evbridge_core::{log_transform, spatial_gradient, EventHistogram, ScalarField, VectorField};

/// Per-image constants derived once from a training image.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image: ScalarField,
    /// Log-intensity gradient, `u` then `v`, row-major.
    pub log_grad: VectorField,
    /// Normalized intensity-gradient magnitude where it exceeds the
    /// coverage threshold, zero elsewhere.
    pub coverage_mask: ScalarField,
}

impl PreparedImage {
    pub fn new(image: &ScalarField, log_eps: f64) -> Result<Self> {
        let log_grad = spatial_gradient(&log_transform(image, log_eps)?)?;
        let g = evbridge_core::losses::normalized_gradient_magnitude(image)?;
        let coverage_mask = g.map(|v| if v > COVERAGE_GRAD_THRESHOLD { v } else { 0.0 })?;
        Ok(Self {
            image: image.clone(),
            log_grad,
            coverage_mask,
        })
    }
}

/// Everything a step consumes, as dense `[B, C, S, S]` tensors.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub images: Tensor,
    pub log_grads: Tensor,
    pub coverage_mask: Tensor,
    pub labels: Vec<usize>,
    /// Real event counts (unscaled).
    pub events: Tensor,
    pub noise: Tensor,
    /// Unit directions of the augmentation field; zero where undefined.
    pub aug_dirs: Tensor,
    /// Content features the augmentation branch holds fixed. `None` uses
    /// the detached image features of the same step; finite-difference
    /// checks pin them to their base-point value, since a stop-gradient
    /// is invisible to a perturbed forward pass.
    pub fixed_content: Option<Tensor>,
}

fn planes(fields: &[&ScalarField]) -> Vec<f64> {
    fields
        .iter()
        .flat_map(|f| f.data().iter().copied())
        .collect()
}

impl StepInputs {
    pub fn assemble(
        images: &[&PreparedImage],
        labels: Vec<usize>,
        events: &[&EventHistogram],
        noise: Tensor,
        aug_dirs: &[VectorField],
    ) -> Result<Self> {
        let b = images.len();
        let s = images.first().map_or(0, |p| p.image.width());
        let img: Vec<f64> = images
            .iter()
            .flat_map(|p| p.image.data().iter().copied())
            .collect();
        let mut grad = Vec::with_capacity(2 * b * s * s);
        let mut mask = Vec::with_capacity(b * s * s);
        for p in images {
            grad.extend_from_slice(p.log_grad.u());
            grad.extend_from_slice(p.log_grad.v());
            mask.extend_from_slice(p.coverage_mask.data());
        }
        let mut ev = Vec::with_capacity(2 * b * s * s);
        for h in events {
            ev.extend(planes(&[&h.pos_field(), &h.neg_field()]));
        }
        let mut dirs = Vec::with_capacity(2 * b * s * s);
        for d in aug_dirs {
            let n = d.u().len();
            let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let m = d.u()[i].hypot(d.v()[i]);
                if m > 0.0 {
                    u[i] = d.u()[i] / m;
                    v[i] = d.v()[i] / m;
                }
            }
            dirs.extend(u);
            dirs.extend(v);
        }
        Ok(Self {
            images: Tensor::new(&[b, 1, s, s], img)?,
            log_grads: Tensor::new(&[b, 2, s, s], grad)?,
            coverage_mask: Tensor::new(&[b, 1, s, s], mask)?,
            labels,
            events: Tensor::new(&[events.len(), 2, s, s], ev)?,
            noise,
            aug_dirs: Tensor::new(&[aug_dirs.len(), 2, s, s], dirs)?,
            fixed_content: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }
}

/// Image-to-event translation of one batch.
#[derive(Debug, Clone, Copy)]
pub struct Translation {
    pub z_img: Var,
    pub zeta: Option<Var>,
    /// Pseudo-flow, absent when the flow module is disabled.
    pub flow: Option<Var>,
    pub init: Var,
    pub fake: Var,
}

/// `ŷ = R(D(z_img, ζ))` with the initial guess built from the image's
/// log gradients (or, without the flow module, read straight from the
/// decoder).
pub fn translate(
    g: &Graph,
    gen: Bind,
    cfg: &PipelineConfig,
    z_img: Var,
    zeta: Option<Var>,
    inputs: &StepInputs,
    images: Var,
) -> Result<Translation> {
    let out = decode(g, gen, cfg, z_img, zeta)?;
    let (flow, init) = if cfg.flow_module_enabled {
        let grads = g.constant(inputs.log_grads.clone());
        (Some(out), initial_guess(g, out, grads)?)
    } else {
        (None, g.relu(out))
    };
    let noise = g.constant(inputs.noise.clone());
    let fake = refine(g, gen, cfg, init, images, noise)?;
    Ok(Translation {
        z_img,
        zeta,
        flow,
        init,
        fake,
    })
}

/// Keeps the per-pixel magnitude of `flow` and takes the constant unit
/// directions of `dirs`; differentiable in `flow`.
pub fn augment_flow_graph(g: &Graph, flow: Var, dirs: &Tensor) -> Result<Var> {
    let sq = g.mul(flow, flow)?;
    let mag = g.sqrt(g.add(g.slice_channels(sq, 0, 1)?, g.slice_channels(sq, 1, 1)?)?)?;
    let mag2 = g.concat_channels(&[mag, mag])?;
    Ok(g.mul(mag2, g.constant(dirs.clone()))?)
}

fn l1_mean(g: &Graph, a: Var, b: Var) -> Result<Var> {
    Ok(g.mean(g.abs(g.sub(a, b)?)))
}

/// `mean(relu(1 - pos)) + mean(relu(1 + neg))`.
pub fn hinge_disc(g: &Graph, pos: Var, neg: Var) -> Result<Var> {
    let p = g.mean(g.relu(g.add_scalar(g.neg(pos), 1.0)));
    let n = g.mean(g.relu(g.add_scalar(neg, 1.0)));
    Ok(g.add(p, n)?)
}

/// Batch mean of `Σ max(0, 0.7 - n) · m` with `n` the per-frame
/// max-normalized event total and `m` the thresholded gradient magnitude.
pub fn coverage_graph(g: &Graph, hist: Var, mask: &Tensor) -> Result<Var> {
    let n = g.add(g.slice_channels(hist, 0, 1)?, g.slice_channels(hist, 1, 1)?)?;
    let peak = g.max_with_scalar(g.max_per_item(n)?, 1e-9);
    let n_norm = g.scale_per_item(n, g.recip(peak)?)?;
    let deficit = g.relu(g.add_scalar(g.neg(n_norm), COVERAGE_MARGIN));
    let b = mask.shape()[0];
    Ok(g.scale(
        g.sum(g.mul(deficit, g.constant(mask.clone()))?),
        1.0 / b as f64,
    ))
}

/// Charbonnier smoothness per ordered neighbour pair and batch item.
pub fn smoothness_graph(g: &Graph, flow: Var) -> Result<Var> {
    let s = g.shape(flow);
    let pairs = (s[0] * neighbor_pair_count(s[3], s[2])) as f64;
    Ok(g.scale(
        g.charbonnier_smoothness(flow, CHARBONNIER_ALPHA, CHARBONNIER_EPS)?,
        1.0 / pairs,
    ))
}

/// Handles of every term of a generator step. Disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct GenTerms {
    pub lat_gen: Option<Var>,
    pub recons_gen: Option<Var>,
    pub cycle: Option<Var>,
    pub augm: Option<Var>,
    pub grad_coverage: Option<Var>,
    pub smooth: Option<Var>,
    pub task: Var,
    pub total: Var,
    pub translation: Option<Translation>,
    /// Detached copy of `z_img` used as the fixed content of the
    /// augmentation branch.
    pub z_ref: Option<Var>,
}

impl GenTerms {
    pub fn parts(&self, g: &Graph) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.item(x));
        LossParts {
            lat_gen: v(self.lat_gen),
            recons_gen: v(self.recons_gen),
            cycle: v(self.cycle),
            augm: v(self.augm),
            grad_coverage: v(self.grad_coverage),
            smooth: v(self.smooth),
            task: g.item(self.task),
            ..LossParts::default()
        }
    }
}

/// Builds the generator objective. `disc` is normally bound frozen.
pub fn generator_step(
    g: &Graph,
    cfg: &PipelineConfig,
    gen: Bind,
    disc: Bind,
    inputs: &StepInputs,
) -> Result<GenTerms> {
    let images = g.constant(inputs.images.clone());
    let z_img = encode_image(g, gen, images)?;
    let task_img = g.softmax_cross_entropy(task_head(g, gen, cfg, z_img)?, &inputs.labels)?;
    if cfg.source_only {
        return Ok(GenTerms {
            lat_gen: None,
            recons_gen: None,
            cycle: None,
            augm: None,
            grad_coverage: None,
            smooth: None,
            task: task_img,
            total: task_img,
            translation: None,
            z_ref: None,
        });
    }

    let real = g.constant(inputs.events.clone());
    let real_in = g.scale(real, cfg.event_input_scale);
    let z_evt = encode_event(g, gen, real_in)?;
    let zeta = if cfg.split_enabled {
        Some(encode_attr(g, gen, real_in)?)
    } else {
        None
    };
    let lat_gen = g.sub(
        g.mean(disc_latent(g, disc, z_img)?),
        g.mean(disc_latent(g, disc, z_evt)?),
    )?;

    let tr = translate(g, gen, cfg, z_img, zeta, inputs, images)?;
    let fake_in = g.scale(tr.fake, cfg.event_input_scale);
    let fake_score = g.mean(disc_event(g, disc, fake_in)?);
    let recons_gen = if cfg.standard_sign {
        g.neg(fake_score)
    } else {
        fake_score
    };

    let z_rec = encode_event(g, gen, fake_in)?;
    let target = |v: Var| {
        if cfg.cycle_detach_target {
            g.detach(v)
        } else {
            v
        }
    };
    let mut cycle = l1_mean(g, target(z_img), z_rec)?;
    if let Some(zeta) = zeta {
        let zeta_rec = encode_attr(g, gen, fake_in)?;
        cycle = g.add(cycle, l1_mean(g, target(zeta), zeta_rec)?)?;
    }
    let task_evt = g.softmax_cross_entropy(task_head(g, gen, cfg, z_rec)?, &inputs.labels)?;
    let task = g.add(task_img, task_evt)?;
    let grad_coverage = coverage_graph(g, tr.fake, &inputs.coverage_mask)?;
    let smooth = tr.flow.map(|f| smoothness_graph(g, f)).transpose()?;

    let (augm, z_ref) = if cfg.augmentation_active() {
        let flow = tr.flow.expect("augmentation requires the flow module");
        let grads = g.constant(inputs.log_grads.clone());
        let noise = g.constant(inputs.noise.clone());
        let aug_flow = augment_flow_graph(g, flow, &inputs.aug_dirs)?;
        let y_aug = refine(
            g,
            gen,
            cfg,
            initial_guess(g, aug_flow, grads)?,
            images,
            noise,
        )?;
        let zeta_aug = encode_attr(g, gen, g.scale(y_aug, cfg.event_input_scale))?;
        // content is fixed: only the motion features can explain the change
        let z_ref = match &inputs.fixed_content {
            Some(t) => g.constant(t.clone()),
            None => g.detach(z_img),
        };
        let flow_rec = decode(g, gen, cfg, z_ref, Some(zeta_aug))?;
        let y_rec = refine(
            g,
            gen,
            cfg,
            initial_guess(g, flow_rec, grads)?,
            images,
            noise,
        )?;
        let zeta_rec = encode_attr(g, gen, g.scale(y_rec, cfg.event_input_scale))?;
        (Some(l1_mean(g, zeta_aug, zeta_rec)?), Some(z_ref))
    } else {
        (None, None)
    };

    let mut total = g.add(g.add(lat_gen, recons_gen)?, g.add(cycle, task)?)?;
    total = g.add(total, grad_coverage)?;
    if let Some(a) = augm {
        total = g.add(total, g.scale(a, evbridge_core::losses::AUGM_WEIGHT))?;
    }
    if let Some(s) = smooth {
        total = g.add(total, s)?;
    }
    Ok(GenTerms {
        lat_gen: Some(lat_gen),
        recons_gen: Some(recons_gen),
        cycle: Some(cycle),
        augm,
        grad_coverage: Some(grad_coverage),
        smooth,
        task,
        total,
        translation: Some(tr),
        z_ref,
    })
}

/// Handles of a discriminator step.
#[derive(Debug, Clone, Copy)]
pub struct DiscTerms {
    pub lat_disc: Var,
    pub recons_disc: Var,
    pub total: Var,
}

/// Builds the discriminator objective on generator outputs computed with
/// `gen` bound frozen.
pub fn discriminator_step(
    g: &Graph,
    cfg: &PipelineConfig,
    gen: Bind,
    disc: Bind,
    inputs: &StepInputs,
) -> Result<DiscTerms> {
    let images = g.constant(inputs.images.clone());
    let real_in = g.scale(g.constant(inputs.events.clone()), cfg.event_input_scale);
    let z_img = encode_image(g, gen, images)?;
    let z_evt = encode_event(g, gen, real_in)?;
    let zeta = if cfg.split_enabled {
        Some(encode_attr(g, gen, real_in)?)
    } else {
        None
    };
    let tr = translate(g, gen, cfg, z_img, zeta, inputs, images)?;
    let fake_in = g.scale(tr.fake, cfg.event_input_scale);

    let lat_disc = hinge_disc(
        g,
        disc_latent(g, disc, z_img)?,
        disc_latent(g, disc, z_evt)?,
    )?;
    let s_real = disc_event(g, disc, real_in)?;
    let s_fake = disc_event(g, disc, fake_in)?;
    let recons_disc = if cfg.standard_sign {
        hinge_disc(g, s_real, s_fake)?
    } else {
        hinge_disc(g, s_fake, s_real)?
    };
    let total = g.add(lat_disc, recons_disc)?;
    Ok(DiscTerms {
        lat_disc,
        recons_disc,
        total,
    })
}

/// Applies a trained refinement block to a model-based histogram of one
/// image, with noise maps drawn from `noise_seed`.
pub fn refine_histogram(
    cfg: &PipelineConfig,
    gen: &evbridge_autodiff::ParamStore,
    image: &ScalarField,
    init: &EventHistogram,
    noise_seed: u64,
) -> Result<EventHistogram> {
    use rand::{Rng, SeedableRng};
    let (w, h) = (image.width(), image.height());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
    let noise: Vec<f64> = (0..cfg.noise_channels * w * h)
        .map(|_| rng.sample(rand_distr::StandardNormal))
        .collect();
    let g = Graph::new();
    let img = g.constant(Tensor::new(&[1, 1, h, w], image.data().to_vec())?);
    let init_data: Vec<f64> = init.pos().iter().chain(init.neg()).copied().collect();
    let init = g.constant(Tensor::new(&[1, 2, h, w], init_data)?);
    let noise = g.constant(Tensor::new(&[1, cfg.noise_channels, h, w], noise)?);
    let out = g
        .tensor(refine(&g, Bind::frozen(gen), cfg, init, img, noise)?)
        .into_data();
    let (pos, neg) = out.split_at(w * h);
    Ok(EventHistogram::new(w, h, pos.to_vec(), neg.to_vec())?)
}
