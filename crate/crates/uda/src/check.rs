//! Central-difference checks of the complete generator and discriminator
//! objectives.

use crate::config::PipelineConfig;
use crate::data::make_dataset;
use crate::error::Result;
use crate::nets::{encode_image, Bind};
use crate::pipeline::{discriminator_step, generator_step};
use crate::train::Trainer;
use evbridge_autodiff::{grad_check_sampled, GradCheck, Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHECK_STEP: f64 = 1e-5;
/// Sampled coordinates per objective at each point.
pub const COORDS_PER_POINT: usize = 5;

#[derive(Debug, Clone)]
pub struct PipelineCheck {
    /// Worst result over all points.
    pub generator: GradCheck,
    pub discriminator: GradCheck,
    pub points: usize,
}

/// Zero-initialized biases put every unit fed by an all-zero patch (empty
/// histogram regions) exactly on its kink; random biases move the point
/// off them.
fn randomize_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".b"))
        .map(str::to_string)
        .collect();
    for n in names {
        for v in store.get_mut(&n).expect("listed").data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
}

fn merge(acc: &mut Option<GradCheck>, r: GradCheck) {
    match acc {
        None => *acc = Some(r),
        Some(a) => {
            a.coords_checked += r.coords_checked;
            a.coords_skipped += r.coords_skipped;
            if r.max_rel_error > a.max_rel_error {
                a.max_rel_error = r.max_rel_error;
                a.worst = r.worst;
            }
        }
    }
}

/// Checks the generator objective (encoders, decoder, refinement, head,
/// every loss term) and the discriminator objective at `points` random
/// points. Each point has its own initialization, random biases and batch
/// of size 2; a few coordinates are sampled per point.
pub fn pipeline_grad_check(
    cfg: &PipelineConfig,
    points: usize,
    seed: u64,
) -> Result<PipelineCheck> {
    let mut cfg = cfg.clone();
    cfg.batch_size = 2;
    cfg.train_scenes = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut gen_acc, mut disc_acc) = (None, None);
    for p in 0..points as u64 {
        cfg.seed = seed.wrapping_add(p);
        let data = make_dataset(&cfg, cfg.train_scenes)?;
        let mut trainer = Trainer::new(&cfg, &data)?;
        let mut inputs = trainer.sample_inputs()?;
        let (mut gen, mut disc) = (trainer.gen.clone(), trainer.disc.clone());
        randomize_biases(&mut gen, &mut rng);
        randomize_biases(&mut disc, &mut rng);
        let g = Graph::new();
        let z = encode_image(&g, Bind::frozen(&gen), g.constant(inputs.images.clone()))?;
        inputs.fixed_content = Some(g.tensor(z));

        let r = grad_check_sampled(&gen, CHECK_STEP, COORDS_PER_POINT, &mut rng, |g, store| {
            let terms = generator_step(
                g,
                &cfg,
                Bind::trainable(store),
                Bind::frozen(&disc),
                &inputs,
            )
            .map_err(|e| evbridge_autodiff::Error::Usage(e.to_string()))?;
            Ok(terms.total)
        })?;
        merge(&mut gen_acc, r);
        let r = grad_check_sampled(&disc, CHECK_STEP, COORDS_PER_POINT, &mut rng, |g, store| {
            let terms =
                discriminator_step(g, &cfg, Bind::frozen(&gen), Bind::trainable(store), &inputs)
                    .map_err(|e| evbridge_autodiff::Error::Usage(e.to_string()))?;
            Ok(terms.total)
        })?;
        merge(&mut disc_acc, r);
    }
    let empty = GradCheck {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        worst: None,
    };
    Ok(PipelineCheck {
        generator: gen_acc.unwrap_or_else(|| empty.clone()),
        discriminator: disc_acc.unwrap_or(empty),
        points,
    })
}
