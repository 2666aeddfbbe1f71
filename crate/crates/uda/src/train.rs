//! The alternating training loop: two discriminator steps, then one
//! generator step, with one loss report per generator step.

use crate::config::PipelineConfig;
use crate::data::{augmentation_sampler, Dataset};
use crate::error::{Error, Result};
use crate::nets::{init_discriminator, init_generator, Bind};
use crate::pipeline::{discriminator_step, generator_step, PreparedImage, StepInputs};
use evbridge_autodiff::{AdamConfig, Graph, ParamStore, Tensor};
use evbridge_core::losses::{
    compose_losses, schedule_next, LossParts, LossReport, ScheduleState, Step,
};
use evbridge_core::FlowSampler;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;

pub struct Trainer<'d> {
    cfg: PipelineConfig,
    data: &'d Dataset,
    prepared: Vec<PreparedImage>,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub schedule: ScheduleState,
    rng: ChaCha8Rng,
    aug: FlowSampler,
    pending_disc: Vec<(f64, f64)>,
    pub reports: Vec<LossReport>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: &PipelineConfig, data: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.images.is_empty() || data.events.is_empty() {
            return Err(Error::Config(
                "training needs at least one image and one event sample".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = init_generator(cfg, &mut rng)?;
        let disc = init_discriminator(cfg, &mut rng)?;
        let prepared = data
            .images
            .iter()
            .map(|img| PreparedImage::new(img, cfg.log_eps))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            prepared,
            gen,
            disc,
            schedule: ScheduleState::default(),
            rng,
            aug: augmentation_sampler(cfg)?,
            pending_disc: Vec::new(),
            reports: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Draws an unpaired batch: image and event indices are sampled
    /// independently from their own scene ranges.
    pub fn sample_inputs(&mut self) -> Result<StepInputs> {
        let b = self.cfg.batch_size;
        let s = self.cfg.image_size;
        let img_idx: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(0..self.prepared.len()))
            .collect();
        let evt_idx: Vec<usize> = (0..b)
            .map(|_| self.rng.random_range(0..self.data.events.len()))
            .collect();
        let noise: Vec<f64> = (0..b * self.cfg.noise_channels * s * s)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        let dirs: Vec<_> = (0..b).map(|_| self.aug.next_field(s, s)).collect();
        let images: Vec<&PreparedImage> = img_idx.iter().map(|&i| &self.prepared[i]).collect();
        let events: Vec<_> = evt_idx.iter().map(|&i| &self.data.events[i]).collect();
        let labels = img_idx.iter().map(|&i| self.data.labels[i]).collect();
        let noise = Tensor::new(&[b, self.cfg.noise_channels, s, s], noise)?;
        StepInputs::assemble(&images, labels, &events, noise, &dirs)
    }

    fn step_adam(&self) -> AdamConfig {
        self.cfg
            .adam
            .at(self.schedule.gen_steps_taken, self.cfg.iterations)
    }

    fn check_finite(&self, parts: &LossParts) -> Result<()> {
        for (term, value) in parts.named() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term,
                    value,
                    iteration: self.schedule.gen_steps_taken,
                });
            }
        }
        Ok(())
    }

    fn disc_step(&mut self) -> Result<()> {
        let inputs = self.sample_inputs()?;
        if self.cfg.source_only {
            self.pending_disc.push((0.0, 0.0));
            return Ok(());
        }
        let g = Graph::new();
        let terms = discriminator_step(
            &g,
            &self.cfg,
            Bind::frozen(&self.gen),
            Bind::trainable(&self.disc),
            &inputs,
        )?;
        let (lat, rec) = (g.item(terms.lat_disc), g.item(terms.recons_disc));
        for (term, value) in [("lat_disc", lat), ("recons_disc", rec)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term,
                    value,
                    iteration: self.schedule.gen_steps_taken,
                });
            }
        }
        let grads = g.backward(terms.total)?;
        self.disc.zero_grads();
        self.disc.accumulate(&g, &grads)?;
        self.disc.adam_step(&self.step_adam())?;
        self.pending_disc.push((lat, rec));
        Ok(())
    }

    fn gen_step(&mut self) -> Result<LossReport> {
        let inputs = self.sample_inputs()?;
        let g = Graph::new();
        let terms = generator_step(
            &g,
            &self.cfg,
            Bind::trainable(&self.gen),
            Bind::frozen(&self.disc),
            &inputs,
        )?;
        let mut parts = terms.parts(&g);
        // discriminator terms are the mean over the steps since the last
        // generator step
        let n = self.pending_disc.len().max(1) as f64;
        parts.lat_disc = self.pending_disc.iter().map(|p| p.0).sum::<f64>() / n;
        parts.recons_disc = self.pending_disc.iter().map(|p| p.1).sum::<f64>() / n;
        self.pending_disc.clear();
        self.check_finite(&parts)?;
        let grads = g.backward(terms.total)?;
        self.gen.zero_grads();
        self.gen.accumulate(&g, &grads)?;
        self.gen.adam_step(&self.step_adam())?;
        Ok(compose_losses(parts)?)
    }

    /// Runs scheduled steps until `iterations` generator steps have been
    /// taken, writing one JSON line per generator step to `log`.
    pub fn run(&mut self, log: Option<&mut dyn Write>) -> Result<()> {
        self.run_until(self.cfg.iterations, log)
    }

    /// Like [`Trainer::run`] but stops after `gen_steps` generator steps.
    pub fn run_until(&mut self, gen_steps: u64, mut log: Option<&mut dyn Write>) -> Result<()> {
        while self.schedule.gen_steps_taken < gen_steps {
            match schedule_next(&mut self.schedule) {
                Step::Disc => self.disc_step()?,
                Step::Gen => {
                    let report = self.gen_step()?;
                    if let Some(w) = log.as_deref_mut() {
                        serde_json::to_writer(&mut *w, &report)?;
                        w.write_all(b"\n")?;
                    }
                    self.reports.push(report);
                }
            }
            debug_assert!(self.schedule.invariant_holds());
        }
        Ok(())
    }

    /// Generator and discriminator parameters in one store, prefixed
    /// `gen.` and `disc.`.
    pub fn checkpoint(&self) -> Result<ParamStore> {
        merge_stores(&self.gen, &self.disc)
    }
}

pub fn merge_stores(gen: &ParamStore, disc: &ParamStore) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    s.extend_prefixed("gen.", gen)?;
    s.extend_prefixed("disc.", disc)?;
    Ok(s)
}

/// Result of a complete training run.
pub struct Trained {
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub reports: Vec<LossReport>,
    pub schedule: ScheduleState,
}

pub fn train(cfg: &PipelineConfig, data: &Dataset, log: Option<&mut dyn Write>) -> Result<Trained> {
    let mut t = Trainer::new(cfg, data)?;
    t.run(log)?;
    Ok(Trained {
        gen: t.gen,
        disc: t.disc,
        reports: t.reports,
        schedule: t.schedule,
    })
}
