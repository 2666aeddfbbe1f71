//! Pipeline configuration, read from and written to JSON.
//!
//! Every field has a default, so `{}` is a valid config. Unknown keys are
//! rejected to catch typos in ablation flags.

use crate::error::{Error, Result};
use evbridge_autodiff::AdamConfig;
use evbridge_core::{FlowKind, FlowSamplerSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the run after which the learning rate decays linearly
    /// to zero at the last generator step; 1 keeps it constant.
    pub decay_start: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            // the adversarial terms oscillate with the usual 0.9
            beta1: 0.5,
            beta2: a.beta2,
            eps: a.eps,
            decay_start: 0.5,
        }
    }
}

impl AdamSettings {
    pub fn to_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Settings for steps taken while `gen_steps` of `total` generator
    /// steps are done.
    pub fn at(&self, gen_steps: u64, total: u64) -> AdamConfig {
        let start = self.decay_start * total as f64;
        let t = gen_steps as f64;
        let factor = if self.decay_start >= 1.0 || t < start {
            1.0
        } else {
            ((total as f64 + 1.0 - t) / (total as f64 + 1.0 - start)).min(1.0)
        };
        AdamConfig {
            lr: self.lr * factor,
            ..self.to_adam()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    // scene and event synthesis
    pub image_size: usize,
    pub num_classes: usize,
    /// Labeled images and unlabeled event histograms, each.
    pub train_scenes: usize,
    /// Labeled event histograms held out for evaluation.
    pub test_scenes: usize,
    pub contrast: f64,
    pub log_eps: f64,
    pub dt: f64,
    /// Largest angle in degrees between a scene's motion and its bar normal.
    pub motion_spread_deg: f64,
    /// Target-domain motion: magnitudes of scene translations and the
    /// direction distribution of the flow augmentation.
    pub flow_sampler: FlowSamplerSpec,

    // network sizes
    pub hidden_channels: usize,
    pub z_channels: usize,
    pub zeta_dim: usize,
    pub noise_channels: usize,
    /// Bound of the decoder's tanh output, in pseudo-flow units.
    pub flow_scale: f64,
    /// Factor applied to event counts before they enter a network.
    pub event_input_scale: f64,

    // loss flags and ablations
    pub standard_sign: bool,
    pub flow_module_enabled: bool,
    pub split_enabled: bool,
    pub augm_enabled: bool,
    /// Stop gradients into the targets of the cycle loss.
    pub cycle_detach_target: bool,
    /// Train only the image encoder and task head on labeled images.
    pub source_only: bool,

    // optimization
    pub batch_size: usize,
    /// Number of generator steps; each follows two discriminator steps.
    pub iterations: u64,
    pub adam: AdamSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 32,
            num_classes: 4,
            train_scenes: 800,
            test_scenes: 200,
            contrast: evbridge_core::events::DEFAULT_CONTRAST,
            log_eps: evbridge_core::field::DEFAULT_LOG_EPS,
            dt: 1.0,
            motion_spread_deg: 45.0,
            flow_sampler: FlowSamplerSpec::translational(11, 1.0, 2.0),
            hidden_channels: 8,
            z_channels: 16,
            zeta_dim: 8,
            noise_channels: 4,
            flow_scale: 10.0,
            event_input_scale: 0.1,
            standard_sign: true,
            flow_module_enabled: true,
            split_enabled: true,
            augm_enabled: true,
            cycle_detach_target: false,
            source_only: false,
            batch_size: 16,
            iterations: 600,
            adam: AdamSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            ));
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes {} must be at least 2",
                self.num_classes
            ));
        }
        if self.train_scenes < 8 {
            return bad(format!(
                "train_scenes {} must be at least 8",
                self.train_scenes
            ));
        }
        if self.test_scenes == 0 {
            return bad("test_scenes must be positive".into());
        }
        if 2 * self.train_scenes + self.test_scenes > 2000 {
            return bad(format!(
                "{} scenes requested; the toy task is capped at 2000",
                2 * self.train_scenes + self.test_scenes
            ));
        }
        for (name, v) in [
            ("contrast", self.contrast),
            ("log_eps", self.log_eps),
            ("dt", self.dt),
            ("flow_scale", self.flow_scale),
            ("event_input_scale", self.event_input_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..=90.0).contains(&self.motion_spread_deg) {
            return bad(format!(
                "motion_spread_deg {} outside [0, 90]",
                self.motion_spread_deg
            ));
        }
        self.flow_sampler
            .validate()
            .map_err(|e| Error::Config(format!("flow_sampler: {e}")))?;
        if self.flow_sampler.kind == FlowKind::Translational
            && self.flow_sampler.magnitude_range[1] <= 0.0
        {
            return bad("flow_sampler magnitudes must allow nonzero motion".into());
        }
        for (name, v) in [
            ("hidden_channels", self.hidden_channels),
            ("z_channels", self.z_channels),
            ("zeta_dim", self.zeta_dim),
            ("noise_channels", self.noise_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        let a = &self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0
            && (0.0..=1.0).contains(&a.decay_start))
        {
            return bad(format!("adam settings {a:?} out of range"));
        }
        Ok(())
    }

    /// Augmentation needs a predicted flow and an event-specific feature.
    pub fn augmentation_active(&self) -> bool {
        self.augm_enabled && self.split_enabled && self.flow_module_enabled && !self.source_only
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
