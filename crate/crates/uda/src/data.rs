//! Synthetic oriented-bar scenes and the unpaired image/event datasets
//! built from them.
//!
//! Every scene is drawn from its own generator seeded by the dataset seed
//! mixed with the scene id, so scenes can be produced in any order.
//! Labeled images, unlabeled training events and labeled test events come
//! from disjoint id ranges.

use crate::config::PipelineConfig;
use crate::error::Result;
use evbridge_core::{
    histogram_from_stream, two_frame_oracle, ContrastThreshold, EventHistogram, FlowKind,
    FlowSampler, ScalarField,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One bright soft-edged bar on a dark background.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub id: u64,
    pub label: usize,
    /// Bar direction in radians.
    pub angle: f64,
    pub center: (f64, f64),
    pub half_length: f64,
    pub half_width: f64,
    pub background: f64,
    pub foreground: f64,
    /// Translation applied between the two frames of the event sample.
    pub motion: (f64, f64),
    pub size: usize,
}

/// Largest deviation of the bar angle from its class angle.
const ANGLE_JITTER_DEG: f64 = 8.0;

fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl ToyScene {
    /// Scene `id` of the dataset drawn with `cfg.seed`. Labels cycle through
    /// the classes by id so every split is balanced.
    pub fn generate(cfg: &PipelineConfig, id: u64) -> Self {
        let mut rng = scene_rng(cfg.seed, id);
        let k = cfg.num_classes;
        let label = (id % k as u64) as usize;
        let class_angle = std::f64::consts::PI * label as f64 / k as f64;
        let angle = class_angle
            + rng
                .random_range(-ANGLE_JITTER_DEG..=ANGLE_JITTER_DEG)
                .to_radians();
        let s = cfg.image_size as f64;
        let mid = (s - 1.0) / 2.0;
        let center = (
            mid + rng.random_range(-0.1 * s..=0.1 * s),
            mid + rng.random_range(-0.1 * s..=0.1 * s),
        );
        let half_length = rng.random_range(0.28 * s..=0.38 * s);
        let half_width = rng.random_range(0.055 * s..=0.09 * s);
        let background = rng.random_range(0.08..=0.2);
        let foreground = rng.random_range(0.7..=0.95);

        let [lo, hi] = cfg.flow_sampler.magnitude_range;
        let magnitude = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        let spread = cfg.motion_spread_deg.to_radians();
        let normal = angle + std::f64::consts::FRAC_PI_2;
        let mut dir = normal
            + if spread > 0.0 {
                rng.random_range(-spread..=spread)
            } else {
                0.0
            };
        if rng.random_bool(0.5) {
            dir += std::f64::consts::PI;
        }
        let motion = (magnitude * dir.cos(), magnitude * dir.sin());
        Self {
            id,
            label,
            angle,
            center,
            half_length,
            half_width,
            background,
            foreground,
            motion,
            size: cfg.image_size,
        }
    }

    /// Intensity at a continuous position.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        // one-pixel soft edges on either side of the boundary
        let m = smoothstep((self.half_width - across.abs() + 1.0) / 2.0)
            * smoothstep((self.half_length - along.abs() + 1.0) / 2.0);
        self.background + (self.foreground - self.background) * m
    }

    pub fn render(&self, shift: (f64, f64)) -> ScalarField {
        ScalarField::from_fn(self.size, self.size, |x, y| {
            self.intensity(x as f64 - shift.0, y as f64 - shift.1)
        })
    }

    pub fn image(&self) -> ScalarField {
        self.render((0.0, 0.0))
    }

    /// Event histogram of the scene moving by `motion` over one time window,
    /// simulated with the two-frame oracle.
    pub fn events(&self, cfg: &PipelineConfig) -> Result<EventHistogram> {
        let c = ContrastThreshold::new(cfg.contrast)?;
        let stream = two_frame_oracle(
            &self.image(),
            &self.render(self.motion),
            c,
            cfg.log_eps,
            cfg.dt,
        )?;
        Ok(histogram_from_stream(&stream)?)
    }
}

/// Training data: labeled images and unlabeled event histograms from
/// disjoint scenes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ScalarField>,
    pub labels: Vec<usize>,
    pub image_scene_ids: Vec<u64>,
    pub events: Vec<EventHistogram>,
    pub event_scene_ids: Vec<u64>,
}

/// Held-out labeled events.
#[derive(Debug, Clone)]
pub struct EventTestSet {
    pub events: Vec<EventHistogram>,
    pub labels: Vec<usize>,
    pub scene_ids: Vec<u64>,
}

/// `n` labeled images from scenes `0..n` and `n` unlabeled event
/// histograms from scenes `n..2n`.
pub fn make_dataset(cfg: &PipelineConfig, n: usize) -> Result<Dataset> {
    let n = n as u64;
    let (mut images, mut labels, mut events) = (Vec::new(), Vec::new(), Vec::new());
    for id in 0..n {
        let s = ToyScene::generate(cfg, id);
        images.push(s.image());
        labels.push(s.label);
    }
    for id in n..2 * n {
        events.push(ToyScene::generate(cfg, id).events(cfg)?);
    }
    Ok(Dataset {
        images,
        labels,
        image_scene_ids: (0..n).collect(),
        events,
        event_scene_ids: (n..2 * n).collect(),
    })
}

/// `m` labeled event histograms from scenes after the training range.
pub fn make_event_test_set(cfg: &PipelineConfig, m: usize) -> Result<EventTestSet> {
    let start = 2 * cfg.train_scenes as u64;
    let mut set = EventTestSet {
        events: Vec::new(),
        labels: Vec::new(),
        scene_ids: Vec::new(),
    };
    for id in start..start + m as u64 {
        let s = ToyScene::generate(cfg, id);
        set.events.push(s.events(cfg)?);
        set.labels.push(s.label);
        set.scene_ids.push(id);
    }
    Ok(set)
}

/// Unit-direction fields for the flow augmentation, drawn from the
/// configured target-domain motion distribution.
pub fn augmentation_sampler(cfg: &PipelineConfig) -> Result<FlowSampler> {
    let mut spec = cfg.flow_sampler.clone();
    spec.seed ^= cfg.seed;
    if spec.kind == FlowKind::Translational {
        // only directions matter; the magnitude comes from the prediction
        spec.magnitude_range = [1.0, 1.0];
    }
    Ok(FlowSampler::new(spec)?)
}
