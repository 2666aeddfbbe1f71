//! Analytic test scenes with piecewise-linear log intensity, and the
//! comparison of the linearized event model against the two-frame oracle
//! on them.
//!
//! Because the log intensity is piecewise linear, central differences and
//! translation are both exact wherever a pixel's stencil and its motion
//! path stay inside one linear piece. Only pixels straddling a kink can
//! disagree.

use crate::error::{Error, Result};
use crate::events::{
    count_events, log_intensity_change, two_frame_oracle, ContrastThreshold, SignedEventCount,
};
use crate::field::{log_transform, spatial_gradient, ScalarField, VectorField};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Log intensity linear in both axes.
    Ramp,
    /// Soft vertical edge: flat, linear rise over four pixels, flat.
    Step,
    /// Soft-edged bar tilted by 30 degrees.
    Bar,
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ramp" => Ok(Self::Ramp),
            "step" => Ok(Self::Step),
            "bar" => Ok(Self::Bar),
            other => Err(Error::Usage(format!(
                "unknown scene '{other}' (expected ramp, step or bar)"
            ))),
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ramp => "ramp",
            Self::Step => "step",
            Self::Bar => "bar",
        })
    }
}

const RAMP_SLOPE: (f64, f64) = (0.29, 0.13);
const RAMP_OFFSET: f64 = -6.5;
const EDGE_SLOPE: f64 = 0.27;
const EDGE_LOW: f64 = -3.0;
const STEP_START: f64 = 6.0;
const STEP_WIDTH: f64 = 4.0;
const BAR_HALF_WIDTH: f64 = 2.0;
const BAR_RAMP: f64 = 4.0;
const BAR_ANGLE_DEG: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScene {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
}

impl OracleScene {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            width: 16,
            height: 16,
        }
    }

    /// Profile coordinate along which the log intensity varies, and the
    /// positions of the kinks on that axis.
    fn profile_coord(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SceneKind::Ramp | SceneKind::Step => x,
            SceneKind::Bar => {
                let (s, c) = BAR_ANGLE_DEG.to_radians().sin_cos();
                let (cx, cy) = (
                    (self.width as f64 - 1.0) / 2.0,
                    (self.height as f64 - 1.0) / 2.0,
                );
                (x - cx) * c + (y - cy) * s
            }
        }
    }

    fn kinks(&self) -> Vec<f64> {
        match self.kind {
            SceneKind::Ramp => vec![],
            SceneKind::Step => vec![STEP_START, STEP_START + STEP_WIDTH],
            SceneKind::Bar => {
                let (w, r) = (BAR_HALF_WIDTH, BAR_RAMP);
                vec![-w - r, -w, w, w + r]
            }
        }
    }

    /// Log intensity at a continuous position.
    pub fn log_intensity(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SceneKind::Ramp => RAMP_SLOPE.0 * x + RAMP_SLOPE.1 * y + RAMP_OFFSET,
            SceneKind::Step => EDGE_LOW + EDGE_SLOPE * (x - STEP_START).clamp(0.0, STEP_WIDTH),
            SceneKind::Bar => {
                let d = self.profile_coord(x, y).abs();
                EDGE_LOW + EDGE_SLOPE * (BAR_HALF_WIDTH + BAR_RAMP - d).clamp(0.0, BAR_RAMP)
            }
        }
    }

    /// Intensity image of the scene translated by `shift` pixels.
    pub fn render(&self, shift: (f64, f64), eps: f64) -> ScalarField {
        ScalarField::from_fn(self.width, self.height, |x, y| {
            let l = self.log_intensity(x as f64 - shift.0, y as f64 - shift.1);
            (l.exp() - eps).clamp(0.0, 1.0)
        })
    }

    /// A pixel is a discontinuity pixel when its gradient stencil or its
    /// motion path crosses a kink of the profile.
    pub fn is_discontinuity(&self, x: usize, y: usize, motion: (f64, f64)) -> bool {
        let (xf, yf) = (x as f64, y as f64);
        let probes = [
            (xf, yf),
            (xf - 1.0, yf),
            (xf + 1.0, yf),
            (xf, yf - 1.0),
            (xf, yf + 1.0),
            (xf - motion.0, yf - motion.1),
        ];
        let ds: Vec<f64> = probes
            .iter()
            .map(|&(a, b)| self.profile_coord(a, b))
            .collect();
        let lo = ds.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.kinks().iter().any(|&k| match self.kind {
            // the bar profile folds at d = 0 through |d|
            SceneKind::Bar => (lo < k && k < hi) || (lo < -k && -k < hi),
            _ => lo < k && k < hi,
        })
    }
}

/// Per-pixel counts from both routes and their disagreement.
#[derive(Debug, Clone)]
pub struct OracleComparison {
    pub model: SignedEventCount,
    pub oracle: SignedEventCount,
    /// Largest |model - oracle| over interior pixels away from kinks.
    pub smooth_discrepancy: i64,
    /// Largest |model - oracle| over interior pixels at kinks.
    pub kink_discrepancy: i64,
    pub smooth_pixels: usize,
    pub kink_pixels: usize,
}

impl OracleComparison {
    /// Exact agreement away from kinks, at most one count at kinks.
    pub fn passes(&self) -> bool {
        self.smooth_discrepancy == 0 && self.kink_discrepancy <= 1
    }

    pub fn max_discrepancy(&self) -> i64 {
        self.smooth_discrepancy.max(self.kink_discrepancy)
    }
}

/// Runs the linearized model and the two-frame oracle on `scene` moving by
/// `motion` pixels over a unit time window.
pub fn compare_model_with_oracle(
    scene: &OracleScene,
    motion: (f64, f64),
    c: ContrastThreshold,
    eps: f64,
) -> Result<OracleComparison> {
    let img0 = scene.render((0.0, 0.0), eps);
    let img1 = scene.render(motion, eps);
    let grad = spatial_gradient(&log_transform(&img0, eps)?)?;
    let flow = VectorField::constant(scene.width, scene.height, motion.0, motion.1);
    let model = count_events(&log_intensity_change(&grad, &flow, 1.0)?, c);
    let oracle = two_frame_oracle(&img0, &img1, c, eps, 1.0)?.signed_counts();

    let (mut smooth, mut kink, mut ns, mut nk) = (0, 0, 0, 0);
    for y in 1..scene.height - 1 {
        for x in 1..scene.width - 1 {
            let d = (model.get(x, y) - oracle.get(x, y)).abs();
            if scene.is_discontinuity(x, y, motion) {
                kink = kink.max(d);
                nk += 1;
            } else {
                smooth = smooth.max(d);
                ns += 1;
            }
        }
    }
    Ok(OracleComparison {
        model,
        oracle,
        smooth_discrepancy: smooth,
        kink_discrepancy: kink,
        smooth_pixels: ns,
        kink_pixels: nk,
    })
}
