//! Flow fields: target-domain motion samplers, magnitude-preserving
//! direction augmentation and the Charbonnier smoothness penalty.

use crate::error::{Error, Result};
use crate::field::VectorField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Translational,
    Epipolar,
}

/// Description of a random motion field distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSamplerSpec {
    pub kind: FlowKind,
    pub seed: u64,
    /// `[lo, hi]` magnitude in pixels (or pseudo-flow units).
    pub magnitude_range: [f64; 2],
    /// `[x0, y0, x1, y1]` in normalized image coordinates; only read for
    /// epipolar fields. Defaults to the whole image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epipole_region: Option<[f64; 4]>,
}

impl FlowSamplerSpec {
    pub fn translational(seed: u64, lo: f64, hi: f64) -> Self {
        Self {
            kind: FlowKind::Translational,
            seed,
            magnitude_range: [lo, hi],
            epipole_region: None,
        }
    }

    pub fn epipolar(seed: u64, lo: f64, hi: f64, region: [f64; 4]) -> Self {
        Self {
            kind: FlowKind::Epipolar,
            seed,
            magnitude_range: [lo, hi],
            epipole_region: Some(region),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.magnitude_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Validation(format!(
                "magnitude range [{lo}, {hi}] needs 0 <= lo <= hi"
            )));
        }
        if let Some([x0, y0, x1, y1]) = self.epipole_region {
            let ok =
                [x0, y0, x1, y1].iter().all(|a| (0.0..=1.0).contains(a)) && x0 <= x1 && y0 <= y1;
            if !ok {
                return Err(Error::Validation(format!(
                    "epipole region {:?} must be an ordered rectangle inside [0,1]^2",
                    [x0, y0, x1, y1]
                )));
            }
        }
        Ok(())
    }
}

/// Stateful sampler drawing successive fields from one seeded stream.
#[derive(Debug, Clone)]
pub struct FlowSampler {
    spec: FlowSamplerSpec,
    rng: ChaCha8Rng,
}

impl FlowSampler {
    pub fn new(spec: FlowSamplerSpec) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Ok(Self { spec, rng })
    }

    pub fn spec(&self) -> &FlowSamplerSpec {
        &self.spec
    }

    fn magnitude(&mut self) -> f64 {
        let [lo, hi] = self.spec.magnitude_range;
        if lo == hi {
            lo
        } else {
            self.rng.random_range(lo..=hi)
        }
    }

    /// Draws one `(u, v)` translation from the sampler's distribution.
    pub fn next_translation(&mut self) -> (f64, f64) {
        let angle = self.rng.random_range(0.0..TAU);
        let m = self.magnitude();
        (m * angle.cos(), m * angle.sin())
    }

    pub fn next_field(&mut self, w: usize, h: usize) -> VectorField {
        match self.spec.kind {
            FlowKind::Translational => {
                let (u, v) = self.next_translation();
                VectorField::constant(w, h, u, v)
            }
            FlowKind::Epipolar => {
                let [x0, y0, x1, y1] = self.spec.epipole_region.unwrap_or([0.0, 0.0, 1.0, 1.0]);
                let ex = lerp(x0, x1, self.rng.random::<f64>()) * (w.max(1) - 1) as f64;
                let ey = lerp(y0, y1, self.rng.random::<f64>()) * (h.max(1) - 1) as f64;
                let m = self.magnitude();
                radial_field(w, h, (ex, ey), m)
            }
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Forward-motion field expanding from `epipole`: direction `p - e`,
/// magnitude linear in `|p - e|` with the farthest pixel at `max_mag`.
pub fn radial_field(w: usize, h: usize, epipole: (f64, f64), max_mag: f64) -> VectorField {
    let (ex, ey) = epipole;
    let mut far = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            far = far.max((x as f64 - ex).hypot(y as f64 - ey));
        }
    }
    let k = if far > 0.0 { max_mag / far } else { 0.0 };
    VectorField::from_fn(w, h, |x, y| ((x as f64 - ex) * k, (y as f64 - ey) * k))
}

pub fn sample_translational_flow(
    spec: &FlowSamplerSpec,
    w: usize,
    h: usize,
) -> Result<VectorField> {
    if spec.kind != FlowKind::Translational {
        return Err(Error::Usage(format!(
            "translational sampler given a {:?} spec",
            spec.kind
        )));
    }
    Ok(FlowSampler::new(spec.clone())?.next_field(w, h))
}

pub fn sample_epipolar_flow(spec: &FlowSamplerSpec, w: usize, h: usize) -> Result<VectorField> {
    if spec.kind != FlowKind::Epipolar {
        return Err(Error::Usage(format!(
            "epipolar sampler given a {:?} spec",
            spec.kind
        )));
    }
    Ok(FlowSampler::new(spec.clone())?.next_field(w, h))
}

/// Keeps the per-pixel magnitude of `pflow` and takes the direction of
/// `dirfield`. Pixels where `pflow` vanishes stay zero.
pub fn augment_flow(pflow: &VectorField, dirfield: &VectorField) -> Result<VectorField> {
    if pflow.shape() != dirfield.shape() {
        return Err(Error::Dimension(format!(
            "augment_flow: {}x{} vs {}x{}",
            pflow.width(),
            pflow.height(),
            dirfield.width(),
            dirfield.height()
        )));
    }
    let n = pflow.u().len();
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        let mag = pflow.u()[i].hypot(pflow.v()[i]);
        if mag == 0.0 {
            continue;
        }
        let (du, dv) = (dirfield.u()[i], dirfield.v()[i]);
        let dnorm = du.hypot(dv);
        if dnorm == 0.0 {
            return Err(Error::Validation(format!(
                "direction field vanishes at pixel ({}, {}) where the flow does not",
                i % pflow.width(),
                i / pflow.width()
            )));
        }
        u[i] = mag * du / dnorm;
        v[i] = mag * dv / dnorm;
    }
    VectorField::new(pflow.width(), pflow.height(), u, v)
}

pub const CHARBONNIER_ALPHA: f64 = 0.45;
pub const CHARBONNIER_EPS: f64 = 0.001;

/// `ρ(x) = (ε^α + x^α)^(1/α)` for `x >= 0`.
pub fn charbonnier(x: f64, alpha: f64, eps: f64) -> f64 {
    (eps.powf(alpha) + x.powf(alpha)).powf(1.0 / alpha)
}

/// Offsets of the eight neighbours.
pub const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Number of ordered (pixel, in-bounds neighbour) pairs on a `w x h` grid.
pub fn neighbor_pair_count(w: usize, h: usize) -> usize {
    let mut n = 0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            n += NEIGHBORS_8
                .iter()
                .filter(|(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize
                })
                .count();
        }
    }
    n
}

/// Sum of `ρ(|v_x - v_y|)` over every pixel `x` and each in-bounds
/// 8-neighbour `y`. Out-of-bounds neighbours are skipped.
pub fn charbonnier_smoothness(flow: &VectorField, alpha: f64, eps: f64) -> f64 {
    smoothness_impl(flow, |du, dv| charbonnier(du.hypot(dv), alpha, eps))
}

/// Variant applying `ρ` to each component difference separately.
pub fn charbonnier_smoothness_componentwise(flow: &VectorField, alpha: f64, eps: f64) -> f64 {
    smoothness_impl(flow, |du, dv| {
        charbonnier(du.abs(), alpha, eps) + charbonnier(dv.abs(), alpha, eps)
    })
}

fn smoothness_impl(flow: &VectorField, pair: impl Fn(f64, f64) -> f64) -> f64 {
    let (w, h) = (flow.width() as isize, flow.height() as isize);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (u0, v0) = flow.get(x as usize, y as usize);
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let (u1, v1) = flow.get(nx as usize, ny as usize);
                total += pair(u0 - u1, v0 - v1);
            }
        }
    }
    total
}
