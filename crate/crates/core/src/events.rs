//! Event generation from intensity images.
//!
//! Two independent routes produce per-pixel event counts:
//!
//! * the linearized model: `ΔL = -<∇L, v> dt` on the log image `L`, then
//!   quantization by the contrast threshold ([`log_intensity_change`],
//!   [`count_events`]), and its pseudo-flow variant where the flow already
//!   absorbs `dt / C` ([`pseudo_flow_counts`], [`initial_event_guess`]);
//! * a brute-force two-frame simulator that differences the log images of
//!   two renderings directly ([`two_frame_oracle`]).

use crate::error::{Error, Result};
use crate::field::{dot_field, log_transform, spatial_gradient, ScalarField, VectorField};
use serde::{Deserialize, Serialize};

/// Default contrast threshold in log-intensity units.
pub const DEFAULT_CONTRAST: f64 = 0.2;

/// ON/OFF contrast thresholds. Most code uses the symmetric constructor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastThreshold {
    pos: f64,
    neg: f64,
}

impl ContrastThreshold {
    pub fn new(c: f64) -> Result<Self> {
        Self::asymmetric(c, c)
    }

    pub fn asymmetric(pos: f64, neg: f64) -> Result<Self> {
        if !(pos > 0.0 && neg > 0.0 && pos.is_finite() && neg.is_finite()) {
            return Err(Error::Domain(format!(
                "contrast thresholds must be positive, got ON {pos} / OFF {neg}"
            )));
        }
        Ok(Self { pos, neg })
    }

    pub fn pos(&self) -> f64 {
        self.pos
    }

    pub fn neg(&self) -> f64 {
        self.neg
    }

    /// Threshold that applies to a change of the given sign.
    fn for_change(&self, dlog: f64) -> f64 {
        if dlog < 0.0 {
            self.neg
        } else {
            self.pos
        }
    }
}

impl Default for ContrastThreshold {
    fn default() -> Self {
        Self {
            pos: DEFAULT_CONTRAST,
            neg: DEFAULT_CONTRAST,
        }
    }
}

/// Integer event count per pixel; positive values are ON events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEventCount {
    width: usize,
    height: usize,
    n: Vec<i64>,
}

impl SignedEventCount {
    pub fn new(width: usize, height: usize, n: Vec<i64>) -> Result<Self> {
        if n.len() != width * height {
            return Err(Error::Dimension(format!(
                "count grid {width}x{height} needs {} values, got {}",
                width * height,
                n.len()
            )));
        }
        Ok(Self { width, height, n })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn counts(&self) -> &[i64] {
        &self.n
    }

    pub fn get(&self, x: usize, y: usize) -> i64 {
        self.n[y * self.width + x]
    }

    pub fn is_zero(&self) -> bool {
        self.n.iter().all(|&c| c == 0)
    }

    pub fn negated(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            n: self.n.iter().map(|c| -c).collect(),
        }
    }
}

/// Two-channel (ON / OFF) event count image.
#[derive(Debug, Clone, PartialEq)]
pub struct EventHistogram {
    width: usize,
    height: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl EventHistogram {
    pub fn new(width: usize, height: usize, pos: Vec<f64>, neg: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if pos.len() != n || neg.len() != n {
            return Err(Error::Dimension(format!(
                "histogram {width}x{height} needs {n} values per channel, got {} and {}",
                pos.len(),
                neg.len()
            )));
        }
        if let Some(bad) = pos
            .iter()
            .chain(&neg)
            .find(|a| !(a.is_finite() && **a >= 0.0))
        {
            return Err(Error::Validation(format!(
                "histogram entries must be finite and >= 0, got {bad}"
            )));
        }
        Ok(Self {
            width,
            height,
            pos,
            neg,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pos: vec![0.0; width * height],
            neg: vec![0.0; width * height],
        }
    }

    /// Splits a signed count into its positive part and the magnitude of its
    /// negative part, so at most one channel is non-zero at any pixel.
    pub fn from_signed_count(n: &SignedEventCount) -> Self {
        let pos = n.n.iter().map(|&c| c.max(0) as f64).collect();
        let neg = n.n.iter().map(|&c| (-c).max(0) as f64).collect();
        Self {
            width: n.width,
            height: n.height,
            pos,
            neg,
        }
    }

    /// Same split for a real-valued signed count field.
    pub fn from_signed_field(n: &ScalarField) -> Self {
        let pos = n.data().iter().map(|&c| c.max(0.0)).collect();
        let neg = n.data().iter().map(|&c| (-c).max(0.0)).collect();
        Self {
            width: n.width(),
            height: n.height(),
            pos,
            neg,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pos(&self) -> &[f64] {
        &self.pos
    }

    pub fn neg(&self) -> &[f64] {
        &self.neg
    }

    pub fn pos_field(&self) -> ScalarField {
        ScalarField::new(self.width, self.height, self.pos.clone()).expect("histogram is finite")
    }

    pub fn neg_field(&self) -> ScalarField {
        ScalarField::new(self.width, self.height, self.neg.clone()).expect("histogram is finite")
    }

    /// `pos - neg` per pixel.
    pub fn net(&self) -> ScalarField {
        let data = self.pos.iter().zip(&self.neg).map(|(p, n)| p - n).collect();
        ScalarField::new(self.width, self.height, data).expect("histogram is finite")
    }

    /// `pos + neg` per pixel.
    pub fn total_per_pixel(&self) -> ScalarField {
        let data = self.pos.iter().zip(&self.neg).map(|(p, n)| p + n).collect();
        ScalarField::new(self.width, self.height, data).expect("histogram is finite")
    }

    pub fn total(&self) -> f64 {
        self.pos.iter().sum::<f64>() + self.neg.iter().sum::<f64>()
    }

    pub fn is_zero(&self) -> bool {
        self.pos.iter().chain(&self.neg).all(|&a| a == 0.0)
    }

    /// Divides both channels by the largest entry of either channel.
    /// An empty histogram stays zero.
    pub fn normalized_by_max(&self) -> Self {
        let m = self
            .pos
            .iter()
            .chain(&self.neg)
            .copied()
            .fold(0.0, f64::max);
        if m == 0.0 {
            return self.clone();
        }
        Self {
            width: self.width,
            height: self.height,
            pos: self.pos.iter().map(|a| a / m).collect(),
            neg: self.neg.iter().map(|a| a / m).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t: f64,
    pub x: u32,
    pub y: u32,
    /// +1 for ON, -1 for OFF.
    pub p: i8,
}

/// Time-ordered list of events on a fixed sensor resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    width: usize,
    height: usize,
    events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: usize, height: usize, events: Vec<Event>) -> Result<Self> {
        let mut last = f64::NEG_INFINITY;
        for (i, e) in events.iter().enumerate() {
            if !e.t.is_finite() || e.t < last {
                return Err(Error::Validation(format!(
                    "event {i}: timestamp {} breaks non-decreasing order",
                    e.t
                )));
            }
            if e.x as usize >= width || e.y as usize >= height {
                return Err(Error::Validation(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::Validation(format!(
                    "event {i}: polarity {} not in {{-1, 1}}",
                    e.p
                )));
            }
            last = e.t;
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Net signed count per pixel (ON minus OFF).
    pub fn signed_counts(&self) -> SignedEventCount {
        let mut n = vec![0i64; self.width * self.height];
        for e in &self.events {
            n[e.y as usize * self.width + e.x as usize] += e.p as i64;
        }
        SignedEventCount {
            width: self.width,
            height: self.height,
            n,
        }
    }
}

/// Linearized log-intensity change `-<∇L, v> dt`.
pub fn log_intensity_change(
    grad: &VectorField,
    flow: &VectorField,
    dt: f64,
) -> Result<ScalarField> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!(
            "time step must be positive, got {dt}"
        )));
    }
    dot_field(grad, flow)?.scale(-dt)
}

/// Quantizes a log-intensity change into whole events: the magnitude is
/// floored, the sign reattached.
pub fn count_events(dlog: &ScalarField, c: ContrastThreshold) -> SignedEventCount {
    let n = dlog
        .data()
        .iter()
        .map(|&d| {
            let k = (d.abs() / c.for_change(d)).floor() as i64;
            if d < 0.0 {
                -k
            } else {
                k
            }
        })
        .collect();
    SignedEventCount {
        width: dlog.width(),
        height: dlog.height(),
        n,
    }
}

/// Real-valued signed event count `<∇L, v̂>` for a pseudo-flow `v̂` that
/// already carries the `dt / C` scaling and the sign convention.
pub fn pseudo_flow_counts(grad: &VectorField, pflow: &VectorField) -> Result<ScalarField> {
    dot_field(grad, pflow)
}

/// Model-based event histogram of an intensity image under a pseudo-flow.
pub fn initial_event_guess(
    img: &ScalarField,
    pflow: &VectorField,
    eps: f64,
) -> Result<EventHistogram> {
    if let Some(bad) = img.data().iter().find(|&&a| a > 1.0) {
        return Err(Error::Domain(format!("intensity {bad} above 1")));
    }
    let grad = spatial_gradient(&log_transform(img, eps)?)?;
    let n = pseudo_flow_counts(&grad, pflow)?;
    Ok(EventHistogram::from_signed_field(&n))
}

pub fn histogram_from_stream(s: &EventStream) -> Result<EventHistogram> {
    let mut h = EventHistogram::zeros(s.width, s.height);
    for (i, e) in s.events.iter().enumerate() {
        let (x, y) = (e.x as usize, e.y as usize);
        if x >= s.width || y >= s.height {
            return Err(Error::Validation(format!(
                "event {i} at ({x}, {y}) outside {}x{}",
                s.width, s.height
            )));
        }
        match e.p {
            1 => h.pos[y * s.width + x] += 1.0,
            -1 => h.neg[y * s.width + x] += 1.0,
            p => return Err(Error::Validation(format!("event {i}: polarity {p}"))),
        }
    }
    Ok(h)
}

/// Brute-force event simulation between two intensity frames.
///
/// Each pixel fires `floor(|ΔL| / C)` events of polarity `sign(ΔL)`. With
/// the log intensity assumed to move linearly over `[0, dt]`, the k-th
/// event is stamped at the instant the change crosses `k·C`.
pub fn two_frame_oracle(
    img0: &ScalarField,
    img1: &ScalarField,
    c: ContrastThreshold,
    eps: f64,
    dt: f64,
) -> Result<EventStream> {
    if img0.shape() != img1.shape() {
        return Err(Error::Dimension(format!(
            "oracle frames {}x{} vs {}x{}",
            img0.width(),
            img0.height(),
            img1.width(),
            img1.height()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!(
            "time window must be positive, got {dt}"
        )));
    }
    for img in [img0, img1] {
        if let Some(bad) = img.data().iter().find(|&&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Domain(format!("intensity {bad} outside [0, 1]")));
        }
    }
    let l0 = log_transform(img0, eps)?;
    let l1 = log_transform(img1, eps)?;
    let (w, h) = img0.shape();
    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let d = l1.get(x, y) - l0.get(x, y);
            let thr = c.for_change(d);
            let k = (d.abs() / thr).floor() as u64;
            let p = if d < 0.0 { -1 } else { 1 };
            for j in 1..=k {
                let t = dt * (j as f64 * thr / d.abs()).min(1.0);
                events.push(Event {
                    t,
                    x: x as u32,
                    y: y as u32,
                    p,
                });
            }
        }
    }
    // stable: ties keep pixel order
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    EventStream::new(w, h, events)
}
