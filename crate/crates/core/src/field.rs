//! Dense 2-D scalar and vector fields on a pixel grid.
//!
//! Both field types store their samples row-major (`index = y * width + x`)
//! in double precision and reject non-finite values at construction, so
//! every field that exists is finite.

use crate::error::{Error, Result};

/// Default offset added before taking the logarithm of an intensity image.
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    width: usize,
    height: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Validation(format!(
            "{what}: non-finite value {} at index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

fn same_shape(a: (usize, usize), b: (usize, usize), op: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{op}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

impl ScalarField {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "scalar field {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        check_finite("scalar field", &data)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        assert!(value.is_finite(), "constant field value must be finite");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0)
    }

    /// Builds a field by evaluating `f(x, y)` at every pixel.
    ///
    /// Panics if `f` returns a non-finite value.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let value = f(x, y);
                assert!(value.is_finite(), "non-finite value {value} at ({x}, {y})");
                data.push(value);
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|&a| f(a)).collect(),
        )
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(self.shape(), other.shape(), "zip_with")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.width, self.height, data)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        self.map(|a| a * k)
    }

    /// Sum in fixed row-major order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Divides by the field's maximum; an all-zero (or all-negative) field
    /// maps to zeros.
    pub fn normalize_by_max(&self) -> Self {
        let m = self.max();
        if m > 0.0 {
            Self {
                width: self.width,
                height: self.height,
                data: self.data.iter().map(|a| a / m).collect(),
            }
        } else {
            Self::zeros(self.width, self.height)
        }
    }
}

impl VectorField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if u.len() != n || v.len() != n {
            return Err(Error::Dimension(format!(
                "vector field {width}x{height} needs {n} values per component, got {} and {}",
                u.len(),
                v.len()
            )));
        }
        check_finite("vector field u", &u)?;
        check_finite("vector field v", &v)?;
        Ok(Self {
            width,
            height,
            u,
            v,
        })
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        assert!(
            u.is_finite() && v.is_finite(),
            "constant vector must be finite"
        );
        let n = width * height;
        Self {
            width,
            height,
            u: vec![u; n],
            v: vec![v; n],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    /// Panics if `f` returns a non-finite component.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let n = width * height;
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for y in 0..height {
            for x in 0..width {
                let (a, b) = f(x, y);
                assert!(
                    a.is_finite() && b.is_finite(),
                    "non-finite vector at ({x}, {y})"
                );
                u.push(a);
                v.push(b);
            }
        }
        Self {
            width,
            height,
            u,
            v,
        }
    }

    pub fn from_components(u: &ScalarField, v: &ScalarField) -> Result<Self> {
        same_shape(u.shape(), v.shape(), "vector field components")?;
        Ok(Self {
            width: u.width,
            height: u.height,
            u: u.data.clone(),
            v: v.data.clone(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn u_field(&self) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.u.clone(),
        }
    }

    pub fn v_field(&self) -> ScalarField {
        ScalarField {
            width: self.width,
            height: self.height,
            data: self.v.clone(),
        }
    }

    pub fn scale(&self, k: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.u.iter().map(|a| a * k).collect(),
            self.v.iter().map(|a| a * k).collect(),
        )
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape(self.shape(), other.shape(), "vector add")?;
        Self::new(
            self.width,
            self.height,
            self.u.iter().zip(&other.u).map(|(a, b)| a + b).collect(),
            self.v.iter().zip(&other.v).map(|(a, b)| a + b).collect(),
        )
    }

    /// Per-pixel Euclidean norm.
    pub fn magnitude(&self) -> ScalarField {
        let data = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| a.hypot(*b))
            .collect();
        ScalarField {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// `ln(img + eps)` per pixel. Intensities must be non-negative and `eps`
/// strictly positive.
pub fn log_transform(img: &ScalarField, eps: f64) -> Result<ScalarField> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!(
            "log epsilon must be positive and finite, got {eps}"
        )));
    }
    if let Some(i) = img.data.iter().position(|&a| a < 0.0) {
        return Err(Error::Domain(format!(
            "negative intensity {} at pixel ({}, {})",
            img.data[i],
            i % img.width,
            i / img.width
        )));
    }
    img.map(|a| (a + eps).ln())
}

/// Finite-difference gradient: central differences in the interior,
/// one-sided differences on the border rows and columns.
pub fn spatial_gradient(f: &ScalarField) -> Result<VectorField> {
    let (w, h) = f.shape();
    if w < 2 || h < 2 {
        return Err(Error::Dimension(format!(
            "gradient needs at least 2x2 pixels, got {w}x{h}"
        )));
    }
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            u[i] = if x == 0 {
                f.get(1, y) - f.get(0, y)
            } else if x == w - 1 {
                f.get(x, y) - f.get(x - 1, y)
            } else {
                (f.get(x + 1, y) - f.get(x - 1, y)) / 2.0
            };
            v[i] = if y == 0 {
                f.get(x, 1) - f.get(x, 0)
            } else if y == h - 1 {
                f.get(x, y) - f.get(x, y - 1)
            } else {
                (f.get(x, y + 1) - f.get(x, y - 1)) / 2.0
            };
        }
    }
    VectorField::new(w, h, u, v)
}

/// Pointwise inner product of two vector fields.
pub fn dot_field(g: &VectorField, w: &VectorField) -> Result<ScalarField> {
    same_shape(g.shape(), w.shape(), "dot_field")?;
    let data = (0..g.u.len())
        .map(|i| g.u[i] * w.u[i] + g.v[i] * w.v[i])
        .collect();
    ScalarField::new(g.width, g.height, data)
}
