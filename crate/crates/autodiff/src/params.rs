//! Named trainable parameters, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout: the magic bytes `EVBR1`, then for every parameter in
//! store order its name length (u64 LE), the UTF-8 name, the rank (u64 LE),
//! each extent (u64 LE) and the values as raw little-endian f64. Records
//! run until end of file.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"EVBR1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Usage(format!("duplicate parameter name '{name}'")));
        }
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    /// Kaiming-style uniform init: values in `±sqrt(6 / fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.params.iter().find(|p| p.name == name)?.grad.as_deref()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Number of Adam steps taken.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(vec![0.0; p.value.numel()]);
        }
    }

    /// Adds the gradients of every parameter bound on `graph`. Parameters
    /// with no path to the root receive nothing.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for (name, var) in graph.bound_params() {
            let Some(g) = grads.raw(var) else { continue };
            let p = self
                .params
                .iter_mut()
                .find(|p| p.name == name)
                .ok_or_else(|| {
                    Error::Usage(format!("graph binds '{name}' which is not in this store"))
                })?;
            let slot = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// One Adam update of every parameter from its accumulated gradient.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Usage(format!(
                "parameter '{}' has no gradient; call zero_grads first",
                p.name
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.as_ref().expect("checked above");
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                *x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Appends every parameter of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            self.insert(&format!("{prefix}{}", p.name), p.value.clone())?;
        }
        Ok(())
    }

    /// Parameters whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for p in &self.params {
            if let Some(rest) = p.name.strip_prefix(prefix) {
                out.insert(rest, p.value.clone())?;
            }
        }
        Ok(out)
    }

    /// Overwrites values from `other`; names and shapes must match exactly.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter '{}'", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    src.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u64).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.rank() as u64).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let len = cur.u64()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u64()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!(
                    "parameter '{name}' has implausible rank {rank}"
                )));
            }
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| {
                    Error::Format(format!(
                        "parameter '{name}' shape {shape:?} exceeds the file"
                    ))
                })?;
            let raw = cur.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("parameter '{name}': {e}")))?;
            store
                .insert(&name, t)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::scalar(0.5)).unwrap();
        s
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = store();
        assert!(matches!(
            s.insert("w", Tensor::scalar(1.0)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let s = store();
        let mut a = Vec::new();
        s.write_checkpoint(&mut a).unwrap();
        let back = ParamStore::read_checkpoint(&a[..]).unwrap();
        let mut b = Vec::new();
        back.write_checkpoint(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.get("w"), s.get("w"));
        assert_eq!(&a[..5], b"EVBR1");
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let mut a = Vec::new();
        store().write_checkpoint(&mut a).unwrap();
        for cut in [3, 12, a.len() - 1] {
            assert!(
                matches!(
                    ParamStore::read_checkpoint(&a[..cut]),
                    Err(Error::Format(_))
                ),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = store();
        s.zero_grads();
        for p in &mut s.params {
            p.grad = Some(
                p.value
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, _)| if i % 2 == 0 { 3.0 } else { -0.01 })
                    .collect(),
            );
        }
        let before = s.get("w").unwrap().clone();
        s.adam_step(&AdamConfig::default()).unwrap();
        for (i, (a, b)) in before
            .data()
            .iter()
            .zip(s.get("w").unwrap().data())
            .enumerate()
        {
            let expect = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!((b - a - expect).abs() < 1e-9, "{i}: {}", b - a);
        }
    }

    #[test]
    fn adam_needs_gradients() {
        let mut s = store();
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(Error::Usage(_))
        ));
    }
}
