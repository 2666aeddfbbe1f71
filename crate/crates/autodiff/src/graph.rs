//! Define-by-run tape.
//!
//! A [`Graph`] records every primitive applied during the forward pass as
//! a node holding its value and the handles of its inputs. Nodes are
//! appended in execution order, so the tape is always topologically
//! sorted; [`Graph::backward`] walks it once in reverse and visits each
//! node at most once.
//!
//! Shape errors are reported when an operation is recorded, not during the
//! backward pass.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

/// Handle of a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    MaxScalar(Var, f64),
    Sqrt(Var),
    Recip(Var),
    MaxPerItem {
        x: Var,
        argmax: Vec<usize>,
    },
    ScalePerItem(Var, Var),
    Mean(Var),
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    BroadcastSpatial(Var),
    Reshape(Var),
    Charbonnier {
        flow: Var,
        alpha: f64,
        eps: f64,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<(String, Var)>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when no path with
    /// gradient tracking connects them.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn dims4(t: &Tensor, op: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::Dimension(format!(
            "{op} needs a [B, C, H, W] input, got {s:?}"
        ))),
    }
}

fn same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn charbonnier_rho(r: f64, alpha: f64, eps: f64) -> f64 {
    (eps.powf(alpha) + r.powf(alpha)).powf(1.0 / alpha)
}

/// `dρ/dr`; zero at `r = 0` where the one-sided derivative diverges.
fn charbonnier_drho(r: f64, alpha: f64, eps: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    r.powf(alpha - 1.0) * (eps.powf(alpha) + r.powf(alpha)).powf(1.0 / alpha - 1.0)
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    /// Owned copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.val(v).as_ref().clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.val(v).shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.val(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Input without gradient tracking.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input with gradient tracking that is not a stored parameter.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter of `store` as a tracked leaf.
    pub fn param(&self, store: &ParamStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.leaf(t);
        self.params.borrow_mut().push((name.to_string(), v));
        Ok(v)
    }

    /// Parameter bindings recorded so far, in binding order.
    pub fn bound_params(&self) -> Vec<(String, Var)> {
        self.params.borrow().clone()
    }

    /// Same value, cut from the tape: no gradient flows through the result.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.val(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(nodes.len() - 1)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let x = self.val(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        self.push(Tensor::from_parts(x.shape().to_vec(), data), op, self.ng(a))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        same(&x, &y, name)?;
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            op,
            self.ng(a) || self.ng(b),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, |v| v * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        self.unary(a, |v| v + k, Op::AddScalar(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[M, K] x [K, N]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a), self.val(b));
        let (m, k, k2, n) = match (x.shape(), y.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (s, t) => {
                return Err(Error::Dimension(format!(
                    "matmul needs 2-D operands, got {s:?} and {t:?}"
                )))
            }
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents {k} vs {k2}"
            )));
        }
        let data = kernels::matmul(x.data(), y.data(), m, k, n);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(a, b),
            self.ng(a) || self.ng(b),
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.val(a), self.val(bias));
        if x.rank() < 2 || b.shape() != [x.shape()[1]] {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match channels of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, plane) in data.chunks_mut(inner.max(1)).enumerate() {
            let bias = b.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bias);
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddBias(a, bias),
            self.ng(a) || self.ng(bias),
        ))
    }

    /// Zero-padded "same" convolution with an odd square kernel
    /// `[C_out, C_in, k, k]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xt, wt) = (self.val(x), self.val(w));
        let [batch, c_in, h, wd] = dims4(&xt, "conv2d")?;
        let [c_out, c_in_w, k, k2] = dims4(&wt, "conv2d kernel")?;
        if c_in != c_in_w {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c_in} channels, kernel expects {c_in_w}"
            )));
        }
        if k != k2 || k % 2 == 0 || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d needs an odd square kernel and stride >= 1, got {k}x{k2} / {stride}"
            )));
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
        };
        let data = kernels::conv2d(&geom, xt.data(), wt.data());
        let shape = vec![batch, c_out, geom.h_out(), geom.w_out()];
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Conv2d { x, w, geom },
            self.ng(x) || self.ng(w),
        ))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `max(a, c)` elementwise.
    pub fn max_with_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v.max(c), Op::MaxScalar(a, c))
    }

    /// Elementwise square root; inputs must be non-negative. The derivative
    /// at zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).data().iter().find(|v| **v < 0.0) {
            return Err(Error::Usage(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// Elementwise `1 / a`; inputs must be nonzero.
    pub fn recip(&self, a: Var) -> Result<Var> {
        if self.val(a).data().contains(&0.0) {
            return Err(Error::Usage("reciprocal of zero".into()));
        }
        Ok(self.unary(a, f64::recip, Op::Recip(a)))
    }

    /// Largest element of every batch item: `[B, ...] -> [B]`. The gradient
    /// goes to the first maximal element.
    pub fn max_per_item(&self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let b = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("max_per_item on a scalar".into()))?;
        let per = x.numel() / b.max(1);
        if per == 0 {
            return Err(Error::Dimension(format!(
                "max_per_item over empty items of {:?}",
                x.shape()
            )));
        }
        let mut argmax = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        for (i, item) in x.data().chunks(per).enumerate() {
            let (j, m) = item
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                });
            argmax.push(i * per + j);
            out.push(m);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b], out),
            Op::MaxPerItem { x: a, argmax },
            self.ng(a),
        ))
    }

    /// Multiplies every element of batch item `i` by `s[i]`; `s` has shape `[B]`.
    pub fn scale_per_item(&self, a: Var, s: Var) -> Result<Var> {
        let (x, k) = (self.val(a), self.val(s));
        let b = x.shape().first().copied().unwrap_or(0);
        if k.shape() != [b] || b == 0 {
            return Err(Error::Dimension(format!(
                "per-item scale {:?} for {:?}",
                k.shape(),
                x.shape()
            )));
        }
        let per = x.numel() / b;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * k.data()[i / per])
            .collect();
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::ScalePerItem(a, s),
            self.ng(a) || self.ng(s),
        ))
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.val(a);
        let m = x.data().iter().sum::<f64>() / x.numel().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), self.ng(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let x = self.val(a);
        self.push(
            Tensor::scalar(x.data().iter().sum()),
            Op::Sum(a),
            self.ng(a),
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `[B, K]` logits.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.val(logits);
        let (b, k) = match *x.shape() {
            [b, k] => (b, k),
            ref s => {
                return Err(Error::Dimension(format!(
                    "cross entropy needs [B, K] logits, got {s:?}"
                )))
            }
        };
        if labels.len() != b {
            return Err(Error::Dimension(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Usage(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - m).exp() / z;
            }
            loss += m + z.ln() - row[labels[i]];
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / b as f64), op, self.ng(logits)))
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_pool2d(&self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let [b, c, h, w] = dims4(&x, "avg_pool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "avg_pool2d needs even extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * ho * wo];
        let src = x.data();
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = p * h * w + 2 * y * w + 2 * xx;
                    out[p * ho * wo + y * wo + xx] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, ho, wo], out),
            Op::AvgPool2(a),
            self.ng(a),
        ))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let [b, c, h, w] = dims4(&x, "global_avg_pool")?;
        let hw = h * w;
        let out = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![b, c], out),
            Op::GlobalAvgPool(a),
            self.ng(a),
        ))
    }

    /// Nearest-neighbour upsampling by two in both spatial axes.
    pub fn upsample_nearest2(&self, a: Var) -> Result<Var> {
        let x = self.val(a);
        let [b, c, h, w] = dims4(&x, "upsample")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * ho * wo];
        let src = x.data();
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[p * ho * wo + y * wo + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, ho, wo], out),
            Op::Upsample2(a),
            self.ng(a),
        ))
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.val(p)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        if first.rank() < 2 {
            return Err(Error::Dimension("concat needs rank >= 2".into()));
        }
        let b = first.shape()[0];
        let rest = &first.shape()[2..];
        let inner: usize = rest.iter().product();
        let mut channels = 0;
        for v in &vals {
            if v.rank() != first.rank() || v.shape()[0] != b || &v.shape()[2..] != rest {
                return Err(Error::Dimension(format!(
                    "concat: {:?} vs {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            channels += v.shape()[1];
        }
        let mut out = Vec::with_capacity(b * channels * inner);
        for i in 0..b {
            for v in &vals {
                let per = v.shape()[1] * inner;
                out.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = channels;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec()),
            ng,
        ))
    }

    /// Channels `[start, start + len)` of axis 1.
    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.val(a);
        if x.rank() < 2 || start + len > x.shape()[1] {
            return Err(Error::Dimension(format!(
                "channel slice {start}..{} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = Vec::with_capacity(b * len * inner);
        for i in 0..b {
            out.extend_from_slice(
                &x.data()[(i * c + start) * inner..(i * c + start + len) * inner],
            );
        }
        let mut shape = x.shape().to_vec();
        shape[1] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SliceChannels { x: a, start },
            self.ng(a),
        ))
    }

    /// `[B, C] -> [B, C, h, w]` by repetition over space.
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.val(a);
        let (b, c) = match *x.shape() {
            [b, c] => (b, c),
            ref s => {
                return Err(Error::Dimension(format!(
                    "broadcast_spatial needs [B, C], got {s:?}"
                )))
            }
        };
        let mut out = Vec::with_capacity(b * c * h * w);
        for &v in x.data() {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::BroadcastSpatial(a),
            self.ng(a),
        ))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.val(a);
        let t = x.as_ref().clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), self.ng(a)))
    }

    /// Sum over batch items, pixels and in-bounds 8-neighbours of
    /// `ρ(|v_x - v_y|)` with `ρ(r) = (ε^α + r^α)^(1/α)`, for `[B, 2, H, W]`
    /// flow.
    pub fn charbonnier_smoothness(&self, flow: Var, alpha: f64, eps: f64) -> Result<Var> {
        let f = self.val(flow);
        let [b, c, h, w] = dims4(&f, "charbonnier")?;
        if c != 2 {
            return Err(Error::Dimension(format!(
                "charbonnier needs 2 flow channels, got {c}"
            )));
        }
        let d = f.data();
        let mut total = 0.0;
        for_each_pair(b, h, w, |i, j, (u_off, v_off)| {
            let du = d[u_off + i] - d[u_off + j];
            let dv = d[v_off + i] - d[v_off + j];
            total += charbonnier_rho(du.hypot(dv), alpha, eps);
        });
        Ok(self.push(
            Tensor::scalar(total),
            Op::Charbonnier { flow, alpha, eps },
            self.ng(flow),
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = nodes
            .get(root.0)
            .ok_or_else(|| Error::Usage("root is not on this tape".into()))?;
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if root_node.needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Calls `f(i, j, (u_base, v_base))` for every ordered in-bounds
/// neighbour pair of every batch item, with `i`, `j` pixel offsets inside
/// a channel plane.
fn for_each_pair(b: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, (usize, usize))) {
    let plane = h * w;
    for n in 0..b {
        let bases = (n * 2 * plane, n * 2 * plane + plane);
        for y in 0..h as isize {
            for x in 0..w as isize {
                for (dx, dy) in NEIGHBORS_8 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    f(
                        (y * w as isize + x) as usize,
                        (ny * w as isize + nx) as usize,
                        bases,
                    );
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: Vec<f64>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_ref();
    let ng = |v: Var| nodes[v.0].needs_grad;
    let elementwise = |a: Var, d: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        val(a)
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &gi)| d(x, gi))
            .collect()
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if ng(*a) {
                accumulate(
                    grads,
                    nodes,
                    *a,
                    y.data().iter().zip(g).map(|(p, q)| p * q).collect(),
                );
            }
            if ng(*b) {
                accumulate(
                    grads,
                    nodes,
                    *b,
                    x.data().iter().zip(g).map(|(p, q)| p * q).collect(),
                );
            }
        }
        Op::Scale(a, k) => accumulate(grads, nodes, *a, g.iter().map(|x| x * k).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, nodes, *a, g.to_vec()),
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            let (da, db) = kernels::matmul_backward(x.data(), y.data(), g, m, k, n);
            accumulate(grads, nodes, *a, da);
            accumulate(grads, nodes, *b, db);
        }
        Op::AddBias(a, bias) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if ng(*bias) {
                let x = val(*a);
                let c = x.shape()[1];
                let inner: usize = x.shape()[2..].iter().product();
                let mut db = vec![0.0; c];
                for (i, plane) in g.chunks(inner.max(1)).enumerate() {
                    db[i % c] += plane.iter().sum::<f64>();
                }
                accumulate(grads, nodes, *bias, db);
            }
        }
        Op::Conv2d { x, w, geom } => {
            let (dx, dw) =
                kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g, ng(*x));
            if ng(*x) {
                accumulate(grads, nodes, *x, dx);
            }
            accumulate(grads, nodes, *w, dw);
        }
        Op::Relu(a) => {
            let d = elementwise(*a, &|x, gi| if x > 0.0 { gi } else { 0.0 });
            accumulate(grads, nodes, *a, d);
        }
        Op::LeakyRelu(a, s) => {
            let s = *s;
            let d = elementwise(*a, &|x, gi| if x > 0.0 { gi } else { s * gi });
            accumulate(grads, nodes, *a, d);
        }
        Op::Tanh(a) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(y, gi)| (1.0 - y * y) * gi)
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Abs(a) => {
            let d = elementwise(*a, &|x, gi| {
                if x > 0.0 {
                    gi
                } else if x < 0.0 {
                    -gi
                } else {
                    0.0
                }
            });
            accumulate(grads, nodes, *a, d);
        }
        Op::MaxScalar(a, c) => {
            let c = *c;
            let d = elementwise(*a, &|x, gi| if x > c { gi } else { 0.0 });
            accumulate(grads, nodes, *a, d);
        }
        Op::Sqrt(a) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(y, gi)| if *y > 0.0 { 0.5 * gi / y } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Recip(a) => {
            let d = node
                .value
                .data()
                .iter()
                .zip(g)
                .map(|(y, gi)| -gi * y * y)
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::MaxPerItem { x, argmax } => {
            let mut d = vec![0.0; val(*x).numel()];
            for (&j, gi) in argmax.iter().zip(g) {
                d[j] += gi;
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::ScalePerItem(a, s) => {
            let (x, k) = (val(*a), val(*s));
            let per = x.numel() / k.numel();
            if ng(*a) {
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * k.data()[i / per])
                    .collect();
                accumulate(grads, nodes, *a, d);
            }
            if ng(*s) {
                let d = g
                    .chunks(per)
                    .zip(x.data().chunks(per))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(p, q)| p * q).sum())
                    .collect();
                accumulate(grads, nodes, *s, d);
            }
        }
        Op::Mean(a) => {
            let n = val(*a).numel();
            accumulate(grads, nodes, *a, vec![g[0] / n.max(1) as f64; n]);
        }
        Op::Sum(a) => {
            let n = val(*a).numel();
            accumulate(grads, nodes, *a, vec![g[0]; n]);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let b = labels.len();
            let k = probs.len() / b;
            let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b as f64).collect();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= g[0] / b as f64;
            }
            accumulate(grads, nodes, *logits, d);
        }
        Op::AvgPool2(a) => {
            let x = val(*a);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut d = vec![0.0; x.numel()];
            for p in 0..x.shape()[0] * x.shape()[1] {
                for y in 0..ho {
                    for xx in 0..wo {
                        let gi = 0.25 * g[p * ho * wo + y * wo + xx];
                        let base = p * h * w + 2 * y * w + 2 * xx;
                        d[base] += gi;
                        d[base + 1] += gi;
                        d[base + w] += gi;
                        d[base + w + 1] += gi;
                    }
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let hw = x.shape()[2] * x.shape()[3];
            let d = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi / hw as f64, hw))
                .collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Upsample2(a) => {
            let x = val(*a);
            let (h, w) = (x.shape()[2], x.shape()[3]);
            let (ho, wo) = (2 * h, 2 * w);
            let mut d = vec![0.0; x.numel()];
            for p in 0..x.shape()[0] * x.shape()[1] {
                for y in 0..ho {
                    for xx in 0..wo {
                        d[p * h * w + (y / 2) * w + xx / 2] += g[p * ho * wo + y * wo + xx];
                    }
                }
            }
            accumulate(grads, nodes, *a, d);
        }
        Op::Concat(parts) => {
            let out_shape = node.value.shape();
            let b = out_shape[0];
            let inner: usize = out_shape[2..].iter().product();
            let total = out_shape[1] * inner;
            let mut offset = 0;
            for &p in parts {
                let per = val(p).shape()[1] * inner;
                if ng(p) {
                    let mut d = Vec::with_capacity(b * per);
                    for i in 0..b {
                        d.extend_from_slice(&g[i * total + offset..i * total + offset + per]);
                    }
                    accumulate(grads, nodes, p, d);
                }
                offset += per;
            }
        }
        Op::SliceChannels { x, start } => {
            let xs = val(*x).shape();
            let (b, c) = (xs[0], xs[1]);
            let inner: usize = xs[2..].iter().product();
            let len = node.value.shape()[1];
            let mut d = vec![0.0; b * c * inner];
            for i in 0..b {
                let dst = (i * c + start) * inner;
                d[dst..dst + len * inner]
                    .copy_from_slice(&g[i * len * inner..(i + 1) * len * inner]);
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::BroadcastSpatial(a) => {
            let s = node.value.shape();
            let hw = s[2] * s[3];
            let d = g.chunks(hw).map(|c| c.iter().sum()).collect();
            accumulate(grads, nodes, *a, d);
        }
        Op::Charbonnier { flow, alpha, eps } => {
            let f = val(*flow);
            let [b, _, h, w] = dims4(f, "charbonnier").expect("checked at record time");
            let data = f.data();
            let mut d = vec![0.0; data.len()];
            let (alpha, eps) = (*alpha, *eps);
            for_each_pair(b, h, w, |i, j, (u_off, v_off)| {
                let du = data[u_off + i] - data[u_off + j];
                let dv = data[v_off + i] - data[v_off + j];
                let r = du.hypot(dv);
                if r == 0.0 {
                    return;
                }
                let k = g[0] * charbonnier_drho(r, alpha, eps) / r;
                d[u_off + i] += k * du;
                d[u_off + j] -= k * du;
                d[v_off + i] += k * dv;
                d[v_off + j] -= k * dv;
            });
            accumulate(grads, nodes, *flow, d);
        }
    }
}
