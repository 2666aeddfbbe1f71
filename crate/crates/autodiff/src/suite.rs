//! Gradient checks of every primitive at random generic points.

use crate::check::grad_check;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst result of one primitive over all probed points.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub points: usize,
    pub coords: usize,
    pub max_rel_error: f64,
}

type Objective = fn(&Graph, &ParamStore) -> Result<Var>;

/// Values bounded away from zero so that relu, abs and friends are probed
/// at differentiable points.
fn generic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Sums `y` against fixed distinct weights so every element matters.
pub fn contract(g: &Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| ((i * 7919 % 23) as f64 - 11.0) / 10.0)
        .collect();
    let wv = g.constant(Tensor::new(&shape, w)?);
    Ok(g.sum(g.mul(y, wv)?))
}

fn p(g: &Graph, s: &ParamStore, name: &str) -> Result<Var> {
    g.param(s, name)
}

#[allow(clippy::type_complexity)]
fn cases() -> Vec<(&'static str, Vec<(&'static str, Vec<usize>)>, Objective)> {
    let ab = || vec![("a", vec![2, 3]), ("b", vec![2, 3])];
    let a = || vec![("a", vec![3, 4])];
    let img = || vec![("x", vec![2, 2, 4, 6])];
    vec![
        ("add", ab(), |g, s| {
            contract(g, g.add(p(g, s, "a")?, p(g, s, "b")?)?)
        }),
        ("sub", ab(), |g, s| {
            contract(g, g.sub(p(g, s, "a")?, p(g, s, "b")?)?)
        }),
        ("mul", ab(), |g, s| {
            contract(g, g.mul(p(g, s, "a")?, p(g, s, "b")?)?)
        }),
        ("scale", a(), |g, s| {
            contract(g, g.scale(p(g, s, "a")?, -2.5))
        }),
        ("add_scalar", a(), |g, s| {
            contract(g, g.add_scalar(p(g, s, "a")?, 0.3))
        }),
        ("relu", a(), |g, s| contract(g, g.relu(p(g, s, "a")?))),
        ("leaky_relu", a(), |g, s| {
            contract(g, g.leaky_relu(p(g, s, "a")?, 0.2))
        }),
        ("tanh", a(), |g, s| contract(g, g.tanh(p(g, s, "a")?))),
        ("abs", a(), |g, s| contract(g, g.abs(p(g, s, "a")?))),
        ("max_with_scalar", a(), |g, s| {
            contract(g, g.max_with_scalar(p(g, s, "a")?, 0.05))
        }),
        ("sqrt", a(), |g, s| {
            let x = p(g, s, "a")?;
            contract(g, g.sqrt(g.mul(x, x)?)?)
        }),
        ("recip", a(), |g, s| contract(g, g.recip(p(g, s, "a")?)?)),
        ("mean", a(), |g, s| {
            let x = p(g, s, "a")?;
            Ok(g.mean(g.mul(x, x)?))
        }),
        ("sum", a(), |g, s| {
            let x = p(g, s, "a")?;
            Ok(g.sum(g.tanh(x)))
        }),
        ("max_per_item", img(), |g, s| {
            contract(g, g.max_per_item(p(g, s, "x")?)?)
        }),
        (
            "scale_per_item",
            vec![("x", vec![2, 2, 4, 6]), ("k", vec![2])],
            |g, s| contract(g, g.scale_per_item(p(g, s, "x")?, p(g, s, "k")?)?),
        ),
        (
            "matmul",
            vec![("x", vec![3, 4]), ("w", vec![4, 2])],
            |g, s| contract(g, g.matmul(p(g, s, "x")?, p(g, s, "w")?)?),
        ),
        (
            "add_bias",
            vec![("x", vec![2, 3, 2, 2]), ("b", vec![3])],
            |g, s| contract(g, g.add_bias(p(g, s, "x")?, p(g, s, "b")?)?),
        ),
        (
            "conv2d",
            vec![("x", vec![2, 2, 5, 4]), ("w", vec![3, 2, 3, 3])],
            |g, s| contract(g, g.conv2d(p(g, s, "x")?, p(g, s, "w")?, 1)?),
        ),
        (
            "conv2d_stride2",
            vec![("x", vec![2, 2, 5, 4]), ("w", vec![3, 2, 3, 3])],
            |g, s| contract(g, g.conv2d(p(g, s, "x")?, p(g, s, "w")?, 2)?),
        ),
        (
            "softmax_cross_entropy",
            vec![("logits", vec![3, 4])],
            |g, s| g.softmax_cross_entropy(p(g, s, "logits")?, &[0, 3, 1]),
        ),
        ("avg_pool2d", img(), |g, s| {
            contract(g, g.avg_pool2d(p(g, s, "x")?)?)
        }),
        ("global_avg_pool", img(), |g, s| {
            contract(g, g.global_avg_pool(p(g, s, "x")?)?)
        }),
        ("upsample_nearest2", img(), |g, s| {
            contract(g, g.upsample_nearest2(p(g, s, "x")?)?)
        }),
        (
            "concat_channels",
            vec![("a", vec![2, 3, 2, 2]), ("b", vec![2, 1, 2, 2])],
            |g, s| contract(g, g.concat_channels(&[p(g, s, "a")?, p(g, s, "b")?])?),
        ),
        ("slice_channels", vec![("a", vec![2, 3, 2, 2])], |g, s| {
            contract(g, g.slice_channels(p(g, s, "a")?, 1, 2)?)
        }),
        ("broadcast_spatial", vec![("z", vec![2, 3])], |g, s| {
            contract(g, g.broadcast_spatial(p(g, s, "z")?, 3, 2)?)
        }),
        ("reshape", vec![("a", vec![2, 3, 2, 2])], |g, s| {
            contract(g, g.reshape(p(g, s, "a")?, &[2, 12])?)
        }),
        (
            "charbonnier_smoothness",
            vec![("flow", vec![2, 2, 4, 5])],
            |g, s| g.charbonnier_smoothness(p(g, s, "flow")?, 0.45, 1e-3),
        ),
    ]
}

/// Runs every primitive at `points` random generic points drawn from
/// `seed`, checking all coordinates with central differences of step `h`.
pub fn primitive_suite(seed: u64, points: usize, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, params, f) in cases() {
        let mut worst = PrimitiveCheck {
            name,
            points,
            coords: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..points {
            let mut s = ParamStore::new();
            for (pname, shape) in &params {
                s.insert(pname, generic(&mut rng, shape))?;
            }
            let r = grad_check(&s, h, f)?;
            worst.coords += r.coords_checked;
            worst.max_rel_error = worst.max_rel_error.max(r.max_rel_error);
        }
        out.push(worst);
    }
    Ok(out)
}
