//! Finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use rand::seq::index::sample;
use rand::Rng;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest `|a - n| / max(1, |a|, |n|)` over the probed coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates left out because a kink (relu, abs, max) lies within
    /// the step, so the difference quotient had not converged.
    pub coords_skipped: usize,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let shape = g.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar objective, got shape {shape:?}"
        )));
    }
    Ok(g.item(out))
}

/// Relative disagreement above which the quotient is recomputed with a
/// tenfold smaller step.
const RETRY_ABOVE: f64 = 1e-7;
/// Largest change between the two quotients for a smooth coordinate. For
/// smooth objectives the central quotient moves by O(h^2); a kink inside
/// the step moves it by a sizable fraction of the slope jump.
const CONVERGED: f64 = 1e-5;

fn central<F>(work: &mut ParamStore, name: &str, i: usize, orig: f64, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    work.get_mut(name).expect("present").data_mut()[i] = orig + h;
    let up = eval(work, f)?;
    work.get_mut(name).expect("present").data_mut()[i] = orig - h;
    let down = eval(work, f)?;
    work.get_mut(name).expect("present").data_mut()[i] = orig;
    Ok((up - down) / (2.0 * h))
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h`. `order` lists candidate `(name, index)`
/// coordinates; probing stops once `wanted` smooth ones were checked.
fn check_with<F>(
    store: &ParamStore,
    h: f64,
    f: &F,
    order: Vec<(String, usize)>,
    wanted: usize,
) -> Result<GradCheck>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&g, &grads)?;

    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_skipped: 0,
        worst: None,
    };
    for (name, i) in order {
        if report.coords_checked == wanted {
            break;
        }
        let a = analytic.grad(&name).expect("zeroed above")[i];
        let orig = store.get(&name).expect("present").data()[i];
        let coarse = central(&mut work, &name, i, orig, h, f)?;
        let mut e = rel(a, coarse);
        if e > RETRY_ABOVE {
            let fine = central(&mut work, &name, i, orig, h / 10.0, f)?;
            if rel(coarse, fine) > CONVERGED {
                report.coords_skipped += 1;
                continue;
            }
            e = e.min(rel(a, fine));
        }
        report.coords_checked += 1;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = e;
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let order: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let n = order.len();
    check_with(store, h, &f, order, n)
}

/// Checks `total` coordinates drawn uniformly without replacement from the
/// concatenation of all parameters, drawing replacements for skipped ones.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    h: f64,
    total: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let flat: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    let order = sample(rng, flat.len(), flat.len())
        .into_iter()
        .map(|c| flat[c].clone())
        .collect();
    check_with(store, h, &f, order, total.min(flat.len()))
}
