//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn eval_many<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}

/// As [`grad_check`], over several input tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars)?;
    if !tape.scalar_value(out).is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], x.len());
        for i in 0..x.len() {
            let orig = x.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval_many(&f, &work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval_many(&f, &work)?;
            work[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Gradient check over the parameters of a model. When `max_coords` is set, a
/// random subset of that many coordinates is checked.
pub fn grad_check_params<F, R>(
    store: &ParamStore,
    f: F,
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&Bound<'_>) -> Result<Var>,
    R: Rng + ?Sized,
{
    check_eps(eps)?;
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = s.bind(&tape);
        let out = f(&bound)?;
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = f(&bound)?;
    let grads = tape.backward(out)?;
    let analytic = bound.grads(&grads, store);

    let coords: Vec<(usize, usize)> = store
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match max_coords {
        Some(m) if m < coords.len() => sample(rng, coords.len(), m).into_iter().map(|i| coords[i]).collect(),
        _ => coords,
    };

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for (k, i) in chosen {
        let orig = store.tensors()[k].data()[i];
        work.tensors_mut()[k].data_mut()[i] = orig + eps;
        let up = eval(&work)?;
        work.tensors_mut()[k].data_mut()[i] = orig - eps;
        let down = eval(&work)?;
        work.tensors_mut()[k].data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[k][i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}
