//! Shared/unique feature decomposition and missing-modality completion.
//!
//! Every modality feature `x_m` is encoded by a shared encoder and a unique
//! encoder (the same two networks for all modalities). A missing modality gets
//! its shared feature from the mean of the sample's available shared features
//! and its unique feature from the batch mean over samples that have it. The
//! projection `x_m' = f_pro([r_share | r_unique]) + x_m` feeds the graph
//! reasoning stage.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Linear, Mlp, ParamStore, Tape, Tensor, Var};

/// Indices of missing and complete samples for one modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MissingMask {
    pub missing: Vec<usize>,
    pub complete: Vec<usize>,
}

impl MissingMask {
    pub fn none(n: usize) -> Self {
        Self { missing: vec![], complete: (0..n).collect() }
    }

    pub fn from_missing(n: usize, mut missing: Vec<usize>) -> Result<Self> {
        missing.sort_unstable();
        missing.dedup();
        if missing.last().is_some_and(|&i| i >= n) {
            return Err(Error::invalid(format!("missing index outside 0..{n}")));
        }
        let complete = (0..n).filter(|i| missing.binary_search(i).is_err()).collect();
        Ok(Self { missing, complete })
    }

    pub fn len(&self) -> usize {
        self.missing.len() + self.complete.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Presence flag per sample.
    pub fn present(&self) -> Vec<bool> {
        let mut out = vec![true; self.len()];
        for &i in &self.missing {
            out[i] = false;
        }
        out
    }
}

/// `floor(n * alpha)`, tolerant of products like `10 * 0.7 = 7.000000000000001`
/// and `100 * 0.29 = 28.999999999999996`.
pub fn missing_count(n: usize, alpha: f64) -> usize {
    ((n as f64 * alpha) + 1e-9).floor() as usize
}

/// Draws `floor(n * alpha)` distinct missing samples uniformly without replacement.
pub fn mark_missing<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<MissingMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = missing_count(n, alpha).min(n);
    MissingMask::from_missing(n, sample(rng, n, k).into_vec())
}

/// `(r_z + r_s) / 2`.
pub fn complete_shared_audio(r_share_z: &Tensor, r_share_s: &Tensor) -> Result<Tensor> {
    complete_shared_general(&[r_share_z.clone(), r_share_s.clone()])
}

/// Mean of the available shared features.
pub fn complete_shared_general(available: &[Tensor]) -> Result<Tensor> {
    let first = available.first().ok_or_else(|| Error::invalid("no shared feature to complete from"))?;
    if available.iter().any(|a| a.shape() != first.shape()) {
        return Err(Error::shape("complete_shared", "sources differ in shape"));
    }
    let t = Tape::new();
    let vars: Vec<Var> = available.iter().map(|a| t.constant(a.clone())).collect();
    Ok(t.to_tensor(mean_of(&t, &vars)?))
}

fn mean_of(t: &Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = t.add(acc, v)?;
    }
    if vars.len() == 1 {
        Ok(acc)
    } else {
        t.scale(acc, 1.0 / vars.len() as f64)
    }
}

/// Column mean of the unique features of complete samples.
pub fn complete_unique(unique_complete: &Tensor) -> Result<Tensor> {
    let (n, d) = unique_complete.dims2()?;
    if n == 0 {
        return Err(Error::invalid("no complete sample to take unique features from"));
    }
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(unique_complete.row_slice(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::matrix(1, d, out)
}

/// Sum over ordered modality pairs of the L1 distance, summed over the batch.
pub fn share_loss_on_tape(t: &Tape, a: Var, z: Var, s: Var) -> Result<Var> {
    let l1 = |x: Var, y: Var| -> Result<Var> { t.sum(t.abs(t.sub(x, y)?)?) };
    let sum = t.add(t.add(l1(a, z)?, l1(a, s)?)?, l1(z, s)?)?;
    t.scale(sum, 2.0)
}

pub fn share_loss(a: &Tensor, z: &Tensor, s: &Tensor) -> Result<f64> {
    let t = Tape::new();
    let c = |x: &Tensor| t.constant(x.clone());
    Ok(t.scalar_value(share_loss_on_tape(&t, c(a), c(z), c(s))?))
}

pub fn imlm_loss(unique_loss: f64, share_loss: f64) -> f64 {
    unique_loss + share_loss
}

/// `log(1 + exp(x))` without overflow.
fn softplus(t: &Tape, x: Var) -> Result<Var> {
    let tail = t.log(t.add_scalar(t.exp(t.neg(t.abs(x)?)?)?, 1.0)?)?;
    t.add(t.relu(x)?, tail)
}

/// Mean binary cross-entropy of logits against 0/1 targets.
pub fn bce_with_logits(t: &Tape, logits: Var, targets: &Tensor) -> Result<Var> {
    let y = t.constant(targets.clone());
    t.mean(t.sub(softplus(t, logits)?, t.mul(y, logits)?)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImlmParams {
    pub shared: Mlp,
    pub unique: Mlp,
    /// `2 d_r -> d`, output layer starts at zero.
    pub projection: Mlp,
    /// One-vs-rest modality heads on unique features.
    pub modal: Linear,
    pub feat_dim: usize,
    pub repr_dim: usize,
}

impl ImlmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, feat_dim: usize, repr_dim: usize, rng: &mut R) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            shared: Mlp::new(store, &name("shared"), feat_dim, repr_dim, repr_dim, rng)?,
            unique: Mlp::new(store, &name("unique"), feat_dim, repr_dim, repr_dim, rng)?,
            projection: Mlp::zero_output(store, &name("projection"), 2 * repr_dim, feat_dim, feat_dim, rng)?,
            modal: Linear::new(store, &name("modal"), repr_dim, 3, rng)?,
            feat_dim,
            repr_dim,
        })
    }
}

pub fn encode_shared(p: &Bound<'_>, params: &ImlmParams, x: Var) -> Result<Var> {
    params.shared.forward(p, x)
}

pub fn encode_unique(p: &Bound<'_>, params: &ImlmParams, x: Var) -> Result<Var> {
    params.unique.forward(p, x)
}

/// `f_pro([r_share | r_unique]) + x`.
pub fn project_residual(p: &Bound<'_>, params: &ImlmParams, r_share: Var, r_unique: Var, x: Var) -> Result<Var> {
    let t = p.tape;
    t.add(params.projection.forward(p, t.hcat(&[r_share, r_unique])?)?, x)
}

/// Mean one-vs-rest cross-entropy of the modality heads on unique features
/// `r_unique` whose true modality indices are `tags`.
pub fn unique_loss(p: &Bound<'_>, params: &ImlmParams, r_unique: Var, tags: &[usize]) -> Result<Var> {
    let t = p.tape;
    let n = t.shape(r_unique).0;
    if n == 0 || tags.len() != n || tags.iter().any(|&m| m >= 3) {
        return Err(Error::invalid(format!("{} tags for {n} unique features", tags.len())));
    }
    let mut y = vec![0.0; n * 3];
    for (i, &m) in tags.iter().enumerate() {
        y[i * 3 + m] = 1.0;
    }
    let logits = params.modal.forward(p, r_unique)?;
    bce_with_logits(t, logits, &Tensor::matrix(n, 3, y)?)
}

/// Result of the completion stage for one batch.
pub struct ImlmOutput {
    /// Projected features per modality, `N x d`.
    pub projected: [Var; 3],
    pub r_share: [Var; 3],
    pub r_unique: [Var; 3],
    pub unique_loss: Var,
    pub share_loss: Var,
}

/// Encodes present modalities, completes missing ones and projects all three.
/// `features[m]` is `N x d`; rows where `present[m][i]` is false are never encoded.
pub fn complete_and_project(
    p: &Bound<'_>,
    params: &ImlmParams,
    features: [Var; 3],
    present: [&[bool]; 3],
) -> Result<ImlmOutput> {
    let t = p.tape;
    let n = t.shape(features[0]).0;
    if present.iter().any(|pr| pr.len() != n) {
        return Err(Error::shape("complete_and_project", "presence flags do not match the batch"));
    }
    for i in 0..n {
        if present.iter().all(|pr| !pr[i]) {
            return Err(Error::invalid(format!("sample {i} has every modality missing")));
        }
    }

    // encode present rows; pos[m][i] is the row of sample i in enc_*[m]
    let mut enc_share = Vec::with_capacity(3);
    let mut enc_unique = Vec::with_capacity(3);
    let mut pos: Vec<Vec<Option<usize>>> = Vec::with_capacity(3);
    let mut rows_present: Vec<Vec<usize>> = Vec::with_capacity(3);
    for m in 0..3 {
        let rows: Vec<usize> = (0..n).filter(|&i| present[m][i]).collect();
        let mut pm = vec![None; n];
        for (k, &i) in rows.iter().enumerate() {
            pm[i] = Some(k);
        }
        if rows.is_empty() {
            enc_share.push(None);
            enc_unique.push(None);
        } else {
            let x = if rows.len() == n { features[m] } else { t.select_rows(features[m], &rows)? };
            enc_share.push(Some(encode_shared(p, params, x)?));
            enc_unique.push(Some(encode_unique(p, params, x)?));
        }
        pos.push(pm);
        rows_present.push(rows);
    }

    let mut r_share = [features[0]; 3];
    let mut r_unique = [features[0]; 3];
    for m in 0..3 {
        let missing: Vec<usize> = (0..n).filter(|&i| !present[m][i]).collect();
        if missing.is_empty() {
            r_share[m] = enc_share[m].expect("all rows present");
            r_unique[m] = enc_unique[m].expect("all rows present");
            continue;
        }
        // shared: group missing rows by which other modalities they have
        let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for &i in &missing {
            let sources: Vec<usize> = (0..3).filter(|&o| o != m && present[o][i]).collect();
            groups.entry(sources).or_default().push(i);
        }
        let mut parts = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        if let Some(e) = enc_share[m] {
            parts.push(e);
            order.extend(&rows_present[m]);
        }
        for (sources, rows) in &groups {
            let picked = sources
                .iter()
                .map(|&o| {
                    let idx: Vec<usize> = rows.iter().map(|&i| pos[o][i].expect("source present")).collect();
                    t.select_rows(enc_share[o].expect("source encoded"), &idx)
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(mean_of(t, &picked)?);
            order.extend(rows);
        }
        r_share[m] = restore_order(t, &parts, &order)?;

        // unique: batch mean over samples that have this modality, as a constant
        let enc = enc_unique[m].ok_or_else(|| {
            Error::invalid(format!("no sample in the batch has modality {m}; unique feature cannot be completed"))
        })?;
        let mean = complete_unique(&t.value(enc))?;
        let fill = Tensor::matrix(missing.len(), params.repr_dim, mean.data().repeat(missing.len()))?;
        let mut order_u = rows_present[m].clone();
        order_u.extend(&missing);
        r_unique[m] = restore_order(t, &[enc, t.constant(fill)], &order_u)?;
    }

    let mut projected = [features[0]; 3];
    for m in 0..3 {
        projected[m] = project_residual(p, params, r_share[m], r_unique[m], features[m])?;
    }

    // unique loss over encoded (present) features only
    let mut enc_parts = Vec::new();
    let mut tags = Vec::new();
    for m in 0..3 {
        if let Some(e) = enc_unique[m] {
            enc_parts.push(e);
            tags.extend(std::iter::repeat(m).take(rows_present[m].len()));
        }
    }
    let unique = unique_loss(p, params, t.vcat(&enc_parts)?, &tags)?;

    // share loss over samples with every modality present
    let full: Vec<usize> = (0..n).filter(|&i| present.iter().all(|pr| pr[i])).collect();
    let share = if full.is_empty() {
        t.constant(Tensor::scalar(0.0))
    } else if full.len() == n {
        share_loss_on_tape(t, r_share[0], r_share[2], r_share[1])?
    } else {
        let sel = |v: Var| t.select_rows(v, &full);
        share_loss_on_tape(t, sel(r_share[0])?, sel(r_share[2])?, sel(r_share[1])?)?
    };

    Ok(ImlmOutput { projected, r_share, r_unique, unique_loss: unique, share_loss: share })
}

/// Stacks `parts` and reorders rows so that stacked row `k` lands at `order[k]`.
pub(crate) fn restore_order(t: &Tape, parts: &[Var], order: &[usize]) -> Result<Var> {
    let stacked = if parts.len() == 1 { parts[0] } else { t.vcat(parts)? };
    let mut inverse = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        inverse[i] = k;
    }
    if inverse.iter().enumerate().all(|(i, &k)| i == k) {
        return Ok(stacked);
    }
    t.select_rows(stacked, &inverse)
}

#[cfg(test)]
mod tests;
