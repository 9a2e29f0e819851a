//! Affinity-graph reasoning over a batch of objects with counterfactual
//! intervention.
//!
//! For each modality the batch features give `S = exp(cos / tau)`, a top-k row
//! filter and a row normalisation `A = D^-1 S'`. Features are propagated per
//! modality (`F_m = A_m X_m`) and concatenated. Predictions under intervened
//! graphs, built from Gaussian features `X* = sigma * W + mu`, are subtracted
//! from the factual prediction to give the total indirect effect.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_matrix, Bound, Linear, Mlp, ParamId, ParamStore, Tape, Tensor, Var};

/// Modality order used throughout: audio, static, dynamic.
pub const MODALITIES: [&str; 3] = ["audio", "static", "dynamic"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClmHyper {
    pub tau: f64,
    pub k: usize,
}

impl Default for ClmHyper {
    fn default() -> Self {
        Self { tau: 2.0, k: 5 }
    }
}

impl ClmHyper {
    pub fn validate(&self, batch: usize) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau_clm must be > 0".into()));
        }
        if self.k == 0 || self.k > batch {
            return Err(Error::Config(format!("k = {} must lie in [1, {batch}]", self.k)));
        }
        Ok(())
    }
}

/// Row-stochastic sparse affinity matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub weights: Tensor,
    pub k: usize,
}

impl AffinityMatrix {
    pub fn size(&self) -> usize {
        self.weights.rows()
    }

    /// Row-stochastic within `tol`, nonnegative, at most `k` nonzeros per row.
    pub fn check(&self, tol: f64) -> Result<()> {
        let n = self.size();
        for i in 0..n {
            let row = self.weights.row_slice(i);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(format!("row {i} has a negative weight")));
            }
            let nz = row.iter().filter(|&&v| v != 0.0).count();
            if nz > self.k {
                return Err(Error::invalid(format!("row {i} has {nz} neighbours, k = {}", self.k)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::invalid(format!("row {i} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Nonzero entries of each row as `(column, weight)`, strongest first.
    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        (0..self.size())
            .map(|i| {
                let mut nb: Vec<(usize, f64)> = self
                    .weights
                    .row_slice(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(j, &w)| (j, w))
                    .collect();
                nb.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                nb
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedAffinity {
    pub audio: AffinityMatrix,
    pub static_: AffinityMatrix,
    pub dynamic: AffinityMatrix,
}

impl AugmentedAffinity {
    pub fn blocks(&self) -> [&AffinityMatrix; 3] {
        [&self.audio, &self.static_, &self.dynamic]
    }
}

/// `S[i][j] = exp(cos(x_i, x_j) / tau)`.
pub fn similarity_matrix(x: &Tensor, tau: f64) -> Result<Tensor> {
    let t = Tape::new();
    let v = t.constant(x.clone());
    let s = similarity_on_tape(&t, v, tau)?;
    Ok(t.to_tensor(s))
}

fn similarity_on_tape(t: &Tape, x: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    let cos = cosine_matrix(t, x, x, "similarity_matrix")?;
    t.exp(t.scale(cos, 1.0 / tau)?)
}

/// Keep-mask of the `k` largest entries of each row; ties go to the lower column.
pub fn topk_mask(s: &Tensor, k: usize) -> Result<Tensor> {
    let (n, m) = s.dims2()?;
    if k == 0 || k > m {
        return Err(Error::invalid(format!("k = {k} outside [1, {m}]")));
    }
    let mut mask = vec![0.0; n * m];
    let mut idx: Vec<usize> = Vec::with_capacity(m);
    for i in 0..n {
        let row = s.row_slice(i);
        idx.clear();
        idx.extend(0..m);
        // stable sort keeps lower columns first among equal values
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        for &j in &idx[..k] {
            mask[i * m + j] = 1.0;
        }
    }
    Tensor::matrix(n, m, mask)
}

/// Zeroes all but the `k` largest entries of each row.
pub fn topk_filter(s: &Tensor, k: usize) -> Result<Tensor> {
    let mask = topk_mask(s, k)?;
    let data = s.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect();
    Tensor::new(s.shape().to_vec(), data)
}

/// `A = D^-1 S'` with `D` the diagonal of row sums.
pub fn row_normalize(s_prime: &Tensor, k: usize) -> Result<AffinityMatrix> {
    let (n, m) = s_prime.dims2()?;
    let mut data = s_prime.data().to_vec();
    for i in 0..n {
        let row = &mut data[i * m..(i + 1) * m];
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::domain("row_normalize", format!("row {i} sums to {sum}")));
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(AffinityMatrix { weights: Tensor::matrix(n, m, data)?, k })
}

fn affinity(x: &Tensor, h: &ClmHyper) -> Result<AffinityMatrix> {
    row_normalize(&topk_filter(&similarity_matrix(x, h.tau)?, h.k)?, h.k)
}

pub fn build_augmented_affinity(
    x_audio: &Tensor,
    x_static: &Tensor,
    x_dynamic: &Tensor,
    h: &ClmHyper,
) -> Result<AugmentedAffinity> {
    let b = x_audio.rows();
    if x_static.rows() != b || x_dynamic.rows() != b {
        return Err(Error::shape(
            "build_augmented_affinity",
            format!("{} / {} / {} rows", b, x_static.rows(), x_dynamic.rows()),
        ));
    }
    Ok(AugmentedAffinity { audio: affinity(x_audio, h)?, static_: affinity(x_static, h)?, dynamic: affinity(x_dynamic, h)? })
}

/// `[A_a X_a | A_s X_s | A_z X_z]`.
pub fn message_pass(a: &AugmentedAffinity, x_audio: &Tensor, x_static: &Tensor, x_dynamic: &Tensor) -> Result<Tensor> {
    let t = Tape::new();
    let c = |m: &Tensor| t.constant(m.clone());
    let blocks = a.blocks();
    let f = message_pass_on_tape(
        &t,
        [c(&blocks[0].weights), c(&blocks[1].weights), c(&blocks[2].weights)],
        [c(x_audio), c(x_static), c(x_dynamic)],
    )?;
    Ok(t.to_tensor(f))
}

pub fn message_pass_on_tape(t: &Tape, a: [Var; 3], x: [Var; 3]) -> Result<Var> {
    let parts = a.iter().zip(&x).map(|(&am, &xm)| t.matmul(am, xm)).collect::<Result<Vec<_>>>()?;
    t.hcat(&parts)
}

/// Differentiable affinity block; the top-k selection is a constant mask.
pub fn affinity_on_tape(t: &Tape, x: Var, h: &ClmHyper) -> Result<Var> {
    let s = similarity_on_tape(t, x, h.tau)?;
    let mask = topk_mask(&t.value(s), h.k)?;
    let kept = t.mul(s, t.constant(mask))?;
    let sums = t.sum_cols(kept)?;
    t.mul_col(kept, t.recip(sums)?)
}

/// Gaussian counterfactual feature distribution of one modality.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InterventionParams {
    pub mu: ParamId,
    pub log_sigma: ParamId,
}

/// `X*[i] = sigma * W[i] + mu`; `x` only fixes the shape.
pub fn intervene(x: &Tensor, mu: &Tensor, sigma: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, d) = x.dims2()?;
    if w.dims2()? != (b, d) || mu.len() != d || sigma.len() != d {
        return Err(Error::shape(
            "intervene",
            format!("x {:?}, w {:?}, mu {:?}, sigma {:?}", x.shape(), w.shape(), mu.shape(), sigma.shape()),
        ));
    }
    if sigma.data().iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    let mut out = w.data().to_vec();
    for i in 0..b {
        for j in 0..d {
            out[i * d + j] = sigma.data()[j] * out[i * d + j] + mu.data()[j];
        }
    }
    Tensor::matrix(b, d, out)
}

pub fn intervene_on_tape(p: &Bound<'_>, ip: &InterventionParams, w: Var) -> Result<Var> {
    let t = p.tape;
    let sigma = t.exp(p.p(ip.log_sigma))?;
    t.add_row(t.mul_row(w, sigma)?, p.p(ip.mu))
}

/// Mean of `xs` as a running average, exact when every element is equal.
fn running_mean(t: &Tape, xs: &[Var]) -> Result<Var> {
    let mut m = *xs.first().ok_or_else(|| Error::invalid("no counterfactual samples"))?;
    for (k, &x) in xs.iter().enumerate().skip(1) {
        m = t.add(m, t.scale(t.sub(x, m)?, 1.0 / (k + 1) as f64)?)?;
    }
    Ok(m)
}

/// Factual logits minus the mean counterfactual logits.
pub fn tie_on_tape(t: &Tape, factual: Var, counterfactual: &[Var]) -> Result<Var> {
    t.sub(factual, running_mean(t, counterfactual)?)
}

pub fn tie(factual: &Tensor, counterfactual: &[Tensor]) -> Result<Tensor> {
    let t = Tape::new();
    let f = t.constant(factual.clone());
    let cf: Vec<Var> = counterfactual.iter().map(|c| t.constant(c.clone())).collect();
    let v = tie_on_tape(&t, f, &cf)?;
    Ok(t.to_tensor(v))
}

/// Mean softmax cross-entropy of logit rows against integer labels.
pub fn cross_entropy_on_tape(t: &Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = t.shape(logits);
    if labels.len() != n || labels.iter().any(|&l| l >= c) {
        return Err(Error::invalid(format!("{} labels for {n} rows of {c} classes", labels.len())));
    }
    let lse = t.logsumexp_cols(logits)?;
    let picked = t.pick(logits, labels)?;
    t.mean(t.sub(lse, picked)?)
}

/// Softmax cross-entropy of one logit row against `label`.
pub fn tie_loss(tie_logits: &Tensor, label: usize) -> Result<f64> {
    let t = Tape::new();
    let v = t.constant(Tensor::row(tie_logits.data()));
    Ok(t.scalar_value(cross_entropy_on_tape(&t, v, &[label])?))
}

/// Fusion network, classifier and intervention distributions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClmParams {
    /// `3d -> d` on each object's propagated features.
    pub object: Mlp,
    /// `2d -> d` on the two objects.
    pub pair: Mlp,
    /// `2d -> d` on the pair and the question.
    pub joint: Mlp,
    pub classifier: Linear,
    pub intervention: [InterventionParams; 3],
    pub dim: usize,
}

impl ClmParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        let name = |s: &str| format!("{prefix}.{s}");
        let object = Mlp::new(store, &name("object"), 3 * dim, dim, dim, rng)?;
        let pair = Mlp::new(store, &name("pair"), 2 * dim, dim, dim, rng)?;
        let joint = Mlp::new(store, &name("joint"), 2 * dim, dim, dim, rng)?;
        let classifier = Linear::new(store, &name("classifier"), dim, 2, rng)?;
        let mut iv = Vec::new();
        for m in MODALITIES {
            iv.push(InterventionParams {
                mu: store.add(name(&format!("intervention.{m}.mu")), Tensor::zeros(&[1, dim]))?,
                log_sigma: store.add(name(&format!("intervention.{m}.log_sigma")), Tensor::zeros(&[1, dim]))?,
            });
        }
        Ok(Self { object, pair, joint, classifier, intervention: [iv[0], iv[1], iv[2]], dim })
    }

    /// Sets each modality's intervention distribution to the column mean and
    /// standard deviation of `features[m]`.
    pub fn init_intervention(&self, store: &mut ParamStore, features: [&Tensor; 3]) -> Result<()> {
        for (ip, x) in self.intervention.iter().zip(features) {
            let (n, d) = x.dims2()?;
            if d != self.dim || n == 0 {
                return Err(Error::shape("init_intervention", format!("{:?}", x.shape())));
            }
            let mut mu = vec![0.0; d];
            let mut ls = vec![0.0; d];
            for j in 0..d {
                let m = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (x.at(i, j) - m).powi(2)).sum::<f64>() / n as f64;
                mu[j] = m;
                ls[j] = var.sqrt().max(1e-6).ln();
            }
            store.get_mut(ip.mu).data_mut().copy_from_slice(&mu);
            store.get_mut(ip.log_sigma).data_mut().copy_from_slice(&ls);
        }
        Ok(())
    }
}

/// `joint([pair([object(F1) | object(F2)]) | q])`.
pub fn fuse(p: &Bound<'_>, params: &ClmParams, f1: Var, f2: Var, question: Var) -> Result<Var> {
    let t = p.tape;
    let o1 = params.object.forward(p, f1)?;
    let o2 = params.object.forward(p, f2)?;
    let pair = params.pair.forward(p, t.hcat(&[o1, o2])?)?;
    params.joint.forward(p, t.hcat(&[pair, question])?)
}

/// Two logits per row: index 0 answers object 1, index 1 object 2.
pub fn classify(p: &Bound<'_>, params: &ClmParams, hidden: Var) -> Result<Var> {
    params.classifier.forward(p, hidden)
}

/// Logits for `B` pairs whose objects are rows `0..B` and `B..2B` of the features.
pub fn predict(p: &Bound<'_>, params: &ClmParams, affinity: [Var; 3], features: [Var; 3], question: Var) -> Result<Var> {
    let t = p.tape;
    let f = message_pass_on_tape(t, affinity, features)?;
    let n = t.shape(f).0;
    if n % 2 != 0 {
        return Err(Error::shape("predict", format!("{n} object rows cannot form pairs")));
    }
    let b = n / 2;
    let f1 = t.select_rows(f, &(0..b).collect::<Vec<_>>())?;
    let f2 = t.select_rows(f, &(b..n).collect::<Vec<_>>())?;
    classify(p, params, fuse(p, params, f1, f2, question)?)
}

/// Factual and counterfactual logits and their difference.
pub struct TieOutput {
    pub factual: Var,
    pub counterfactual: Vec<Var>,
    pub tie: Var,
}

/// Runs the factual graph and one counterfactual graph per noise draw.
/// `noise[s][m]` is the standard-normal draw `W` for sample `s`, modality `m`.
pub fn tie_forward(
    p: &Bound<'_>,
    params: &ClmParams,
    h: &ClmHyper,
    features: [Var; 3],
    question: Var,
    noise: &[[Tensor; 3]],
) -> Result<TieOutput> {
    let t = p.tape;
    let a = [
        affinity_on_tape(t, features[0], h)?,
        affinity_on_tape(t, features[1], h)?,
        affinity_on_tape(t, features[2], h)?,
    ];
    let factual = predict(p, params, a, features, question)?;
    let mut counterfactual = Vec::with_capacity(noise.len());
    for draw in noise {
        let mut a_cf = [a[0]; 3];
        for m in 0..3 {
            let x_star = intervene_on_tape(p, &params.intervention[m], t.constant(draw[m].clone()))?;
            a_cf[m] = affinity_on_tape(t, x_star, h)?;
        }
        counterfactual.push(predict(p, params, a_cf, features, question)?);
    }
    let tie = tie_on_tape(t, factual, &counterfactual)?;
    Ok(TieOutput { factual, counterfactual, tie })
}

/// Factual prediction against counterfactual graphs built from `intervened` features.
pub fn tie_with_features(
    p: &Bound<'_>,
    params: &ClmParams,
    h: &ClmHyper,
    features: [Var; 3],
    question: Var,
    intervened: &[[Var; 3]],
) -> Result<TieOutput> {
    let t = p.tape;
    let graph = |x: [Var; 3]| -> Result<[Var; 3]> {
        Ok([affinity_on_tape(t, x[0], h)?, affinity_on_tape(t, x[1], h)?, affinity_on_tape(t, x[2], h)?])
    };
    let factual = predict(p, params, graph(features)?, features, question)?;
    let counterfactual =
        intervened.iter().map(|&x| predict(p, params, graph(x)?, features, question)).collect::<Result<Vec<_>>>()?;
    let tie = tie_on_tape(t, factual, &counterfactual)?;
    Ok(TieOutput { factual, counterfactual, tie })
}

/// Affinity dump as CSV: `modality,row,neighbor,weight`, strongest neighbour first.
pub fn affinity_csv(a: &AugmentedAffinity) -> String {
    let mut out = String::from("modality,row,neighbor,weight\n");
    for (name, block) in MODALITIES.iter().zip(a.blocks()) {
        for (i, nb) in block.neighbors().iter().enumerate() {
            for (j, w) in nb {
                out.push_str(&format!("{name},{i},{j},{w:.17e}\n"));
            }
        }
    }
    out
}

/// Affinity dump as JSON: `{modality: [{"row", "neighbors", "weights"}]}`.
pub fn affinity_json(a: &AugmentedAffinity) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (name, block) in MODALITIES.iter().zip(a.blocks()) {
        let rows: Vec<serde_json::Value> = block
            .neighbors()
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                serde_json::json!({
                    "row": i,
                    "neighbors": nb.iter().map(|x| x.0).collect::<Vec<_>>(),
                    "weights": nb.iter().map(|x| x.1).collect::<Vec<_>>(),
                })
            })
            .collect();
        map.insert(name.to_string(), serde_json::Value::Array(rows));
    }
    map.insert("k".into(), a.audio.k.into());
    serde_json::Value::Object(map)
}
