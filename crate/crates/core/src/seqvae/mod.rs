//! Sequential VAE that splits a feature sequence into a static factor `s` and
//! per-step dynamic factors `z_1..z_T`.
//!
//! Posterior: a Bi-LSTM reads the sequence; its two final states give
//! `q(s | x_1..T)`, and a forward LSTM over `[bilstm_t | z_{t-1}]` gives
//! `q(z_t | z_<t, x_<=t)`. Prior: `p(s) = N(0, I)` and a causal LSTM over
//! `z_0 = 0, z_1, ..` gives `p(z_t | z_<t)`. The decoder is a time-shared MLP on
//! `[z_t | s]`.
//!
//! Batched computations are time-major: a sequence batch is a list of `T`
//! matrices of shape `N x d`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    bilstm_forward, cosine_matrix, cosine_rows, lstm_cell, Bound, Linear, LstmCellParams, Mlp, ParamStore, Tape,
    Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DseHyper {
    /// Weight of the KL and contrastive terms.
    pub gamma: f64,
    /// Weight of the `I(z; s)` penalty.
    pub theta: f64,
    /// Temperature of the contrastive score.
    pub tau: f64,
    /// Margin of the pairwise contrastive hinge.
    pub delta: f64,
    /// Negatives per anchor; `None` uses every other batch member.
    pub n_negatives: Option<usize>,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub latent_dim: usize,
    /// Width of every recurrent hidden state.
    pub hidden: usize,
    /// Standard deviation of the motion augmentation noise.
    pub motion_noise: f64,
}

impl Default for DseHyper {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            theta: 50.0,
            tau: 0.5,
            delta: 0.2,
            n_negatives: None,
            seq_len: 8,
            feat_dim: 32,
            latent_dim: 16,
            hidden: 16,
            motion_noise: 0.1,
        }
    }
}

impl DseHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if !(self.gamma >= 0.0 && self.theta >= 0.0) {
            return bad("gamma and theta must be >= 0");
        }
        if !(self.motion_noise >= 0.0) {
            return bad("motion_noise must be >= 0");
        }
        if self.seq_len < 2 || self.feat_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return bad("seq_len must be >= 2 and all widths >= 1");
        }
        if self.n_negatives == Some(0) {
            return bad("n_negatives must be >= 1");
        }
        Ok(())
    }
}

/// Diagonal Gaussian, one distribution per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianParams {
    pub fn standard(dim: usize) -> Self {
        Self { mu: Tensor::zeros(&[1, dim]), log_sigma: Tensor::zeros(&[1, dim]) }
    }
}

/// Encoding of one sequence, with the noise used to draw it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFactors {
    /// `1 x d_lat`
    pub s: Tensor,
    /// `T x d_lat`
    pub z: Tensor,
    pub q_s: GaussianParams,
    /// Row `t` holds the parameters of `q(z_t | ..)`.
    pub q_z: GaussianParams,
    pub eps_s: Tensor,
    pub eps_z: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DseParams {
    pub post_fwd: LstmCellParams,
    pub post_bwd: LstmCellParams,
    pub static_mu: Linear,
    pub static_log_sigma: Linear,
    pub dyn_cell: LstmCellParams,
    pub dyn_mu: Linear,
    pub dyn_log_sigma: Linear,
    pub prior_cell: LstmCellParams,
    pub prior_mu: Linear,
    pub prior_log_sigma: Linear,
    pub decoder: Mlp,
    pub feat_dim: usize,
    pub latent_dim: usize,
}

impl DseParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, h: &DseHyper, rng: &mut R) -> Result<Self> {
        let (d, l, hd) = (h.feat_dim, h.latent_dim, h.hidden);
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            post_fwd: LstmCellParams::new(store, &name("post_fwd"), d, hd, rng)?,
            post_bwd: LstmCellParams::new(store, &name("post_bwd"), d, hd, rng)?,
            static_mu: Linear::new(store, &name("static_mu"), 2 * hd, l, rng)?,
            static_log_sigma: Linear::new(store, &name("static_log_sigma"), 2 * hd, l, rng)?,
            dyn_cell: LstmCellParams::new(store, &name("dyn_cell"), 2 * hd + l, hd, rng)?,
            dyn_mu: Linear::new(store, &name("dyn_mu"), hd, l, rng)?,
            dyn_log_sigma: Linear::new(store, &name("dyn_log_sigma"), hd, l, rng)?,
            prior_cell: LstmCellParams::new(store, &name("prior_cell"), l, hd, rng)?,
            prior_mu: Linear::new(store, &name("prior_mu"), hd, l, rng)?,
            prior_log_sigma: Linear::new(store, &name("prior_log_sigma"), hd, l, rng)?,
            decoder: Mlp::new(store, &name("decoder"), 2 * l, d, d, rng)?,
            feat_dim: d,
            latent_dim: l,
        })
    }
}

/// Posterior of a batch on the tape.
pub struct EncodedBatch {
    pub mu_s: Var,
    pub log_sigma_s: Var,
    pub s: Var,
    pub mu_z: Vec<Var>,
    pub log_sigma_z: Vec<Var>,
    pub z: Vec<Var>,
}

/// `mu + exp(log_sigma) * eps`
pub fn reparameterize(t: &Tape, mu: Var, log_sigma: Var, eps: Var) -> Result<Var> {
    t.add(mu, t.mul(t.exp(log_sigma)?, eps)?)
}

/// Static posterior heads applied to the Bi-LSTM's two final states.
fn static_heads(p: &Bound<'_>, params: &DseParams, last_fwd: Var, last_bwd: Var) -> Result<(Var, Var)> {
    let hcat = p.tape.hcat(&[last_fwd, last_bwd])?;
    Ok((params.static_mu.forward(p, hcat)?, params.static_log_sigma.forward(p, hcat)?))
}

/// Dynamic posterior recurrence over Bi-LSTM states `hs`, sampling with `eps[t]`.
fn dynamic_pass(p: &Bound<'_>, params: &DseParams, hs: &[Var], eps: &[Var]) -> Result<(Vec<Var>, Vec<Var>, Vec<Var>)> {
    let t = p.tape;
    let n = t.shape(hs[0]).0;
    let cell = &params.dyn_cell;
    let mut h = t.constant(Tensor::zeros(&[n, cell.hidden]));
    let mut c = h;
    let mut z_prev = t.constant(Tensor::zeros(&[n, params.latent_dim]));
    let (mut mus, mut lss, mut zs) = (Vec::new(), Vec::new(), Vec::new());
    for (&ht, &e) in hs.iter().zip(eps) {
        let inp = t.hcat(&[ht, z_prev])?;
        let (h2, c2) = lstm_cell(p, cell, inp, h, c)?;
        h = h2;
        c = c2;
        let mu = params.dyn_mu.forward(p, h)?;
        let ls = params.dyn_log_sigma.forward(p, h)?;
        let z = reparameterize(t, mu, ls, e)?;
        mus.push(mu);
        lss.push(ls);
        zs.push(z);
        z_prev = z;
    }
    Ok((mus, lss, zs))
}

/// Encodes a time-major batch. `eps_s: N x d_lat`, `eps_z[t]: N x d_lat`.
pub fn encode_batch(p: &Bound<'_>, params: &DseParams, steps: &[Var], eps_s: Var, eps_z: &[Var]) -> Result<EncodedBatch> {
    if steps.is_empty() {
        return Err(Error::invalid("encode over an empty sequence"));
    }
    if eps_z.len() != steps.len() {
        return Err(Error::shape("encode", format!("{} noise steps for {} frames", eps_z.len(), steps.len())));
    }
    let t = p.tape;
    let bi = bilstm_forward(p, &params.post_fwd, &params.post_bwd, steps)?;
    let (mu_s, log_sigma_s) = static_heads(p, params, bi.last_fwd, bi.last_bwd)?;
    let s = reparameterize(t, mu_s, log_sigma_s, eps_s)?;
    let (mu_z, log_sigma_z, z) = dynamic_pass(p, params, &bi.per_step, eps_z)?;
    Ok(EncodedBatch { mu_s, log_sigma_s, s, mu_z, log_sigma_z, z })
}

/// Prior parameters `p(z_t | z_<t)` for every step of `z`, from inputs `0, z_1, .., z_{T-1}`.
pub fn prior_batch(p: &Bound<'_>, params: &DseParams, z: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
    let t = p.tape;
    let Some(&first) = z.first() else { return Ok((vec![], vec![])) };
    let n = t.shape(first).0;
    let cell = &params.prior_cell;
    let mut h = t.constant(Tensor::zeros(&[n, cell.hidden]));
    let mut c = h;
    let mut inp = t.constant(Tensor::zeros(&[n, params.latent_dim]));
    let (mut mus, mut lss) = (Vec::new(), Vec::new());
    for &zt in z {
        let (h2, c2) = lstm_cell(p, cell, inp, h, c)?;
        h = h2;
        c = c2;
        mus.push(params.prior_mu.forward(p, h)?);
        lss.push(params.prior_log_sigma.forward(p, h)?);
        inp = zt;
    }
    Ok((mus, lss))
}

/// `x_hat_t = decoder([z_t | s])` for every step.
pub fn decode_batch(p: &Bound<'_>, params: &DseParams, s: Var, z: &[Var]) -> Result<Vec<Var>> {
    z.iter().map(|&zt| params.decoder.forward(p, p.tape.hcat(&[zt, s])?)).collect()
}

/// Per-row KL between diagonal Gaussians, summed over columns: `N x 1`.
pub fn kl_rows(t: &Tape, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    let var_q = t.exp(t.scale(ls_q, 2.0)?)?;
    let two_var_p = t.scale(t.exp(t.scale(ls_p, 2.0)?)?, 2.0)?;
    let num = t.add(var_q, t.square(t.sub(mu_q, mu_p)?)?)?;
    let per = t.add(t.sub(ls_p, ls_q)?, t.div(num, two_var_p)?)?;
    t.sum_cols(t.add_scalar(per, -0.5)?)
}

/// Closed-form `KL(q || p)` summed over dimensions and rows.
pub fn kl_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.mu.shape() != p.mu.shape() || q.log_sigma.shape() != q.mu.shape() || p.log_sigma.shape() != p.mu.shape() {
        return Err(Error::shape("kl_gaussian", format!("{:?} vs {:?}", q.mu.shape(), p.mu.shape())));
    }
    let t = Tape::new();
    let c = |x: &Tensor| t.constant(x.clone());
    let rows = kl_rows(&t, c(&q.mu), c(&q.log_sigma), c(&p.mu), c(&p.log_sigma))?;
    Ok(t.scalar_value(t.sum(rows)?))
}

fn cosine(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    let t = Tape::new();
    let va = t.constant(Tensor::row(a.data()));
    let vb = t.constant(Tensor::row(b.data()));
    Ok(t.scalar_value(cosine_rows(&t, va, vb, op)?))
}

/// `exp(cos(z, x) / tau)` on flattened values.
pub fn contrastive_score(z: &Tensor, x: &Tensor, tau: f64) -> Result<f64> {
    Ok((cosine(z, x, "contrastive_score")? / tau).exp())
}

/// `log[ phi(a, pos) / (phi(a, pos) + sum_j phi(a, neg_j)) ]`.
pub fn contrastive_mi(anchor: &Tensor, positive: &Tensor, negatives: &[Tensor], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::invalid("contrastive_mi needs at least one negative"));
    }
    // log-sum-exp over cosines / tau keeps large 1/tau finite
    let pos = cosine(anchor, positive, "contrastive_mi")? / tau;
    let mut logits = vec![pos];
    for n in negatives {
        logits.push(cosine(anchor, n, "contrastive_mi")? / tau);
    }
    Ok(pos - crate::numerics::tape::logsumexp(&logits))
}

/// Batched contrastive term: mean over `i` of the log-probability of pairing
/// `anchors_i` with `positives_i` against `positives_j`, `j != i`.
pub fn contrastive_term(t: &Tape, anchors: Var, positives: Var, tau: f64, n_negatives: Option<usize>) -> Result<Var> {
    let n = t.shape(anchors).0;
    if n < 2 {
        return Err(Error::invalid("contrastive term needs a batch of at least 2"));
    }
    let cos = cosine_matrix(t, anchors, positives, "contrastive_term")?;
    let mut logits = t.scale(cos, 1.0 / tau)?;
    if let Some(k) = n_negatives.filter(|&k| k < n - 1) {
        // negatives of row i are rows i+1..=i+k (cyclic)
        let mut mask = vec![-1e30; n * n];
        for i in 0..n {
            mask[i * n + i] = 0.0;
            for o in 1..=k {
                mask[i * n + (i + o) % n] = 0.0;
            }
        }
        logits = t.add(logits, t.constant(Tensor::matrix(n, n, mask)?))?;
    }
    let diag: Vec<usize> = (0..n).collect();
    let pos = t.pick(logits, &diag)?;
    let lse = t.logsumexp_cols(logits)?;
    t.mean(t.sub(pos, lse)?)
}

/// `(I_z, I_s)`, each the average of the contrastive term in both directions.
pub fn mi_terms(
    t: &Tape,
    z: Var,
    z_motion: Var,
    s: Var,
    s_content: Var,
    tau: f64,
    n_negatives: Option<usize>,
) -> Result<(Var, Var)> {
    let both = |a: Var, b: Var| -> Result<Var> {
        let fwd = contrastive_term(t, a, b, tau, n_negatives)?;
        let bwd = contrastive_term(t, b, a, tau, n_negatives)?;
        t.scale(t.add(fwd, bwd)?, 0.5)
    };
    Ok((both(z, z_motion)?, both(s, s_content)?))
}

/// Mini-batch estimate of `I(z; s)` from batch mixtures of the per-sample posteriors:
/// `mean_i [lse_j(Lz + Ls) - lse_j Lz - lse_j Ls] + ln N`, where `Lz[i][j] = log q(z_i | x_j)`.
#[allow(clippy::too_many_arguments)]
pub fn mi_zs_penalty(
    t: &Tape,
    s: Var,
    mu_s: Var,
    log_sigma_s: Var,
    z: Var,
    mu_z: Var,
    log_sigma_z: Var,
) -> Result<Var> {
    let n = t.shape(s).0;
    if n < 2 {
        return Err(Error::invalid("I(z; s) estimate needs a batch of at least 2"));
    }
    let lz = t.gauss_log_density_pairs(z, mu_z, log_sigma_z)?;
    let ls = t.gauss_log_density_pairs(s, mu_s, log_sigma_s)?;
    let joint = t.logsumexp_cols(t.add(lz, ls)?)?;
    let marg = t.add(t.logsumexp_cols(lz)?, t.logsumexp_cols(ls)?)?;
    t.add_scalar(t.mean(t.sub(joint, marg)?)?, (n as f64).ln())
}

/// Uniformly random reordering of the frames (rows) of `x`.
pub fn content_augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let len = x.rows();
    if len < 2 {
        return Err(Error::invalid("content augmentation needs at least 2 frames"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    x.select_rows(&idx)
}

/// Adds independent Gaussian noise of standard deviation `noise_std` to every value.
pub fn motion_augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R, noise_std: f64) -> Result<Tensor> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be >= 0"));
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(out)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("finite draws")
}

/// One training sequence with its augmented views and reparameterization noise.
#[derive(Clone, Debug)]
pub struct DseSample {
    pub x: Tensor,
    pub content: Tensor,
    pub motion: Tensor,
    pub eps_s: Tensor,
    pub eps_z: Tensor,
}

impl DseSample {
    pub fn draw<R: Rng + ?Sized>(x: Tensor, h: &DseHyper, rng: &mut R) -> Result<Self> {
        let content = content_augment(&x, rng)?;
        let motion = motion_augment(&x, rng, h.motion_noise)?;
        let eps_s = standard_normal(rng, &[1, h.latent_dim]);
        let eps_z = standard_normal(rng, &[x.rows(), h.latent_dim]);
        Ok(Self { x, content, motion, eps_s, eps_z })
    }

    /// Same views, zero noise: the encoder returns posterior means.
    pub fn deterministic(x: Tensor, h: &DseHyper) -> Self {
        let t = x.rows();
        Self {
            content: x.clone(),
            motion: x.clone(),
            eps_s: Tensor::zeros(&[1, h.latent_dim]),
            eps_z: Tensor::zeros(&[t, h.latent_dim]),
            x,
        }
    }
}

/// Time-major batch: step `t` stacks row `t` of every sequence.
pub fn time_major(seqs: &[&Tensor]) -> Result<Vec<Tensor>> {
    let first = seqs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (len, width) = first.dims2()?;
    for s in seqs {
        if s.dims2()? != (len, width) {
            return Err(Error::shape("time_major", format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
    }
    (0..len)
        .map(|step| {
            let mut data = Vec::with_capacity(seqs.len() * width);
            for s in seqs {
                data.extend_from_slice(s.row_slice(step));
            }
            Tensor::matrix(seqs.len(), width, data)
        })
        .collect()
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = rows.iter().map(|r| Tensor::row(r.data())).collect();
    Tensor::vstack(&owned)
}

/// Everything the losses need from one batch, computed in a single pass.
pub struct DseForward {
    pub n: usize,
    pub enc: EncodedBatch,
    /// Posterior mean of `s` for the content-augmented view.
    pub s_content: Var,
    /// Flattened `z_1..T` (`N x T*d_lat`) and its posterior parameters.
    pub z_flat: Var,
    pub mu_z_flat: Var,
    pub log_sigma_z_flat: Var,
    /// Flattened posterior mean of `z` for the motion-augmented view.
    pub z_motion_flat: Var,
    /// Per-sample `1/2 sum_t |x_t - x_hat_t|^2`, `N x 1`.
    pub recon_rows: Var,
    pub kl_s_rows: Var,
    pub kl_z_rows: Var,
}

impl DseForward {
    /// Sampled `z_T`, the dynamic summary.
    pub fn z_last(&self) -> Var {
        *self.enc.z.last().expect("non-empty sequence")
    }
}

pub fn dse_forward(p: &Bound<'_>, params: &DseParams, samples: &[&DseSample]) -> Result<DseForward> {
    let t = p.tape;
    let n = samples.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let len = samples[0].x.rows();
    if len == 0 {
        return Err(Error::invalid("encode over an empty sequence"));
    }
    let mut seqs: Vec<&Tensor> = samples.iter().map(|s| &s.x).collect();
    seqs.extend(samples.iter().map(|s| &s.content));
    seqs.extend(samples.iter().map(|s| &s.motion));
    let steps: Vec<Var> = time_major(&seqs)?.into_iter().map(|m| t.constant(m)).collect();

    // one Bi-LSTM pass over [x; content; motion]
    let bi = bilstm_forward(p, &params.post_fwd, &params.post_bwd, &steps)?;
    let (mu_s_all, ls_s_all) = static_heads(p, params, bi.last_fwd, bi.last_bwd)?;
    let orig: Vec<usize> = (0..n).collect();
    let content: Vec<usize> = (n..2 * n).collect();
    let mut dyn_rows = orig.clone();
    dyn_rows.extend(2 * n..3 * n);

    let mu_s = t.select_rows(mu_s_all, &orig)?;
    let log_sigma_s = t.select_rows(ls_s_all, &orig)?;
    let eps_s = t.constant(stack_rows(&samples.iter().map(|s| &s.eps_s).collect::<Vec<_>>())?);
    let s = reparameterize(t, mu_s, log_sigma_s, eps_s)?;
    let s_content = t.select_rows(mu_s_all, &content)?;

    // dynamic pass over [x; motion], motion rows use zero noise
    let eps_x = time_major(&samples.iter().map(|s| &s.eps_z).collect::<Vec<_>>())?;
    let eps_steps: Vec<Var> = eps_x
        .into_iter()
        .map(|e| t.constant(Tensor::vstack(&[e, Tensor::zeros(&[n, params.latent_dim])]).expect("same width")))
        .collect();
    let hs = bi.per_step.iter().map(|&h| t.select_rows(h, &dyn_rows)).collect::<Result<Vec<_>>>()?;
    let (mu_all, ls_all, z_all) = dynamic_pass(p, params, &hs, &eps_steps)?;
    let motion_rows: Vec<usize> = (n..2 * n).collect();
    let pick = |v: &[Var], rows: &[usize]| v.iter().map(|&x| t.select_rows(x, rows)).collect::<Result<Vec<_>>>();
    let mu_z = pick(&mu_all, &orig)?;
    let log_sigma_z = pick(&ls_all, &orig)?;
    let z = pick(&z_all, &orig)?;
    let z_motion_flat = t.select_rows(t.hcat(&mu_all)?, &motion_rows)?;

    let x_steps = time_major(&samples.iter().map(|s| &s.x).collect::<Vec<_>>())?;
    let x_hat = decode_batch(p, params, s, &z)?;
    let mut recon = None;
    for (xt, &xh) in x_steps.into_iter().zip(&x_hat) {
        let sq = t.sum_cols(t.square(t.sub(t.constant(xt), xh)?)?)?;
        recon = Some(match recon {
            None => sq,
            Some(acc) => t.add(acc, sq)?,
        });
    }
    let recon_rows = t.scale(recon.expect("non-empty"), 0.5)?;

    let zeros = t.constant(Tensor::zeros(&[n, params.latent_dim]));
    let kl_s_rows = kl_rows(t, mu_s, log_sigma_s, zeros, zeros)?;
    let (pm, pl) = prior_batch(p, params, &z)?;
    let mut kl_z = None;
    for i in 0..len {
        let k = kl_rows(t, mu_z[i], log_sigma_z[i], pm[i], pl[i])?;
        kl_z = Some(match kl_z {
            None => k,
            Some(acc) => t.add(acc, k)?,
        });
    }

    Ok(DseForward {
        n,
        z_flat: t.hcat(&z)?,
        mu_z_flat: t.hcat(&mu_z)?,
        log_sigma_z_flat: t.hcat(&log_sigma_z)?,
        enc: EncodedBatch { mu_s, log_sigma_s, s, mu_z, log_sigma_z, z },
        s_content,
        z_motion_flat,
        recon_rows,
        kl_s_rows,
        kl_z_rows: kl_z.expect("non-empty"),
    })
}

/// Loss components of one sequence batch (each averaged over samples).
#[derive(Clone, Copy, Debug)]
pub struct DseTerms {
    pub recon: Var,
    pub kl_s: Var,
    pub kl_z: Var,
    pub i_z: Var,
    pub i_s: Var,
    pub i_zs: Var,
    pub total: Var,
}

/// Numeric values of [`DseTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DseComponents {
    pub recon: f64,
    pub kl_s: f64,
    pub kl_z: f64,
    pub i_z: f64,
    pub i_s: f64,
    pub i_zs: f64,
    pub total: f64,
}

impl DseTerms {
    pub fn values(&self, t: &Tape) -> DseComponents {
        let v = |x: Var| t.scalar_value(x);
        DseComponents {
            recon: v(self.recon),
            kl_s: v(self.kl_s),
            kl_z: v(self.kl_z),
            i_z: v(self.i_z),
            i_s: v(self.i_s),
            i_zs: v(self.i_zs),
            total: v(self.total),
        }
    }
}

/// `recon + gamma (KL_s + KL_z) - gamma (I_z + I_s) + theta I(z; s)` over the given rows.
pub fn dse_terms(t: &Tape, f: &DseForward, rows: &[usize], h: &DseHyper) -> Result<DseTerms> {
    if rows.len() < 2 {
        return Err(Error::invalid("sequence loss needs a batch of at least 2"));
    }
    let all = rows.len() == f.n && rows.iter().enumerate().all(|(i, &r)| i == r);
    let sel = |v: Var| if all { Ok(v) } else { t.select_rows(v, rows) };
    let recon = t.mean(sel(f.recon_rows)?)?;
    let kl_s = t.mean(sel(f.kl_s_rows)?)?;
    let kl_z = t.mean(sel(f.kl_z_rows)?)?;
    let (i_z, i_s) = mi_terms(
        t,
        sel(f.z_flat)?,
        sel(f.z_motion_flat)?,
        sel(f.enc.s)?,
        sel(f.s_content)?,
        h.tau,
        h.n_negatives,
    )?;
    let i_zs = mi_zs_penalty(
        t,
        sel(f.enc.s)?,
        sel(f.enc.mu_s)?,
        sel(f.enc.log_sigma_s)?,
        sel(f.z_flat)?,
        sel(f.mu_z_flat)?,
        sel(f.log_sigma_z_flat)?,
    )?;
    let kl = t.scale(t.add(kl_s, kl_z)?, h.gamma)?;
    let mi = t.scale(t.add(i_z, i_s)?, h.gamma)?;
    let total = t.add(t.sub(t.add(recon, kl)?, mi)?, t.scale(i_zs, h.theta)?)?;
    Ok(DseTerms { recon, kl_s, kl_z, i_z, i_s, i_zs, total })
}

/// Sequence loss of a batch of samples.
pub fn dse_loss(p: &Bound<'_>, params: &DseParams, samples: &[&DseSample], h: &DseHyper) -> Result<DseTerms> {
    let f = dse_forward(p, params, samples)?;
    let rows: Vec<usize> = (0..samples.len()).collect();
    dse_terms(p.tape, &f, &rows, h)
}

/// Mean over pairs of `max(0, cos(a_i, b_i) - delta)`.
pub fn pair_hinge(t: &Tape, a: Var, b: Var, delta: f64) -> Result<Var> {
    let cos = cosine_rows(t, a, b, "pair_contrastive")?;
    t.mean(t.relu(t.add_scalar(cos, -delta)?)?)
}

/// `(max(0, cos(s1, s2) - delta), max(0, cos(z1, z2) - delta))`.
pub fn pair_contrastive_losses(s1: &Tensor, s2: &Tensor, z1: &Tensor, z2: &Tensor, delta: f64) -> Result<(f64, f64)> {
    let hinge = |a: &Tensor, b: &Tensor| -> Result<f64> { Ok((cosine(a, b, "pair_contrastive")? - delta).max(0.0)) };
    Ok((hinge(s1, s2)?, hinge(z1, z2)?))
}

/// Paired-object loss terms.
#[derive(Clone, Copy, Debug)]
pub struct DsePlusTerms {
    pub obj1: DseTerms,
    pub obj2: DseTerms,
    pub contra_s: Var,
    pub contra_z: Var,
    pub total: Var,
}

/// Sequence loss of both objects plus the pairwise contrastive hinges.
/// `rows1[i]` and `rows2[i]` index the two objects of pair `i` in `f`.
/// With `pair_losses == false` the hinges are reported but not added.
pub fn dse_plus_terms(
    t: &Tape,
    f: &DseForward,
    rows1: &[usize],
    rows2: &[usize],
    h: &DseHyper,
    pair_losses: bool,
) -> Result<DsePlusTerms> {
    if rows1.len() != rows2.len() {
        return Err(Error::shape("dse_plus", format!("{} vs {} pairs", rows1.len(), rows2.len())));
    }
    let obj1 = dse_terms(t, f, rows1, h)?;
    let obj2 = dse_terms(t, f, rows2, h)?;
    let z_last = f.z_last();
    let contra_s = pair_hinge(t, t.select_rows(f.enc.s, rows1)?, t.select_rows(f.enc.s, rows2)?, h.delta)?;
    let contra_z = pair_hinge(t, t.select_rows(z_last, rows1)?, t.select_rows(z_last, rows2)?, h.delta)?;
    let mut total = t.add(obj1.total, obj2.total)?;
    if pair_losses {
        total = t.add(total, t.add(contra_s, contra_z)?)?;
    }
    Ok(DsePlusTerms { obj1, obj2, contra_s, contra_z, total })
}

/// Single-sequence posterior with explicit noise.
pub fn encode_with(
    store: &ParamStore,
    params: &DseParams,
    x: &Tensor,
    eps_s: &Tensor,
    eps_z: &Tensor,
) -> Result<LatentFactors> {
    let (len, width) = x.dims2()?;
    if len == 0 {
        return Err(Error::invalid("encode over an empty sequence"));
    }
    if width != params.feat_dim {
        return Err(Error::shape("encode", format!("width {width}, expected {}", params.feat_dim)));
    }
    let t = Tape::new();
    let p = store.bind_frozen(&t);
    let steps: Vec<Var> = (0..len).map(|i| t.constant(Tensor::row(x.row_slice(i)))).collect();
    let ez: Vec<Var> = (0..len).map(|i| t.constant(Tensor::row(eps_z.row_slice(i)))).collect();
    let enc = encode_batch(&p, params, &steps, t.constant(eps_s.clone()), &ez)?;
    let cat = |v: &[Var]| t.to_tensor(t.vcat(v).expect("equal widths"));
    Ok(LatentFactors {
        s: t.to_tensor(enc.s),
        z: cat(&enc.z),
        q_s: GaussianParams { mu: t.to_tensor(enc.mu_s), log_sigma: t.to_tensor(enc.log_sigma_s) },
        q_z: GaussianParams { mu: cat(&enc.mu_z), log_sigma: cat(&enc.log_sigma_z) },
        eps_s: eps_s.clone(),
        eps_z: eps_z.clone(),
    })
}

/// Single-sequence posterior, drawing fresh noise from `rng`.
pub fn encode<R: Rng + ?Sized>(store: &ParamStore, params: &DseParams, x: &Tensor, rng: &mut R) -> Result<LatentFactors> {
    let eps_s = standard_normal(rng, &[1, params.latent_dim]);
    let eps_z = standard_normal(rng, &[x.rows(), params.latent_dim]);
    encode_with(store, params, x, &eps_s, &eps_z)
}

/// `p(z_{t+1} | z_1..z_t)` for a prefix of `t >= 0` rows.
pub fn prior_step_params(store: &ParamStore, params: &DseParams, z_prefix: &Tensor) -> Result<GaussianParams> {
    let t = Tape::new();
    let p = store.bind_frozen(&t);
    let mut steps: Vec<Var> = (0..z_prefix.rows()).map(|i| t.constant(Tensor::row(z_prefix.row_slice(i)))).collect();
    // the prior at step t+1 reads inputs 0, z_1..z_t: append a dummy last step
    steps.push(t.constant(Tensor::zeros(&[1, params.latent_dim])));
    let (mus, lss) = prior_batch(&p, params, &steps)?;
    Ok(GaussianParams { mu: t.to_tensor(*mus.last().unwrap()), log_sigma: t.to_tensor(*lss.last().unwrap()) })
}

/// Reconstruction `x_hat` (`T x d`) of a latent encoding.
pub fn decode(store: &ParamStore, params: &DseParams, lat: &LatentFactors) -> Result<Tensor> {
    let t = Tape::new();
    let p = store.bind_frozen(&t);
    let s = t.constant(lat.s.clone());
    let z: Vec<Var> = (0..lat.z.rows()).map(|i| t.constant(Tensor::row(lat.z.row_slice(i)))).collect();
    let xs = decode_batch(&p, params, s, &z)?;
    Ok(t.to_tensor(t.vcat(&xs)?))
}

#[cfg(test)]
mod tests;
