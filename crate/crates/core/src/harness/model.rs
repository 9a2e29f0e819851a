//! The full model, batch assembly, training steps, evaluation and probes.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Mode, TrainConfig};
use crate::completion::{complete_and_project, mark_missing, missing_count, restore_order, ImlmParams};
use crate::counterfactual::{build_augmented_affinity, cross_entropy_on_tape, tie_forward, AugmentedAffinity, ClmParams};
use crate::error::{Error, Result};
use crate::numerics::params::uniform;
use crate::numerics::{Bound, Linear, Optimizer, ParamStore, Tape, Tensor, Var};
use crate::probe::{ridge_probe, ProbeResult};
use crate::seqvae::{
    dse_forward, dse_plus_terms, encode_batch, standard_normal, time_major, DseParams, DsePlusTerms, DseSample,
};
use crate::synth::{Episode, QuestionKind};

pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM: u64 = 2;
pub const PROBE_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sequence encoder, modality adapters, completion module and counterfactual
/// reasoner, all in one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub dse: DseParams,
    /// Raw audio to feature width.
    pub audio_proj: Linear,
    /// `s` to feature width.
    pub static_proj: Linear,
    /// Flattened `z_1..T` to feature width.
    pub dynamic_proj: Linear,
    pub imlm: ImlmParams,
    pub clm: ClmParams,
}

fn adapter(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng) -> Result<Linear> {
    let l = Linear::new(store, name, i, o, rng)?;
    // a nonzero bias keeps the features of zero-filled inputs away from the origin
    *store.get_mut(l.bias) = uniform(rng, &[1, o], 0.5).with_requires_grad();
    Ok(l)
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let h = &cfg.dse;
        let d = cfg.generator.dim;
        let dse = DseParams::new(&mut store, "dse", h, &mut rng)?;
        let audio_proj = adapter(&mut store, "adapter.audio", d, d, &mut rng)?;
        let static_proj = adapter(&mut store, "adapter.static", h.latent_dim, d, &mut rng)?;
        let dynamic_proj = adapter(&mut store, "adapter.dynamic", h.seq_len * h.latent_dim, d, &mut rng)?;
        let imlm = ImlmParams::new(&mut store, "imlm", d, cfg.repr_dim, &mut rng)?;
        let clm = ClmParams::new(&mut store, "clm", d, &mut rng)?;
        Ok(Self { store, dse, audio_proj, static_proj, dynamic_proj, imlm, clm })
    }

    /// Flags the completion-module parameters, which dcl mode never updates.
    pub fn imlm_params(&self) -> Vec<bool> {
        self.store.iter().map(|(n, _)| n.starts_with("imlm.")).collect()
    }
}

/// One batch of `B` episodes: `2B` objects, object 1 of every episode first.
#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<DseSample>,
    /// `2B x d`, zero rows where audio is missing.
    pub audio: Tensor,
    /// `B x d`.
    pub question: Tensor,
    pub labels: Vec<usize>,
    pub kinds: Vec<QuestionKind>,
    pub audio_present: Vec<bool>,
    pub video_present: Vec<bool>,
    /// Standard-normal intervention draws per counterfactual sample and modality.
    pub noise: Vec<[Tensor; 3]>,
}

impl Batch {
    pub fn pairs(&self) -> usize {
        self.labels.len()
    }
}

/// Presence flags over `2B` objects. Each half is drawn separately: first the
/// video-missing objects, then audio-missing ones among the rest, so no object
/// loses both.
pub fn draw_masks<R: Rng + ?Sized>(b: usize, alpha_audio: f64, alpha_video: f64, rng: &mut R) -> Result<(Vec<bool>, Vec<bool>)> {
    let mut audio = Vec::with_capacity(2 * b);
    let mut video = Vec::with_capacity(2 * b);
    for _ in 0..2 {
        let v = mark_missing(b, alpha_video, rng)?.present();
        let rest: Vec<usize> = (0..b).filter(|&i| v[i]).collect();
        let k = missing_count(b, alpha_audio);
        if k > rest.len() {
            return Err(Error::Config("alpha_audio + alpha_video exceeds 1".into()));
        }
        let mut a = vec![true; b];
        for j in sample(rng, rest.len(), k) {
            a[rest[j]] = false;
        }
        audio.extend(a);
        video.extend(v);
    }
    Ok((audio, video))
}

/// Draws masks, augmented views and reparameterization noise (`train`) or
/// deterministic views, then the intervention noise.
pub fn make_batch<R: Rng + ?Sized>(episodes: &[&Episode], cfg: &TrainConfig, rng: &mut R, train: bool) -> Result<Batch> {
    let b = episodes.len();
    if b < 2 {
        return Err(Error::invalid("a batch needs at least 2 episodes"));
    }
    let d = cfg.generator.dim;
    let (audio_present, video_present) = draw_masks(b, cfg.alpha_audio, cfg.alpha_video, rng)?;
    let objects: Vec<_> = episodes.iter().map(|e| &e.obj1).chain(episodes.iter().map(|e| &e.obj2)).collect();
    let mut samples = Vec::with_capacity(2 * b);
    let mut audio = Vec::with_capacity(2 * b * d);
    for (i, o) in objects.iter().enumerate() {
        samples.push(if train {
            DseSample::draw(o.features.clone(), &cfg.dse, rng)?
        } else {
            DseSample::deterministic(o.features.clone(), &cfg.dse)
        });
        if audio_present[i] {
            audio.extend_from_slice(o.audio.data());
        } else {
            audio.extend(std::iter::repeat(0.0).take(d));
        }
    }
    let mc = if train { cfg.mc_train } else { cfg.mc_eval };
    let noise = (0..mc)
        .map(|_| {
            [
                standard_normal(rng, &[2 * b, d]),
                standard_normal(rng, &[2 * b, d]),
                standard_normal(rng, &[2 * b, d]),
            ]
        })
        .collect();
    let mut question = Vec::with_capacity(b * d);
    for e in episodes {
        question.extend_from_slice(e.question.data());
    }
    Ok(Batch {
        samples,
        audio: Tensor::matrix(2 * b, d, audio)?,
        question: Tensor::matrix(b, d, question)?,
        labels: episodes.iter().map(|e| e.label).collect(),
        kinds: episodes.iter().map(|e| e.kind).collect(),
        audio_present,
        video_present,
        noise,
    })
}

/// Loss values of one step. `total = l_dse_plus + l_tie + l_imlm` on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub recon: f64,
    pub kl_s: f64,
    pub kl_z: f64,
    pub i_z: f64,
    pub i_s: f64,
    pub i_zs: f64,
    pub contra_s: f64,
    pub contra_z: f64,
    pub l_dse_plus: f64,
    pub l_tie: f64,
    pub imlm_unique: f64,
    pub imlm_share: f64,
    pub l_imlm: f64,
    pub total: f64,
    pub accuracy: f64,
}

struct Forward {
    /// Reasoner inputs per modality, after completion in rdcl mode.
    features: [Var; 3],
    tie: Var,
    dse: Option<DsePlusTerms>,
    imlm: Option<(Var, Var)>,
}

/// Puts the rows of `sub` (one per present object) back into a `2B`-row matrix
/// with zero rows for absent objects.
fn scatter(t: &Tape, sub: Var, present: &[bool]) -> Result<Var> {
    if present.iter().all(|&p| p) {
        return Ok(sub);
    }
    let width = t.shape(sub).1;
    let absent: Vec<usize> = (0..present.len()).filter(|&i| !present[i]).collect();
    let mut order: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    order.extend(&absent);
    let zeros = t.constant(Tensor::zeros(&[absent.len(), width]));
    restore_order(t, &[sub, zeros], &order)
}

fn forward(p: &Bound<'_>, model: &Model, batch: &Batch, cfg: &TrainConfig, mode: Mode, train: bool) -> Result<Forward> {
    let t = p.tape;
    let b = batch.pairs();
    let present: Vec<usize> = (0..2 * b).filter(|&i| batch.video_present[i]).collect();
    let seen: Vec<&DseSample> = present.iter().map(|&i| &batch.samples[i]).collect();

    let (s, z_flat, dse) = if train {
        let f = dse_forward(p, &model.dse, &seen)?;
        // pairs whose two videos are both observed, as rows of `seen`
        let mut pos = vec![None; 2 * b];
        for (k, &i) in present.iter().enumerate() {
            pos[i] = Some(k);
        }
        let (mut rows1, mut rows2) = (Vec::new(), Vec::new());
        for i in 0..b {
            if let (Some(a), Some(c)) = (pos[i], pos[b + i]) {
                rows1.push(a);
                rows2.push(c);
            }
        }
        let terms = dse_plus_terms(t, &f, &rows1, &rows2, &cfg.dse, cfg.pair_losses)?;
        (f.enc.s, f.z_flat, Some(terms))
    } else {
        let xs: Vec<&Tensor> = seen.iter().map(|s| &s.x).collect();
        let steps: Vec<Var> = time_major(&xs)?.into_iter().map(|m| t.constant(m)).collect();
        let n = seen.len();
        let lat = cfg.dse.latent_dim;
        let eps_s = t.constant(Tensor::zeros(&[n, lat]));
        let eps_z: Vec<Var> = steps.iter().map(|_| t.constant(Tensor::zeros(&[n, lat]))).collect();
        let enc = encode_batch(p, &model.dse, &steps, eps_s, &eps_z)?;
        (enc.s, t.hcat(&enc.z)?, None)
    };

    let audio = model.audio_proj.forward(p, t.constant(batch.audio.clone()))?;
    let stat = model.static_proj.forward(p, scatter(t, s, &batch.video_present)?)?;
    let dynm = model.dynamic_proj.forward(p, scatter(t, z_flat, &batch.video_present)?)?;
    let mut features = [audio, stat, dynm];
    let mut imlm = None;
    if mode == Mode::Rdcl {
        let present = [&batch.audio_present[..], &batch.video_present[..], &batch.video_present[..]];
        let out = complete_and_project(p, &model.imlm, features, present)?;
        features = out.projected;
        imlm = Some((out.unique_loss, out.share_loss));
    }
    let question = t.constant(batch.question.clone());
    let out = tie_forward(p, &model.clm, &cfg.clm, features, question, &batch.noise)?;
    Ok(Forward { features, tie: out.tie, dse, imlm })
}

/// Fraction of rows whose larger logit matches the label; ties answer 0.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

pub fn predictions(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| usize::from(logits.at(i, 1) > logits.at(i, 0))).collect()
}

/// Loss values and parameter gradients of one batch, without updating.
pub fn step_gradients(model: &Model, batch: &Batch, cfg: &TrainConfig, mode: Mode) -> Result<(StepRecord, Vec<Vec<f64>>)> {
    let t = Tape::new();
    let p = model.store.bind(&t);
    let f = forward(&p, model, batch, cfg, mode, true)?;
    let dse = f.dse.expect("training forward");
    let l_tie = cross_entropy_on_tape(&t, f.tie, &batch.labels)?;
    let (unique, share) = match f.imlm {
        Some((u, s)) => (u, s),
        None => (t.constant(Tensor::scalar(0.0)), t.constant(Tensor::scalar(0.0))),
    };
    let l_imlm = t.add(unique, share)?;
    let total = t.add(t.add(dse.total, l_tie)?, l_imlm)?;
    let v = |x: Var| t.scalar_value(x);
    let (o1, o2) = (dse.obj1.values(&t), dse.obj2.values(&t));
    let rec = StepRecord {
        recon: o1.recon + o2.recon,
        kl_s: o1.kl_s + o2.kl_s,
        kl_z: o1.kl_z + o2.kl_z,
        i_z: o1.i_z + o2.i_z,
        i_s: o1.i_s + o2.i_s,
        i_zs: o1.i_zs + o2.i_zs,
        contra_s: v(dse.contra_s),
        contra_z: v(dse.contra_z),
        l_dse_plus: v(dse.total),
        l_tie: v(l_tie),
        imlm_unique: v(unique),
        imlm_share: v(share),
        l_imlm: v(l_imlm),
        total: v(total),
        accuracy: accuracy_from_logits(&t.value(f.tie), &batch.labels),
    };
    if !rec.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let g = t.backward(total)?;
    Ok((rec, p.grads(&g, &model.store)))
}

fn train_step(model: &mut Model, opt: &mut Optimizer, batch: &Batch, cfg: &TrainConfig, mode: Mode) -> Result<StepRecord> {
    let (rec, grads) = step_gradients(model, batch, cfg, mode)?;
    opt.step(&mut model.store, &grads, None)?;
    Ok(rec)
}

/// One dcl update: sequence losses, counterfactual reasoning, no completion.
/// Missing inputs, if any, stay zero-filled.
pub fn train_step_dcl<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Optimizer,
    episodes: &[&Episode],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    let batch = make_batch(episodes, cfg, rng, true)?;
    train_step(model, opt, &batch, cfg, Mode::Dcl)
}

/// One rdcl update: as dcl with missing-modality completion and its losses.
pub fn train_step_rdcl<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Optimizer,
    episodes: &[&Episode],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    let batch = make_batch(episodes, cfg, rng, true)?;
    train_step(model, opt, &batch, cfg, Mode::Rdcl)
}

pub fn train_step_mode<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Optimizer,
    episodes: &[&Episode],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepRecord> {
    match cfg.mode {
        Mode::Dcl => train_step_dcl(model, opt, episodes, cfg, rng),
        Mode::Rdcl => train_step_rdcl(model, opt, episodes, cfg, rng),
    }
}

/// Total-indirect-effect logits of one batch with posterior-mean latents.
pub fn predict_batch(model: &Model, batch: &Batch, cfg: &TrainConfig) -> Result<Tensor> {
    let t = Tape::new();
    let p = model.store.bind_frozen(&t);
    let f = forward(&p, model, batch, cfg, cfg.mode, false)?;
    Ok(t.to_tensor(f.tie))
}

/// Fixed evaluation batches: consecutive chunks of `b`, the remainder joining the last.
pub fn eval_batches(n: usize, b: usize) -> Vec<std::ops::Range<usize>> {
    if n <= b {
        return vec![0..n];
    }
    let full = n / b;
    (0..full).map(|i| i * b..if i + 1 == full { n } else { (i + 1) * b }).collect()
}

/// Affinity graphs of evaluation batch `index`, built on the reasoner inputs
/// exactly as `evaluate` sees them.
pub fn batch_affinity(model: &Model, episodes: &[Episode], cfg: &TrainConfig, index: usize) -> Result<AugmentedAffinity> {
    let ranges = eval_batches(episodes.len(), cfg.batch_size);
    if index >= ranges.len() {
        return Err(Error::invalid(format!("batch {index} out of range: {} evaluation batches", ranges.len())));
    }
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let mut batch = None;
    for range in ranges.into_iter().take(index + 1) {
        let eps: Vec<&Episode> = episodes[range].iter().collect();
        batch = Some(make_batch(&eps, cfg, &mut rng, false)?);
    }
    let batch = batch.expect("at least one batch");
    let t = Tape::new();
    let p = model.store.bind_frozen(&t);
    let f = forward(&p, model, &batch, cfg, cfg.mode, false)?;
    let [a, s, z] = f.features.map(|v| t.to_tensor(v));
    build_augmented_affinity(&a, &s, &z, &cfg.clm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub static_accuracy: f64,
    pub dynamic_accuracy: f64,
    pub n: usize,
}

/// Accuracy of the total-indirect-effect prediction, overall and per question kind.
/// Masks and counterfactual noise come from a dedicated seeded stream.
pub fn evaluate(model: &Model, episodes: &[Episode], cfg: &TrainConfig) -> Result<EvalReport> {
    let mut rng = stream_rng(cfg.seed, EVAL_STREAM);
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for range in eval_batches(episodes.len(), cfg.batch_size) {
        let eps: Vec<&Episode> = episodes[range].iter().collect();
        let batch = make_batch(&eps, cfg, &mut rng, false)?;
        let logits = predict_batch(model, &batch, cfg)?;
        for ((pred, e), kind) in predictions(&logits).into_iter().zip(&eps).zip(&batch.kinds) {
            counts[kind.index()] += 1;
            hits[kind.index()] += usize::from(pred == e.label);
        }
    }
    let rate = |h: usize, c: usize| if c == 0 { 0.0 } else { h as f64 / c as f64 };
    let n = counts[0] + counts[1];
    Ok(EvalReport {
        accuracy: rate(hits[0] + hits[1], n),
        static_accuracy: rate(hits[0], counts[0]),
        dynamic_accuracy: rate(hits[1], counts[1]),
        n,
    })
}

/// Posterior draws of `s` (`N x d_lat`) and flattened `z` (`N x T*d_lat`) for
/// `xs`; with `rng == None` the posterior means.
pub fn encode_latents(
    model: &Model,
    xs: &[&Tensor],
    cfg: &TrainConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, Tensor)> {
    let mut s_rows = Vec::new();
    let mut z_rows = Vec::new();
    let lat = cfg.dse.latent_dim;
    for chunk in xs.chunks(64) {
        let t = Tape::new();
        let p = model.store.bind_frozen(&t);
        let steps: Vec<Var> = time_major(chunk)?.into_iter().map(|m| t.constant(m)).collect();
        let n = chunk.len();
        let mut noise = |shape: &[usize]| match rng.as_deref_mut() {
            Some(r) => standard_normal(r, shape),
            None => Tensor::zeros(shape),
        };
        let eps_s = t.constant(noise(&[n, lat]));
        let eps_z: Vec<Var> = steps.iter().map(|_| t.constant(noise(&[n, lat]))).collect();
        let enc = encode_batch(&p, &model.dse, &steps, eps_s, &eps_z)?;
        s_rows.push(t.to_tensor(enc.s));
        z_rows.push(t.to_tensor(t.hcat(&enc.z)?));
    }
    Ok((Tensor::vstack(&s_rows)?, Tensor::vstack(&z_rows)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub s_static: ProbeResult,
    pub s_dynamic: ProbeResult,
    pub z_static: ProbeResult,
    pub z_dynamic: ProbeResult,
}

impl ProbeReport {
    /// `(acc(s->static) - acc(z->static), acc(z->dynamic) - acc(s->dynamic))`.
    pub fn gaps(&self) -> (f64, f64) {
        (
            self.s_static.accuracy - self.z_static.accuracy,
            self.z_dynamic.accuracy - self.s_dynamic.accuracy,
        )
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

/// Ridge probes from `s` and from flattened `z` to each object's true classes,
/// fitted on the objects of the first half of `episodes`, scored on the rest.
/// The latents are single posterior draws, so variation the posterior treats
/// as noise carries no signal.
pub fn probe_disentanglement(model: &Model, episodes: &[Episode], cfg: &TrainConfig) -> Result<ProbeReport> {
    if episodes.len() < 2 {
        return Err(Error::invalid("probing needs at least 2 episodes"));
    }
    let objs: Vec<_> = episodes.iter().flat_map(|e| [&e.obj1, &e.obj2]).collect();
    let xs: Vec<&Tensor> = objs.iter().map(|o| &o.features).collect();
    let mut rng = stream_rng(cfg.seed, PROBE_STREAM);
    let (s, z) = encode_latents(model, &xs, cfg, Some(&mut rng))?;
    let (s, z) = (rows_of(&s), rows_of(&z));
    let stat: Vec<usize> = objs.iter().map(|o| o.static_class).collect();
    let dynm: Vec<usize> = objs.iter().map(|o| o.dynamic_class).collect();
    let half = 2 * (episodes.len() / 2);
    let g = &cfg.generator;
    let lam = cfg.probe_lambda;
    let fit = |x: &[Vec<f64>], y: &[usize], k: usize| ridge_probe(&x[..half], &y[..half], &x[half..], &y[half..], k, lam);
    Ok(ProbeReport {
        s_static: fit(&s, &stat, g.n_static_classes)?,
        s_dynamic: fit(&s, &dynm, g.n_dynamic_classes)?,
        z_static: fit(&z, &stat, g.n_static_classes)?,
        z_dynamic: fit(&z, &dynm, g.n_dynamic_classes)?,
    })
}
