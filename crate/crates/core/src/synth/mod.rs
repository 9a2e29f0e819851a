//! Synthetic paired-object episodes with known static, dynamic and audio factors.
//!
//! Every frame of an object is `static_emb[c_s] + traj[c_d](t) + noise`. The
//! dynamic trajectories are `dynamic_scale * sqrt(d) * (u cos(2 pi f t / T) + v sin(2 pi f t / T))`
//! with one shared orthonormal pair `(u, v)` and a class-specific frequency `f`
//! coprime with `T`. Both parts have per-coordinate standard deviation of
//! about `static_scale` and `dynamic_scale`. Each class visits the same set of frames in a
//! different order: the frame mean is zero for every class and only temporal
//! structure tells dynamic classes apart.
//!
//! Seeding: the class embeddings come from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream 0; episode `i` of a dataset is drawn from the same seed on stream `i + 1`,
//! so episodes are independent of generation order.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::container::{self, DATASET_MAGIC};
use crate::numerics::Tensor;
use crate::probe::{ridge_probe, ProbeResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerativeSpec {
    pub n_static_classes: usize,
    pub n_dynamic_classes: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub noise_std: f64,
    pub audio_noise_std: f64,
    pub static_scale: f64,
    pub dynamic_scale: f64,
    pub seed: u64,
}

impl Default for GenerativeSpec {
    fn default() -> Self {
        Self {
            n_static_classes: 4,
            n_dynamic_classes: 4,
            seq_len: 8,
            dim: 32,
            noise_std: 0.1,
            audio_noise_std: 0.1,
            static_scale: 2.0,
            dynamic_scale: 2.0,
            seed: 0,
        }
    }
}

impl GenerativeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_static_classes < 2 || self.n_dynamic_classes < 2 {
            return Err(Error::Config("generator needs at least 2 static and 2 dynamic classes".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("audio_noise_std", self.audio_noise_std),
            ("static_scale", self.static_scale),
            ("dynamic_scale", self.dynamic_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let available = dynamic_frequencies(self.seq_len).len();
        if self.n_dynamic_classes > available {
            return Err(Error::Config(format!(
                "seq_len {} supports at most {available} dynamic classes",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Frequencies `1, -1, 3, -3, 5, ...` reduced mod `seq_len`, keeping those coprime
/// with `seq_len` and distinct.
pub fn dynamic_frequencies(seq_len: usize) -> Vec<usize> {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let t = seq_len as i64;
    let mut out = Vec::new();
    let mut k = 1i64;
    while k < t {
        for f in [k, -k] {
            let r = f.rem_euclid(t) as usize;
            if gcd(r, seq_len) == 1 && !out.contains(&r) {
                out.push(r);
            }
        }
        k += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuestionKind {
    Static,
    Dynamic,
}

impl QuestionKind {
    pub fn index(self) -> usize {
        match self {
            QuestionKind::Static => 0,
            QuestionKind::Dynamic => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(QuestionKind::Static),
            1 => Some(QuestionKind::Dynamic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuestionKind::Static => "static",
            QuestionKind::Dynamic => "dynamic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    /// `T x d`, one frame per row.
    pub features: Tensor,
    /// `1 x d`.
    pub audio: Tensor,
    pub static_class: usize,
    pub dynamic_class: usize,
}

impl ObjectRecord {
    pub fn class_of(&self, kind: QuestionKind) -> usize {
        match kind {
            QuestionKind::Static => self.static_class,
            QuestionKind::Dynamic => self.dynamic_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obj1: ObjectRecord,
    pub obj2: ObjectRecord,
    /// `1 x d` basis vector for the queried property.
    pub question: Tensor,
    pub kind: QuestionKind,
    pub label: usize,
}

impl Episode {
    /// The same episode with the objects exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            obj1: self.obj2.clone(),
            obj2: self.obj1.clone(),
            question: self.question.clone(),
            kind: self.kind,
            label: compare(self.kind, &self.obj2, &self.obj1),
        }
    }
}

/// 1 when object 2 has the larger queried class, else 0.
pub fn compare(kind: QuestionKind, obj1: &ObjectRecord, obj2: &ObjectRecord) -> usize {
    usize::from(obj2.class_of(kind) > obj1.class_of(kind))
}

/// Fixed class embeddings shared by every episode of one spec.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GenerativeSpec,
    static_emb: Vec<Vec<f64>>,
    audio_emb: Vec<Vec<f64>>,
    trajectories: Vec<Vec<Vec<f64>>>,
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Generator {
    pub fn new(spec: GenerativeSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let t_len = spec.seq_len;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let static_emb = (0..spec.n_static_classes).map(|_| gaussian_vec(&mut rng, d, spec.static_scale)).collect();
        let audio_emb = (0..spec.n_static_classes * spec.n_dynamic_classes)
            .map(|_| gaussian_vec(&mut rng, d, 1.0))
            .collect();

        let u = normalized(gaussian_vec(&mut rng, d, 1.0));
        let mut v = gaussian_vec(&mut rng, d, 1.0);
        let along: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(b, a)| *b -= along * a);
        let v = normalized(v);

        let freqs = dynamic_frequencies(t_len);
        let amp = spec.dynamic_scale * (d as f64).sqrt();
        let trajectories = (0..spec.n_dynamic_classes)
            .map(|c| {
                let f = freqs[c] as f64;
                (0..t_len)
                    .map(|t| {
                        let phase = 2.0 * std::f64::consts::PI * f * t as f64 / t_len as f64;
                        let (sin, cos) = phase.sin_cos();
                        (0..d).map(|j| amp * (u[j] * cos + v[j] * sin)).collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { spec, static_emb, audio_emb, trajectories })
    }

    pub fn spec(&self) -> &GenerativeSpec {
        &self.spec
    }

    pub fn static_embedding(&self, class: usize) -> &[f64] {
        &self.static_emb[class]
    }

    /// `T x d` noiseless motion pattern of a dynamic class.
    pub fn trajectory(&self, class: usize) -> Tensor {
        Tensor::from_rows(&self.trajectories[class]).expect("finite trajectory")
    }

    /// `1 x d` embedding of a question kind: a standard basis vector.
    pub fn question(&self, kind: QuestionKind) -> Tensor {
        let mut q = vec![0.0; self.spec.dim];
        q[kind.index()] = 1.0;
        Tensor::row(&q)
    }

    /// An object of the given classes; noise is drawn frame by frame, then audio.
    pub fn object_of(&self, static_class: usize, dynamic_class: usize, rng: &mut impl Rng) -> ObjectRecord {
        let s = &self.spec;
        let d = s.dim;
        let mut frames = Vec::with_capacity(s.seq_len * d);
        for t in 0..s.seq_len {
            let traj = &self.trajectories[dynamic_class][t];
            for j in 0..d {
                let n: f64 = rng.sample(StandardNormal);
                frames.push(self.static_emb[static_class][j] + traj[j] + s.noise_std * n);
            }
        }
        let table = &self.audio_emb[static_class * s.n_dynamic_classes + dynamic_class];
        let audio: Vec<f64> = table
            .iter()
            .map(|a| a + s.audio_noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ObjectRecord {
            features: Tensor::matrix(s.seq_len, d, frames).expect("finite frames"),
            audio: Tensor::row(&audio),
            static_class,
            dynamic_class,
        }
    }

    pub fn object(&self, rng: &mut impl Rng) -> ObjectRecord {
        let cs = rng.gen_range(0..self.spec.n_static_classes);
        let cd = rng.gen_range(0..self.spec.n_dynamic_classes);
        self.object_of(cs, cd, rng)
    }

    /// Question kind, object 1, then object 2 whose queried class differs from
    /// object 1's (drawn uniformly among the others).
    pub fn episode(&self, rng: &mut impl Rng) -> Episode {
        let kind = if rng.gen_bool(0.5) { QuestionKind::Dynamic } else { QuestionKind::Static };
        let obj1 = self.object(rng);
        let n_queried = match kind {
            QuestionKind::Static => self.spec.n_static_classes,
            QuestionKind::Dynamic => self.spec.n_dynamic_classes,
        };
        let mut other = rng.gen_range(0..n_queried - 1);
        if other >= obj1.class_of(kind) {
            other += 1;
        }
        let obj2 = match kind {
            QuestionKind::Static => {
                let cd = rng.gen_range(0..self.spec.n_dynamic_classes);
                self.object_of(other, cd, rng)
            }
            QuestionKind::Dynamic => {
                let cs = rng.gen_range(0..self.spec.n_static_classes);
                self.object_of(cs, other, rng)
            }
        };
        let label = compare(kind, &obj1, &obj2);
        Episode { obj1, obj2, question: self.question(kind), kind, label }
    }

    /// Episode `index` of this spec's dataset.
    pub fn episode_at(&self, index: u64) -> Episode {
        self.episode(&mut episode_rng(self.spec.seed, index))
    }
}

pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

pub fn generate_object(spec: &GenerativeSpec, rng: &mut impl Rng) -> Result<ObjectRecord> {
    Ok(Generator::new(spec.clone())?.object(rng))
}

pub fn generate_episode(spec: &GenerativeSpec, rng: &mut impl Rng) -> Result<Episode> {
    Ok(Generator::new(spec.clone())?.episode(rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenerativeSpec,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Episodes `offset .. offset + n` of the spec's stream.
    pub fn generate_range(spec: &GenerativeSpec, offset: u64, n: usize) -> Result<Self> {
        let g = Generator::new(spec.clone())?;
        let episodes = (0..n as u64).map(|i| g.episode_at(offset + i)).collect();
        Ok(Self { spec: spec.clone(), episodes })
    }

    pub fn label_balance(&self) -> f64 {
        self.episodes.iter().map(|e| e.label as f64).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (meta, tensors) = self.tensors()?;
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        container::encode(DATASET_MAGIC, meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = container::decode(DATASET_MAGIC, bytes)?;
        Self::from_tensors(meta, tensors)
    }

    fn tensors(&self) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
        let n = self.len();
        let (t_len, d) = (self.spec.seq_len, self.spec.dim);
        let mut out = Vec::new();
        for (slot, pick) in [("obj1", 0usize), ("obj2", 1)] {
            let mut feats = Vec::with_capacity(n * t_len * d);
            let mut audio = Vec::with_capacity(n * d);
            let mut stat = Vec::with_capacity(n);
            let mut dynm = Vec::with_capacity(n);
            for e in &self.episodes {
                let o = if pick == 0 { &e.obj1 } else { &e.obj2 };
                if o.features.shape() != [t_len, d] || o.audio.shape() != [1, d] {
                    return Err(Error::shape("write_dataset", "episode shapes disagree with the spec"));
                }
                feats.extend_from_slice(o.features.data());
                audio.extend_from_slice(o.audio.data());
                stat.push(o.static_class as f64);
                dynm.push(o.dynamic_class as f64);
            }
            out.push((format!("{slot}.features"), Tensor::new(vec![n, t_len, d], feats)?));
            out.push((format!("{slot}.audio"), Tensor::new(vec![n, d], audio)?));
            out.push((format!("{slot}.static_class"), Tensor::new(vec![n], stat)?));
            out.push((format!("{slot}.dynamic_class"), Tensor::new(vec![n], dynm)?));
        }
        let mut q = Vec::with_capacity(n * d);
        for e in &self.episodes {
            q.extend_from_slice(e.question.data());
        }
        out.push(("question".into(), Tensor::new(vec![n, d], q)?));
        out.push((
            "question_kind".into(),
            Tensor::new(vec![n], self.episodes.iter().map(|e| e.kind.index() as f64).collect())?,
        ));
        out.push(("label".into(), Tensor::new(vec![n], self.episodes.iter().map(|e| e.label as f64).collect())?));
        let meta = serde_json::json!({ "spec": self.spec, "episodes": n });
        Ok((meta, out))
    }

    fn from_tensors(meta: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let bad = |detail: String| Error::Parse { offset: 0, detail };
        let spec: GenerativeSpec = serde_json::from_value(meta.get("spec").cloned().unwrap_or_default())
            .map_err(|e| bad(format!("dataset spec: {e}")))?;
        let n = meta.get("episodes").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing episode count".into()))? as usize;
        let (t_len, d) = (spec.seq_len, spec.dim);
        let find = |name: &str, shape: &[usize]| -> Result<&Tensor> {
            let t = tensors
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, t)| t)
                .ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let class = |v: f64, limit: usize, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < limit {
                Ok(v as usize)
            } else {
                Err(bad(format!("invalid {what} {v}")))
            }
        };
        let mut objects: Vec<Vec<ObjectRecord>> = Vec::new();
        for slot in ["obj1", "obj2"] {
            let feats = find(&format!("{slot}.features"), &[n, t_len, d])?;
            let audio = find(&format!("{slot}.audio"), &[n, d])?;
            let stat = find(&format!("{slot}.static_class"), &[n])?;
            let dynm = find(&format!("{slot}.dynamic_class"), &[n])?;
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                v.push(ObjectRecord {
                    features: Tensor::matrix(t_len, d, feats.data()[i * t_len * d..(i + 1) * t_len * d].to_vec())?,
                    audio: Tensor::row(&audio.data()[i * d..(i + 1) * d]),
                    static_class: class(stat.data()[i], spec.n_static_classes, "static class")?,
                    dynamic_class: class(dynm.data()[i], spec.n_dynamic_classes, "dynamic class")?,
                });
            }
            objects.push(v);
        }
        let question = find("question", &[n, d])?;
        let kinds = find("question_kind", &[n])?;
        let labels = find("label", &[n])?;
        let obj2 = objects.pop().unwrap();
        let obj1 = objects.pop().unwrap();
        let episodes = obj1
            .into_iter()
            .zip(obj2)
            .enumerate()
            .map(|(i, (obj1, obj2))| {
                Ok(Episode {
                    obj1,
                    obj2,
                    question: Tensor::row(&question.data()[i * d..(i + 1) * d]),
                    kind: QuestionKind::from_index(class(kinds.data()[i], 2, "question kind")?).unwrap(),
                    label: class(labels.data()[i], 2, "label")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, episodes })
    }
}

pub fn generate_dataset(spec: &GenerativeSpec, n: usize) -> Result<Dataset> {
    Dataset::generate_range(spec, 0, n)
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    let mut w = BufWriter::new(File::create(path)?);
    std::io::Write::write_all(&mut w, &bytes)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut BufReader::new(File::open(path)?), &mut bytes)?;
    Dataset::from_bytes(&bytes)
}

/// Ridge probes from each object's frame mean to its true classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawProbeReport {
    pub static_acc: ProbeResult,
    pub dynamic_acc: ProbeResult,
    pub static_base_rate: f64,
    pub dynamic_base_rate: f64,
}

/// Fits on the first half of the objects and tests on the second half.
pub fn raw_feature_probe(dataset: &Dataset) -> Result<RawProbeReport> {
    let objs: Vec<&ObjectRecord> = dataset.episodes.iter().flat_map(|e| [&e.obj1, &e.obj2]).collect();
    if objs.len() < 4 {
        return Err(Error::invalid("raw feature probe needs at least 2 episodes"));
    }
    let means: Vec<Vec<f64>> = objs
        .iter()
        .map(|o| {
            let (t_len, d) = (o.features.rows(), o.features.cols());
            (0..d).map(|j| (0..t_len).map(|t| o.features.at(t, j)).sum::<f64>() / t_len as f64).collect()
        })
        .collect();
    let half = objs.len() / 2;
    let stat: Vec<usize> = objs.iter().map(|o| o.static_class).collect();
    let dynm: Vec<usize> = objs.iter().map(|o| o.dynamic_class).collect();
    let spec = &dataset.spec;
    Ok(RawProbeReport {
        static_acc: ridge_probe(&means[..half], &stat[..half], &means[half..], &stat[half..], spec.n_static_classes, 1e-3)?,
        dynamic_acc: ridge_probe(&means[..half], &dynm[..half], &means[half..], &dynm[half..], spec.n_dynamic_classes, 1e-3)?,
        static_base_rate: 1.0 / spec.n_static_classes as f64,
        dynamic_base_rate: 1.0 / spec.n_dynamic_classes as f64,
    })
}
