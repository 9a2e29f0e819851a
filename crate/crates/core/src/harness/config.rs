//! Flat `key = value` training configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' anything
//! entry   := key ws* '=' ws* value ws* ('#' anything)?
//! key     := [a-z0-9_]+
//! ```
//!
//! Later entries override earlier ones. Environment variables named
//! `AVREASON_<KEY>` (key upper-cased) override the file.

use std::path::{Path, PathBuf};

use crate::completion::missing_count;
use crate::counterfactual::ClmHyper;
use crate::error::{Error, Result};
use crate::numerics::OptimizerKind;
use crate::seqvae::DseHyper;
use crate::synth::GenerativeSpec;

pub const ENV_PREFIX: &str = "AVREASON_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Dcl,
    Rdcl,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dcl => "dcl",
            Mode::Rdcl => "rdcl",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Seed of the generated data; follows `seed` when unset.
    pub data_seed: Option<u64>,
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub train_episodes: usize,
    pub val_episodes: usize,
    /// Dataset file; when set, its last `val_episodes` episodes form the validation split.
    pub data: Option<PathBuf>,
    pub dse: DseHyper,
    pub pair_losses: bool,
    pub clm: ClmHyper,
    pub mc_train: usize,
    pub mc_eval: usize,
    pub alpha_audio: f64,
    pub alpha_video: f64,
    pub repr_dim: usize,
    pub generator: GenerativeSpec,
    pub probe_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let generator = GenerativeSpec::default();
        let dse = DseHyper { seq_len: generator.seq_len, feat_dim: generator.dim, ..DseHyper::default() };
        Self {
            seed: 0,
            data_seed: None,
            mode: Mode::Dcl,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_episodes: 2000,
            val_episodes: 500,
            data: None,
            dse,
            pair_losses: true,
            clm: ClmHyper::default(),
            mc_train: 1,
            mc_eval: 5,
            alpha_audio: 0.0,
            alpha_video: 0.0,
            repr_dim: 16,
            generator,
            probe_lambda: 1.0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed: initialisation, shuffling, augmentation and noise"),
    ("data_seed", "seed of the generated episodes (default: seed)"),
    ("mode", "dcl | rdcl"),
    ("epochs", "passes over the training split"),
    ("batch_size", "episodes per step (>= 2)"),
    ("learning_rate", "optimizer step size"),
    ("optimizer", "adam | sgd"),
    ("train_episodes", "generated training episodes"),
    ("val_episodes", "generated validation episodes"),
    ("data", "dataset file written by gen-data (optional)"),
    ("gamma", "weight of the KL and contrastive terms"),
    ("theta", "weight of the I(z;s) penalty"),
    ("tau", "contrastive temperature"),
    ("delta", "pair contrastive margin"),
    ("n_negatives", "negatives per contrastive anchor: all | integer"),
    ("latent_dim", "size of s and of each z_t"),
    ("hidden", "LSTM hidden size"),
    ("motion_noise", "std of the motion augmentation noise"),
    ("pair_losses", "add the pairwise s/z contrastive losses: true | false"),
    ("tau_graph", "affinity temperature"),
    ("k", "neighbours kept per affinity row"),
    ("mc_train", "counterfactual draws per training step"),
    ("mc_eval", "counterfactual draws per evaluation batch"),
    ("alpha_audio", "fraction of objects with audio missing"),
    ("alpha_video", "fraction of objects with video missing"),
    ("repr_dim", "shared/unique representation size"),
    ("n_static_classes", "generator static classes"),
    ("n_dynamic_classes", "generator dynamic classes"),
    ("seq_len", "frames per object"),
    ("dim", "feature width"),
    ("noise_std", "frame noise std"),
    ("audio_noise_std", "audio noise std"),
    ("static_scale", "static embedding scale"),
    ("dynamic_scale", "dynamic trajectory scale"),
    ("probe_lambda", "ridge penalty of the linear probes"),
];

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data_seed" => self.data_seed = if v.is_empty() { None } else { Some(parse_num(key, v)?) },
            "mode" => {
                self.mode = match v {
                    "dcl" => Mode::Dcl,
                    "rdcl" => Mode::Rdcl,
                    _ => return Err(Error::Config(format!("mode: expected dcl or rdcl, got `{v}`"))),
                }
            }
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(Error::Config(format!("optimizer: expected adam or sgd, got `{v}`"))),
                }
            }
            "train_episodes" => self.train_episodes = parse_num(key, v)?,
            "val_episodes" => self.val_episodes = parse_num(key, v)?,
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "gamma" => self.dse.gamma = parse_num(key, v)?,
            "theta" => self.dse.theta = parse_num(key, v)?,
            "tau" => self.dse.tau = parse_num(key, v)?,
            "delta" => self.dse.delta = parse_num(key, v)?,
            "n_negatives" => self.dse.n_negatives = if v == "all" { None } else { Some(parse_num(key, v)?) },
            "latent_dim" => self.dse.latent_dim = parse_num(key, v)?,
            "hidden" => self.dse.hidden = parse_num(key, v)?,
            "motion_noise" => self.dse.motion_noise = parse_num(key, v)?,
            "pair_losses" => self.pair_losses = parse_bool(key, v)?,
            "tau_graph" => self.clm.tau = parse_num(key, v)?,
            "k" => self.clm.k = parse_num(key, v)?,
            "mc_train" => self.mc_train = parse_num(key, v)?,
            "mc_eval" => self.mc_eval = parse_num(key, v)?,
            "alpha_audio" => self.alpha_audio = parse_num(key, v)?,
            "alpha_video" => self.alpha_video = parse_num(key, v)?,
            "repr_dim" => self.repr_dim = parse_num(key, v)?,
            "n_static_classes" => self.generator.n_static_classes = parse_num(key, v)?,
            "n_dynamic_classes" => self.generator.n_dynamic_classes = parse_num(key, v)?,
            "seq_len" => {
                self.generator.seq_len = parse_num(key, v)?;
                self.dse.seq_len = self.generator.seq_len;
            }
            "dim" => {
                self.generator.dim = parse_num(key, v)?;
                self.dse.feat_dim = self.generator.dim;
            }
            "noise_std" => self.generator.noise_std = parse_num(key, v)?,
            "audio_noise_std" => self.generator.audio_noise_std = parse_num(key, v)?,
            "static_scale" => self.generator.static_scale = parse_num(key, v)?,
            "dynamic_scale" => self.generator.dynamic_scale = parse_num(key, v)?,
            "probe_lambda" => self.probe_lambda = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`; valid keys: {}", valid_keys()))),
        }
        self.generator.seed = self.data_seed.unwrap_or(self.seed);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.map(|s| s.to_string()).unwrap_or_default(),
            "mode" => self.mode.name().into(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Adam => "adam".into(),
                OptimizerKind::Sgd => "sgd".into(),
            },
            "train_episodes" => self.train_episodes.to_string(),
            "val_episodes" => self.val_episodes.to_string(),
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "gamma" => self.dse.gamma.to_string(),
            "theta" => self.dse.theta.to_string(),
            "tau" => self.dse.tau.to_string(),
            "delta" => self.dse.delta.to_string(),
            "n_negatives" => self.dse.n_negatives.map(|k| k.to_string()).unwrap_or_else(|| "all".into()),
            "latent_dim" => self.dse.latent_dim.to_string(),
            "hidden" => self.dse.hidden.to_string(),
            "motion_noise" => self.dse.motion_noise.to_string(),
            "pair_losses" => self.pair_losses.to_string(),
            "tau_graph" => self.clm.tau.to_string(),
            "k" => self.clm.k.to_string(),
            "mc_train" => self.mc_train.to_string(),
            "mc_eval" => self.mc_eval.to_string(),
            "alpha_audio" => self.alpha_audio.to_string(),
            "alpha_video" => self.alpha_video.to_string(),
            "repr_dim" => self.repr_dim.to_string(),
            "n_static_classes" => self.generator.n_static_classes.to_string(),
            "n_dynamic_classes" => self.generator.n_dynamic_classes.to_string(),
            "seq_len" => self.generator.seq_len.to_string(),
            "dim" => self.generator.dim.to_string(),
            "noise_std" => self.generator.noise_std.to_string(),
            "audio_noise_std" => self.generator.audio_noise_std.to_string(),
            "static_scale" => self.generator.static_scale.to_string(),
            "dynamic_scale" => self.generator.dynamic_scale.to_string(),
            "probe_lambda" => self.probe_lambda.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; errors carry the line number.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(key.trim(), value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies `AVREASON_<KEY>` variables; any other `AVREASON_` variable is an error.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|s| (s.to_ascii_lowercase(), v)))
            .collect();
        found.sort();
        for (key, value) in found {
            self.set(&key, &value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{ENV_PREFIX}{}: {msg}", key.to_ascii_uppercase())),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Every key with its current value, in `KEYS` order; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let v = self.get(k).expect("listed key");
            if v.is_empty() {
                continue;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.batch_size;
        if b < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.mc_train == 0 || self.mc_eval == 0 {
            return Err(Error::Config("mc_train and mc_eval must be >= 1".into()));
        }
        if self.repr_dim == 0 {
            return Err(Error::Config("repr_dim must be >= 1".into()));
        }
        if !(self.probe_lambda >= 0.0) {
            return Err(Error::Config("probe_lambda must be >= 0".into()));
        }
        if self.data.is_none() && (self.train_episodes < b || self.val_episodes < 2) {
            return Err(Error::Config("need at least one training batch and two validation episodes".into()));
        }
        self.generator.validate()?;
        self.dse.validate()?;
        self.clm.validate(2 * b)?;
        for (name, a) in [("alpha_audio", self.alpha_audio), ("alpha_video", self.alpha_video)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        let (ma, mv) = (missing_count(b, self.alpha_audio), missing_count(b, self.alpha_video));
        if ma + mv > b {
            return Err(Error::Config("alpha_audio + alpha_video exceeds 1: some object would have nothing".into()));
        }
        if b < 2 * mv + 2 {
            return Err(Error::Config(format!(
                "alpha_video = {} leaves fewer than 2 fully observed pairs per batch of {b}",
                self.alpha_video
            )));
        }
        if self.mode == Mode::Rdcl && (ma == b || mv == b) {
            return Err(Error::Config("rdcl cannot complete a modality missing from the whole batch".into()));
        }
        Ok(())
    }
}
