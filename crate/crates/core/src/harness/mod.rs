//! Training and evaluation driver: configuration, batch-wise dcl/rdcl updates,
//! metrics and checkpoints.

pub mod config;
pub mod model;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{Mode, TrainConfig, ENV_PREFIX, KEYS};
pub use model::{
    accuracy_from_logits, batch_affinity, draw_masks, encode_latents, eval_batches, evaluate, make_batch, predict_batch, predictions,
    probe_disentanglement, step_gradients, stream_rng, train_step_dcl, train_step_mode, train_step_rdcl, Batch,
    EvalReport, Model, ProbeReport, StepRecord, EVAL_STREAM, INIT_STREAM, PROBE_STREAM, TRAIN_STREAM,
};

use crate::error::{Error, Result};
use crate::numerics::container::{self, CHECKPOINT_MAGIC};
use crate::numerics::{Optimizer, ParamStore, Tensor};
use crate::synth::{read_dataset, Dataset};

/// Training and validation splits for a config: generated episodes
/// `0..train_episodes` and the following `val_episodes`, or a dataset file
/// whose last `val_episodes` episodes are held out.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        None => Ok((
            Dataset::generate_range(&cfg.generator, 0, cfg.train_episodes)?,
            Dataset::generate_range(&cfg.generator, cfg.train_episodes as u64, cfg.val_episodes)?,
        )),
        Some(path) => {
            let mut all = read_dataset(path)?;
            if all.spec.seq_len != cfg.generator.seq_len || all.spec.dim != cfg.generator.dim {
                return Err(Error::Config(format!(
                    "dataset {} has seq_len {} and dim {}, config expects {} and {}",
                    path.display(),
                    all.spec.seq_len,
                    all.spec.dim,
                    cfg.generator.seq_len,
                    cfg.generator.dim
                )));
            }
            if all.len() < cfg.val_episodes + cfg.batch_size {
                return Err(Error::Config(format!("dataset {} is too small", path.display())));
            }
            let val = all.episodes.split_off(all.len() - cfg.val_episodes);
            Ok((Dataset { spec: all.spec.clone(), episodes: all.episodes }, Dataset { spec: all.spec, episodes: val }))
        }
    }
}

/// Per-epoch metrics. Loss fields are means over the epoch's steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: StepRecord,
    pub train_accuracy: f64,
    pub val: EvalReport,
    pub probe: ProbeReport,
    /// Seconds since training started; kept out of the CSV.
    pub wall_clock: f64,
}

pub const CSV_COLUMNS: &[&str] = &[
    "epoch",
    "steps",
    "l_dse_plus",
    "recon",
    "kl_s",
    "kl_z",
    "i_z",
    "i_s",
    "i_zs",
    "contra_s",
    "contra_z",
    "l_tie",
    "l_imlm",
    "imlm_unique",
    "imlm_share",
    "total",
    "train_acc",
    "val_acc",
    "val_acc_static",
    "val_acc_dynamic",
    "probe_s_static",
    "probe_s_dynamic",
    "probe_z_static",
    "probe_z_dynamic",
];

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let values = [
            l.l_dse_plus,
            l.recon,
            l.kl_s,
            l.kl_z,
            l.i_z,
            l.i_s,
            l.i_zs,
            l.contra_s,
            l.contra_z,
            l.l_tie,
            l.l_imlm,
            l.imlm_unique,
            l.imlm_share,
            l.total,
            self.train_accuracy,
            self.val.accuracy,
            self.val.static_accuracy,
            self.val.dynamic_accuracy,
            self.probe.s_static.accuracy,
            self.probe.s_dynamic.accuracy,
            self.probe.z_static.accuracy,
            self.probe.z_dynamic.accuracy,
        ];
        let mut row = format!("{},{}", self.epoch, self.steps);
        for v in values {
            row.push_str(&format!(",{v}"));
        }
        row
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn mean_records(steps: &[StepRecord]) -> StepRecord {
    let n = steps.len().max(1) as f64;
    let mut m = StepRecord::default();
    for s in steps {
        m.recon += s.recon / n;
        m.kl_s += s.kl_s / n;
        m.kl_z += s.kl_z / n;
        m.i_z += s.i_z / n;
        m.i_s += s.i_s / n;
        m.i_zs += s.i_zs / n;
        m.contra_s += s.contra_s / n;
        m.contra_z += s.contra_z / n;
        m.l_dse_plus += s.l_dse_plus / n;
        m.l_tie += s.l_tie / n;
        m.imlm_unique += s.imlm_unique / n;
        m.imlm_share += s.imlm_share / n;
        m.l_imlm += s.l_imlm / n;
        m.total += s.total / n;
        m.accuracy += s.accuracy / n;
    }
    m
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("at least one epoch")
    }
}

/// Runs `cfg.epochs` epochs of shuffled, fixed-size batches (a trailing partial
/// batch is dropped), evaluating and probing on `val` after each epoch.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val: &Dataset,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = Model::new(cfg)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.store);
    let mut rng = stream_rng(cfg.seed, TRAIN_STREAM);
    let b = cfg.batch_size;
    if train_set.len() < b {
        return Err(Error::Config(format!("{} training episodes cannot fill a batch of {b}", train_set.len())));
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut steps = Vec::with_capacity(order.len() / b);
        for chunk in order.chunks_exact(b) {
            let eps: Vec<_> = chunk.iter().map(|&i| &train_set.episodes[i]).collect();
            steps.push(train_step_mode(&mut model, &mut opt, &eps, cfg, &mut rng)?);
        }
        let loss = mean_records(&steps);
        let rec = MetricsRecord {
            epoch,
            steps: steps.len(),
            loss,
            train_accuracy: loss.accuracy,
            val: evaluate(&model, &val.episodes, cfg)?,
            probe: probe_disentanglement(&model, &val.episodes, cfg)?,
            wall_clock: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome { model, records })
}

/// Summary written next to the CSV.
pub fn summary_json(cfg: &TrainConfig, records: &[MetricsRecord]) -> serde_json::Value {
    let config: serde_json::Map<String, serde_json::Value> =
        KEYS.iter().map(|(k, _)| (k.to_string(), cfg.get(k).unwrap_or_default().into())).collect();
    serde_json::json!({
        "config": config,
        "epochs": records,
        "final": records.last(),
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, cfg: &TrainConfig) -> Result<()> {
    let names: Vec<(String, &Tensor)> = model.store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let refs: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let meta = serde_json::json!({ "config": cfg.to_text() });
    let bytes = container::encode(CHECKPOINT_MAGIC, meta, &refs)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let bytes = std::fs::read(path)?;
    let (meta, tensors) = container::decode(CHECKPOINT_MAGIC, &bytes)?;
    let text = meta
        .get("config")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Parse { offset: 0, detail: "checkpoint has no config".into() })?;
    let cfg = TrainConfig::from_text(text)?;
    let mut model = Model::new(&cfg)?;
    let mut loaded = ParamStore::new();
    for (name, t) in tensors {
        loaded.add(name, t)?;
    }
    model.store.load_from(&loaded)?;
    Ok((model, cfg))
}
