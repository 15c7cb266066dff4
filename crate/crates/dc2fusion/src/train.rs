//! The training loop: one Adam step per sample, seeded per-epoch order and
//! augmentation, a per-step loss log and periodic checkpoints.

use std::path::{Path, PathBuf};

use dc2fusion_core::metrics::EvalMode;
use dc2fusion_core::optim::{Adam, AdamConfig};
use dc2fusion_core::phantom::VolumePair;
use dc2fusion_core::training::{epoch_plan, planned_pair, train_step, validate, EpochPlan, Validation};
use dc2fusion_core::{FusionNet, ModelConfig};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{load_split, Split};
use crate::error::{Error, Result};
use crate::report::{LossLog, LossRow};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub epochs: u32,
    pub seed: u64,
    /// Random cube rotation of every sample.
    pub augment: bool,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_interval: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Continue from this checkpoint, which must carry optimizer state.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many steps have been taken in total.
    pub stop_after: Option<u64>,
}

impl TrainConfig {
    pub fn new(checkpoint: &Path, log: &Path) -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            epochs: 1,
            seed: 0,
            augment: true,
            checkpoint_interval: 0,
            checkpoint: checkpoint.into(),
            log: log.into(),
            resume: None,
            stop_after: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    /// Total steps taken, including those before a resume.
    pub steps: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    /// Mean total loss of every epoch this run finished.
    pub epoch_means: Vec<(u64, f64)>,
    pub validation: Option<Validation>,
}

/// Trains on the `train` split under `root`, validating on `val` at the end
/// when that split is non-empty.
pub fn train(root: &Path, cfg: &TrainConfig) -> Result<TrainSummary> {
    let samples = load_split(root, Split::Train)?;
    let val = match load_split(root, Split::Val) {
        Ok(v) => v,
        Err(Error::Io { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    train_on(&samples, &val, cfg)
}

pub fn train_on(
    samples: &[(String, VolumePair)],
    val: &[(String, VolumePair)],
    cfg: &TrainConfig,
) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if cfg.epochs == 0 {
        return Err(Error::Usage("epochs must be at least 1".into()));
    }
    let net = FusionNet::new(cfg.model.clone())?;
    for (id, pair) in samples {
        cfg.model
            .check_input(pair.dims())
            .map_err(|e| Error::ShapeMismatch(format!("{id}: {e}")))?;
    }

    let (mut params, mut opt) = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config != cfg.model {
                return Err(Error::Usage(format!(
                    "{}: checkpoint model configuration differs from the requested one",
                    path.display()
                )));
            }
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Usage(format!("{}: checkpoint has no optimizer state", path.display())))?;
            (ck.params, opt)
        }
        None => {
            let params = net.init_params::<f32>(cfg.seed);
            let opt = Adam::new(cfg.adam, &params);
            (params, opt)
        }
    };

    let n = samples.len() as u64;
    let total = cfg.epochs as u64 * n;
    let start = opt.state.step;
    if start > total {
        return Err(Error::Usage(format!(
            "checkpoint is at step {start}, beyond the {total} steps of {} epochs",
            cfg.epochs
        )));
    }
    let end = cfg.stop_after.map_or(total, |s| s.min(total));
    let mut log = if cfg.resume.is_some() {
        LossLog::resume(&cfg.log, start)?
    } else {
        LossLog::create(&cfg.log)?
    };

    let mut summary = TrainSummary {
        steps: start,
        first_loss: None,
        last_loss: None,
        epoch_means: Vec::new(),
        validation: None,
    };
    let mut plan: Option<(u64, EpochPlan)> = None;
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0u64;
    let save = |params: &dc2fusion_core::ParamStore<f32>, opt: &Adam<f32>| {
        save_checkpoint(
            &cfg.checkpoint,
            &Checkpoint {
                config: cfg.model.clone(),
                params: params.clone(),
                optimizer: Some(opt.clone()),
            },
        )
    };

    for step in start..end {
        let epoch = step / n;
        let pos = (step % n) as usize;
        if plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            plan = Some((epoch, epoch_plan(cfg.seed, epoch, samples.len(), cfg.augment)));
        }
        let (_, p) = plan.as_ref().unwrap();
        let (id, source) = &samples[p.order[pos]];
        let pair = planned_pair(source, p.rotations[pos])?;
        let loss = match train_step(&net, &mut params, &mut opt, &pair.mri, &pair.pet) {
            Ok(l) => l,
            Err(dc2fusion_core::Error::NonFinite(_)) => {
                return Err(Error::NonFiniteLoss {
                    step,
                    sample: id.clone(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        log.append(&LossRow {
            step,
            epoch,
            sample: id.clone(),
            loss,
        })?;
        log::debug!("step {step} epoch {epoch} {id}: total {:.5}", loss.total);
        summary.first_loss.get_or_insert(loss.total);
        summary.last_loss = Some(loss.total);
        summary.steps = step + 1;
        epoch_sum += loss.total;
        epoch_count += 1;
        if pos as u64 == n - 1 {
            let mean = epoch_sum / epoch_count as f64;
            log::info!("epoch {epoch}: mean total loss {mean:.5} over {epoch_count} steps");
            summary.epoch_means.push((epoch, mean));
            epoch_sum = 0.0;
            epoch_count = 0;
        }
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            save(&params, &opt)?;
        }
    }
    save(&params, &opt)?;

    if summary.steps == total && !val.is_empty() {
        let v = validate(&net, &params, val, EvalMode::Slice2d(None))?;
        log::info!(
            "validation: mean total loss {:.5} over {} samples",
            v.mean.total,
            val.len()
        );
        summary.validation = Some(v);
    }
    Ok(summary)
}
