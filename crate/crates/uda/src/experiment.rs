//! End-to-end runs: data generation, training, evaluation and the output
//! files of a run.

use crate::config::PipelineConfig;
use crate::data::{make_dataset, make_event_test_set, Dataset, EventTestSet};
use crate::error::Result;
use crate::eval::{accuracy, evaluate, predict_images};
use crate::train::{merge_stores, train, Trained};
use evbridge_autodiff::ParamStore;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "model.evbr";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";

/// Summary written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Accuracy on held-out labeled events.
    pub accuracy: f64,
    /// Accuracy of the same head on the training images.
    pub image_accuracy: f64,
    pub seed: u64,
    pub iterations: u64,
    pub disc_steps: u64,
    pub gen_steps: u64,
    pub standard_sign: bool,
    pub flow_module_enabled: bool,
    pub split_enabled: bool,
    pub augm_enabled: bool,
    pub source_only: bool,
}

pub struct RunOutput {
    pub trained: Trained,
    pub metrics: Metrics,
}

/// Training and test data of a config.
pub fn make_data(cfg: &PipelineConfig) -> Result<(Dataset, EventTestSet)> {
    cfg.validate()?;
    Ok((
        make_dataset(cfg, cfg.train_scenes)?,
        make_event_test_set(cfg, cfg.test_scenes)?,
    ))
}

pub fn run(
    cfg: &PipelineConfig,
    data: &Dataset,
    test: &EventTestSet,
    log: Option<&mut dyn Write>,
) -> Result<RunOutput> {
    let trained = train(cfg, data, log)?;
    let acc = evaluate(cfg, &trained.gen, test)?;
    let img_acc = accuracy(
        &predict_images(cfg, &trained.gen, &data.images)?,
        &data.labels,
    )?;
    let metrics = Metrics {
        accuracy: acc,
        image_accuracy: img_acc,
        seed: cfg.seed,
        iterations: cfg.iterations,
        disc_steps: trained.schedule.disc_steps_taken,
        gen_steps: trained.schedule.gen_steps_taken,
        standard_sign: cfg.standard_sign,
        flow_module_enabled: cfg.flow_module_enabled,
        split_enabled: cfg.split_enabled,
        augm_enabled: cfg.augm_enabled,
        source_only: cfg.source_only,
    };
    Ok(RunOutput { trained, metrics })
}

/// Trains with `cfg` and writes checkpoint, loss log, metrics and the
/// effective config into `dir`.
pub fn run_to_dir(cfg: &PipelineConfig, dir: &Path) -> Result<Metrics> {
    std::fs::create_dir_all(dir)?;
    let (data, test) = make_data(cfg)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(dir.join(LOSSES_FILE))?);
    let out = run(cfg, &data, &test, Some(&mut log))?;
    log.flush()?;
    merge_stores(&out.trained.gen, &out.trained.disc)?.save(&dir.join(CHECKPOINT_FILE))?;
    std::fs::write(
        dir.join(METRICS_FILE),
        serde_json::to_string_pretty(&out.metrics)? + "\n",
    )?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(out.metrics)
}

/// Generator parameters from a merged checkpoint.
pub fn load_generator(path: &Path) -> Result<ParamStore> {
    Ok(ParamStore::load(path)?.strip_prefix("gen.")?)
}

/// The variants compared in the transfer study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    SourceOnly,
    Full,
    NoAugm,
    NoFlow,
    NoSplit,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::SourceOnly => "source-only",
            Self::Full => "full",
            Self::NoAugm => "w/o-augm",
            Self::NoFlow => "w/o-flow",
            Self::NoSplit => "w/o-split",
        }
    }

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Self::SourceOnly => c.source_only = true,
            Self::Full => {}
            Self::NoAugm => c.augm_enabled = false,
            Self::NoFlow => c.flow_module_enabled = false,
            Self::NoSplit => c.split_enabled = false,
        }
        c
    }
}

pub fn default_dir_for(variant: Variant, root: &Path) -> PathBuf {
    root.join(variant.name().replace('/', ""))
}
