//! Optimization, teacher pretraining, distillation, evaluation and checkpointing.

pub mod checkpoint;
mod eval;
mod optim;
mod run;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_samples, CorpusSpec, Sample, Task};
use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::metrics::SSIM_WINDOW;
use crate::models::ModelConfig;
use checkpoint::{Checkpoint, RngState};

pub use eval::{config_hash, degraded_quality, evaluate, evaluate_net, EvalReport, Quality};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use run::{
    distill, load_net, train_supervised, train_teacher, CheckpointMeta, EvalPoint, ModelKind,
    StepLog, TrainLog, TrainOptions, TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Steps between held-out evaluations; 0 means once per epoch.
    pub eval_interval: usize,
    /// Feature taps used for distillation; all when unset.
    pub distill_taps: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            max_steps: None,
            batch_size: 8,
            lr_max: 2e-4,
            lr_min: 1e-6,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            seed: 0,
            eval_interval: 0,
            distill_taps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return config_err(format!(
                "need lr_max >= lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            ));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return config_err("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return config_err("epochs must be at least 1 when max_steps is unset");
        }
        self.loss_weights.validate()
    }

    pub fn total_steps(&self, batches_per_epoch: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * batches_per_epoch)
    }
}

fn default_eval_corpus() -> CorpusSpec {
    CorpusSpec {
        count: 16,
        base_seed: 0x00ff_1ce5,
        ..CorpusSpec::default()
    }
}

/// Everything that determines a run, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub teacher: ModelConfig,
    #[serde(default)]
    pub student: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub corpus: CorpusSpec,
    #[serde(default = "default_eval_corpus")]
    pub eval_corpus: CorpusSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if let Some(s) = &self.student {
            s.validate()?;
        }
        self.train.validate()?;
        for (what, c) in [("corpus", &self.corpus), ("eval_corpus", &self.eval_corpus)] {
            c.validate()?;
            c.check_divisor(self.teacher.spatial_divisor())?;
            if c.channels != self.teacher.input_channels {
                return config_err(format!(
                    "{what} has {} channels but the teacher expects {}",
                    c.channels, self.teacher.input_channels
                ));
            }
        }
        if self.eval_corpus.patch_size < SSIM_WINDOW {
            return config_err(format!(
                "eval_corpus patch_size {} is below the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
                self.eval_corpus.patch_size
            ));
        }
        Ok(())
    }
}

/// Training and held-out samples for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub train: Vec<Sample>,
    pub held_out: Vec<Sample>,
}

impl Dataset {
    pub fn generate(run: &RunConfig, threads: usize) -> Result<Self> {
        Ok(Self {
            task: run.task,
            train: make_samples(&run.corpus, run.task, threads)?,
            held_out: make_samples(&run.eval_corpus, run.task, threads)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    kind: String,
    task: Task,
    seeds: Vec<u64>,
}

/// Writes normalized samples into the checkpoint container as `clean.{i}` / `degraded.{i}`.
pub fn save_samples(path: &Path, task: Task, samples: &[Sample]) -> Result<()> {
    let meta = SampleMeta {
        kind: "samples".into(),
        task,
        seeds: samples.iter().map(|s| s.seed).collect(),
    };
    let rng = RngState {
        seed: [0; 32],
        stream: 0,
        word_pos: 0,
    };
    let mut c = Checkpoint::new(0, rng, serde_json::to_string(&meta)?);
    for (i, s) in samples.iter().enumerate() {
        c.push_tensor(format!("clean.{i}"), &s.clean);
        c.push_tensor(format!("degraded.{i}"), &s.degraded);
    }
    c.save(path)
}

pub fn load_samples(path: &Path) -> Result<(Task, Vec<Sample>)> {
    let c = Checkpoint::load(path)?;
    let meta: SampleMeta = serde_json::from_str(&c.meta)?;
    if meta.kind != "samples" {
        return Err(Error::Format(format!(
            "{} holds `{}`, not samples",
            path.display(),
            meta.kind
        )));
    }
    let samples = meta
        .seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            Ok(Sample {
                clean: c.tensor(&format!("clean.{i}"))?,
                degraded: c.tensor(&format!("degraded.{i}"))?,
                task: meta.task,
                seed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return config_err(format!("{} holds no samples", path.display()));
    }
    Ok((meta.task, samples))
}
