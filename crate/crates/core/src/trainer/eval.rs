use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::run::{load_net, CheckpointMeta, ModelKind};
use super::RunConfig;
use crate::data::{denormalize, Sample, Task};
use crate::error::{config_err, Result};
use crate::metrics::{psnr, ssim};
use crate::models::{count_params_flops, ModelConfig, RestorationNet};
use crate::tensor::Tensor;

/// Mean PSNR (dB) and SSIM over a sample set, measured on `[0, 1]` images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub psnr: f64,
    pub ssim: f64,
    pub params: u64,
    pub flops: u64,
    pub steps: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn to_unit(img: &Tensor) -> Result<Tensor> {
    denormalize(&img.map(|v| v.clamp(-1.0, 1.0)))
}

fn pair_quality(restored: &Tensor, clean: &Tensor) -> Result<(f64, f64)> {
    let (r, c) = (to_unit(restored)?, to_unit(clean)?);
    Ok((psnr(&r, &c, 1.0)?, ssim(&r, &c, 1.0)?))
}

/// Averages per-image scores in sample order, so the result does not depend on threading.
fn mean_quality(scores: Vec<(f64, f64)>) -> Quality {
    let n = scores.len() as f64;
    let (p, s) = scores
        .iter()
        .fold((0.0, 0.0), |(p, s), &(a, b)| (p + a, s + b));
    Quality {
        psnr: p / n,
        ssim: s / n,
    }
}

pub fn evaluate_net(net: &RestorationNet, data: &[Sample]) -> Result<Quality> {
    if data.is_empty() {
        return config_err("evaluation set is empty");
    }
    let scores = data
        .par_iter()
        .map(|s| pair_quality(&net.forward(&s.degraded)?, &s.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_quality(scores))
}

/// Quality of the degraded inputs themselves.
pub fn degraded_quality(data: &[Sample]) -> Result<Quality> {
    if data.is_empty() {
        return config_err("evaluation set is empty");
    }
    let scores = data
        .iter()
        .map(|s| pair_quality(&s.degraded, &s.clean))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_quality(scores))
}

/// SHA-256 over the canonical JSON of what was trained.
pub fn config_hash(kind: ModelKind, model: &ModelConfig, run: &RunConfig) -> Result<String> {
    let bytes = serde_json::to_vec(&(kind, model, run))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Scores the net stored in `ckpt` on `data`.
pub fn evaluate(ckpt: &Checkpoint, data: &[Sample]) -> Result<EvalReport> {
    let meta = CheckpointMeta::parse(ckpt)?;
    let net = load_net(ckpt)?;
    let first = data
        .first()
        .map(|s| s.clean.shape().to_vec())
        .unwrap_or_default();
    if let Some(s) = data.iter().find(|s| s.task != meta.task) {
        return config_err(format!(
            "checkpoint was trained for {} but data is {}",
            meta.task, s.task
        ));
    }
    let quality = evaluate_net(&net, data)?;
    let cost = count_params_flops(&meta.model, first[1], first[2])?;
    Ok(EvalReport {
        task: meta.task,
        psnr: quality.psnr,
        ssim: quality.ssim,
        params: cost.params,
        flops: cost.flops,
        steps: ckpt.step,
        config_hash: config_hash(meta.kind, &meta.model, &meta.run)?,
    })
}
