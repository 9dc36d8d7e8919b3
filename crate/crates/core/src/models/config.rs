use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Level/width knobs of an encoder-decoder restoration net.
///
/// Level `l` runs at `base_channels * 2^l` channels and `1 / 2^l` of the input
/// resolution. `level_layers[l]` blocks run on both the encoder and the decoder
/// side of level `l`; the last level is the bottleneck and has no decoder half.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub level_layers: Vec<usize>,
    pub base_channels: usize,
    pub unified_dim: usize,
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn new(
        level_layers: &[usize],
        base_channels: usize,
        unified_dim: usize,
        input_channels: usize,
    ) -> Self {
        Self {
            level_layers: level_layers.to_vec(),
            base_channels,
            unified_dim,
            input_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_layers.is_empty() {
            return config_err("level_layers must not be empty");
        }
        if let Some(l) = self.level_layers.iter().position(|&n| n == 0) {
            return config_err(format!("level {l} has zero layers"));
        }
        if self.base_channels == 0 {
            return config_err("base_channels must be positive");
        }
        if self.unified_dim == 0 {
            return config_err("unified_dim must be positive");
        }
        if !matches!(self.input_channels, 1 | 3) {
            return config_err(format!(
                "input_channels must be 1 or 3, got {}",
                self.input_channels
            ));
        }
        if self.levels() > 16 {
            return config_err("more than 16 levels");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.level_layers.len()
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the input height and width.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Number of feature taps: every encoder level plus every decoder level.
    pub fn tap_count(&self) -> usize {
        2 * self.levels() - 1
    }

    /// `(level, is_decoder)` for each tap, in forward order.
    pub fn taps(&self) -> Vec<(usize, bool)> {
        let l = self.levels();
        (0..l)
            .map(|i| (i, false))
            .chain((0..l - 1).rev().map(|i| (i, true)))
            .collect()
    }

    /// Channel count of every tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps()
            .into_iter()
            .map(|(lvl, _)| self.channels_at(lvl))
            .collect()
    }
}

/// Derives a student configuration from a teacher by replacing per-level layer
/// counts and the base width. The student may not exceed the teacher anywhere.
pub fn compress_config(
    teacher: &ModelConfig,
    layer_scale: &[usize],
    channels: usize,
) -> Result<ModelConfig> {
    teacher.validate()?;
    if layer_scale.len() != teacher.levels() {
        return config_err(format!(
            "student has {} levels but teacher has {}",
            layer_scale.len(),
            teacher.levels()
        ));
    }
    for (l, (&s, &t)) in layer_scale.iter().zip(&teacher.level_layers).enumerate() {
        if s > t {
            return config_err(format!(
                "student level {l} has {s} layers, teacher only {t}"
            ));
        }
    }
    if channels > teacher.base_channels {
        return config_err(format!(
            "student width {channels} exceeds teacher width {}",
            teacher.base_channels
        ));
    }
    let student = ModelConfig {
        level_layers: layer_scale.to_vec(),
        base_channels: channels,
        unified_dim: teacher.unified_dim,
        input_channels: teacher.input_channels,
    };
    student.validate()?;
    Ok(student)
}
