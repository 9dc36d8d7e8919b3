//! Closed-form parameter and FLOP counts for [`RestorationNet`](super::RestorationNet).
//!
//! FLOPs count only matmul and convolution work, at 2 FLOPs per multiply-accumulate.
//! Normalization, softmax, activations and bias adds are not counted.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::FFN_EXPANSION;
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    pub fn macs(&self) -> u64 {
        self.flops / 2
    }

    /// `1 - self / baseline` for params and FLOPs.
    pub fn reduction_vs(&self, baseline: &Cost) -> (f64, f64) {
        (
            1.0 - self.params as f64 / baseline.params as f64,
            1.0 - self.flops as f64 / baseline.flops as f64,
        )
    }
}

#[derive(Default)]
struct Tally {
    params: u64,
    macs: u64,
}

impl Tally {
    fn conv3x3(&mut self, c_in: u64, c_out: u64, out_pixels: u64) {
        self.params += 9 * c_in * c_out + c_out;
        self.macs += 9 * c_in * c_out * out_pixels;
    }

    fn linear(&mut self, c_in: u64, c_out: u64, bias: bool, pixels: u64) {
        self.params += c_in * c_out + if bias { c_out } else { 0 };
        self.macs += c_in * c_out * pixels;
    }

    fn block(&mut self, c: u64, pixels: u64) {
        // q, k, v without bias
        self.linear(c, 3 * c, false, pixels);
        // C x C logits and attention-weighted values
        self.macs += 2 * c * c * pixels;
        self.linear(c, c, true, pixels);
        let hidden = FFN_EXPANSION as u64 * c;
        self.linear(c, hidden, true, pixels);
        self.linear(hidden, c, true, pixels);
    }
}

/// Parameters and forward FLOPs of a net built from `cfg` on an `h x w` input.
pub fn count_params_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<Cost> {
    cfg.validate()?;
    let d = cfg.spatial_divisor();
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return dim_err(format!(
            "extent {h}x{w} must be positive and divisible by {d}"
        ));
    }
    let levels = cfg.levels();
    let c_in = cfg.input_channels as u64;
    let pixels = |l: usize| ((h >> l) * (w >> l)) as u64;
    let ch = |l: usize| cfg.channels_at(l) as u64;

    let mut t = Tally::default();
    t.conv3x3(c_in, ch(0), pixels(0));
    for l in 0..levels {
        for _ in 0..cfg.level_layers[l] {
            t.block(ch(l), pixels(l));
        }
        if l + 1 < levels {
            t.conv3x3(ch(l), ch(l + 1), pixels(l + 1));
        }
    }
    for l in (0..levels - 1).rev() {
        t.conv3x3(ch(l + 1), ch(l), pixels(l + 1));
        t.linear(2 * ch(l), ch(l), true, pixels(l));
        for _ in 0..cfg.level_layers[l] {
            t.block(ch(l), pixels(l));
        }
    }
    t.conv3x3(ch(0), c_in, pixels(0));
    Ok(Cost {
        params: t.params,
        flops: 2 * t.macs,
    })
}
