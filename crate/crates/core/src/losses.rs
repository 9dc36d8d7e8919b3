//! Distillation objectives: Gaussian-kernel feature loss, contrastive image loss,
//! L1 reconstruction and their weighted total.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CrossAttention;
use crate::error::{config_err, dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GkMode {
    /// Squared L2 norm as is.
    Raw,
    /// Squared L2 norm divided by the element count.
    #[default]
    PerElementMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Gaussian kernel width.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    #[serde(default)]
    pub gk_mode: GkMode,
    #[serde(default)]
    pub attention: CrossAttention,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.2,
            alpha3: 0.2,
            sigma: 1.0,
            tau: 1e-6,
            gk_mode: GkMode::PerElementMean,
            attention: CrossAttention::default(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return config_err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return config_err(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return config_err(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }
}

/// `1 - exp(-||x - y||^2 / (2 sigma^2))`, with the squared norm optionally averaged.
pub fn gaussian_kernel_distance<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    y: Var,
    sigma: f64,
    mode: GkMode,
) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return dim_err(format!(
            "gaussian kernel distance: shapes {:?} and {:?} differ",
            g.shape(x),
            g.shape(y)
        ));
    }
    let n = g.value(x).numel() as f64;
    let d = g.sub(x, y)?;
    let sq = g.square(d)?;
    let dist = g.sum(sq)?;
    let norm = match mode {
        GkMode::Raw => 1.0,
        GkMode::PerElementMean => n,
    };
    let arg = g.scale(dist, S::lit(-1.0 / (2.0 * sigma * sigma * norm)))?;
    let k = g.exp(arg)?;
    let neg = g.neg(k)?;
    g.offset(neg, S::one())
}

pub fn gaussian_kernel_distance_value<S: Scalar>(
    x: &Tensor<S>,
    y: &Tensor<S>,
    sigma: f64,
    mode: GkMode,
) -> Result<S> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = gaussian_kernel_distance(&mut g, xv, yv, sigma, mode)?;
    Ok(g.value(out).item())
}

/// One block's kernel loss: `GK(S_f, T_f) + alpha1 * (GK(S_fc, T_f) + GK(S_ft, T_f))`.
pub fn gk_block_loss<S: Scalar>(
    g: &mut Graph<S>,
    s_f: Var,
    s_fc: Var,
    s_ft: Var,
    t_f: Var,
    w: &LossWeights,
) -> Result<Var> {
    for v in [s_fc, s_ft, t_f] {
        if g.shape(v) != g.shape(s_f) {
            return dim_err(format!(
                "kernel loss maps disagree: {:?} vs {:?}",
                g.shape(v),
                g.shape(s_f)
            ));
        }
    }
    let base = gaussian_kernel_distance(g, s_f, t_f, w.sigma, w.gk_mode)?;
    let ch = gaussian_kernel_distance(g, s_fc, t_f, w.sigma, w.gk_mode)?;
    let sp = gaussian_kernel_distance(g, s_ft, t_f, w.sigma, w.gk_mode)?;
    let inter = g.add(ch, sp)?;
    let inter = g.scale(inter, S::lit(w.alpha1))?;
    g.add(base, inter)
}

/// Cross-attends every projected student block with its teacher block and sums the
/// per-block kernel losses. Inputs are `[C, N]` matrices already in the shared width.
pub fn gk_feature_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: &[Var],
    teacher: &[Var],
    w: &LossWeights,
) -> Result<Var> {
    if student.len() != teacher.len() {
        return config_err(format!(
            "student taps {} blocks but teacher taps {}",
            student.len(),
            teacher.len()
        ));
    }
    if student.is_empty() {
        return config_err("no distillation blocks selected");
    }
    let mut total: Option<Var> = None;
    for (&s_f, &t_f) in student.iter().zip(teacher) {
        let s_fc = w.attention.channel(g, t_f, s_f)?;
        let s_ft = w.attention.spatial(g, t_f, s_f)?;
        let block = gk_block_loss(g, s_f, s_fc, s_ft, t_f, w)?;
        total = Some(match total {
            None => block,
            Some(acc) => g.add(acc, block)?,
        });
    }
    Ok(total.expect("at least one block"))
}

/// InfoNCE over feature vectors with the positive at index 0.
///
/// Evaluated as `logsumexp(l - l_0)` with `l_i = cos_i / tau`, the log-domain form of
/// `-log(sim_pos / (sim_pos + sum sim_neg))`, so it stays finite for tiny `tau`.
pub fn contrastive_loss<S: Scalar>(
    g: &mut Graph<S>,
    anchor: Var,
    positive: Var,
    negatives: &[Var],
    tau: f64,
) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Argument(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    let inv_tau = S::lit(1.0 / tau);
    let pos = g.cosine(anchor, positive)?;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    let zero = g.sub(pos, pos)?;
    logits.push(zero);
    for &n in negatives {
        let c = g.cosine(anchor, n)?;
        let d = g.sub(c, pos)?;
        logits.push(g.scale(d, inv_tau)?);
    }
    let stacked = g.stack(&logits)?;
    g.log_sum_exp(stacked)
}

/// Mean absolute error.
pub fn reconstruction_loss<S: Scalar>(g: &mut Graph<S>, s_r: Var, target: Var) -> Result<Var> {
    if g.shape(s_r) != g.shape(target) {
        return dim_err(format!(
            "reconstruction: shapes {:?} and {:?} differ",
            g.shape(s_r),
            g.shape(target)
        ));
    }
    let d = g.sub(target, s_r)?;
    let a = g.abs(d)?;
    g.mean(a)
}

/// `rec + alpha2 * gk + alpha3 * cl`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    rec: Var,
    gk: Var,
    cl: Var,
    w: &LossWeights,
) -> Result<Var> {
    let gk = g.scale(gk, S::lit(w.alpha2))?;
    let cl = g.scale(cl, S::lit(w.alpha3))?;
    let partial = g.add(rec, gk)?;
    g.add(partial, cl)
}

pub fn total_loss_value(rec: f64, gk: f64, cl: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("reconstruction", rec), ("kernel", gk), ("contrastive", cl)] {
        if !v.is_finite() {
            return Err(Error::Evaluation(format!(
                "{name} loss is non-finite ({v})"
            )));
        }
    }
    Ok(rec + w.alpha2 * gk + w.alpha3 * cl)
}

/// Frozen random convolutional feature extractor used by the contrastive loss.
///
/// Three stride-2 3x3 stages of widths 8, 16, 32, each followed by GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiExtractor<S: Scalar = f64> {
    stages: Vec<(Tensor<S>, Tensor<S>)>,
}

pub const PHI_WIDTHS: [usize; 3] = [8, 16, 32];

impl<S: Scalar> PhiExtractor<S> {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(PHI_WIDTHS.len());
        let mut c_in = in_channels;
        for &c_out in &PHI_WIDTHS {
            let std = (2.0 / (9 * c_in) as f64).sqrt();
            let w = Tensor::randn(&[c_out, c_in, 3, 3], std, &mut rng);
            let b = Tensor::randn(&[c_out], 0.1, &mut rng);
            stages.push((w, b));
            c_in = c_out;
        }
        Self { stages }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].0.shape()[1]
    }

    /// Records the extractor on `g` with its weights as constants.
    pub fn forward(&self, g: &mut Graph<S>, image: Var) -> Result<Var> {
        let mut x = image;
        for (w, b) in &self.stages {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.conv2d(x, wv, bv, 2)?;
            x = g.gelu(y)?;
        }
        Ok(x)
    }

    pub fn features(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// Contrastive loss on images: the student output is the anchor, the teacher output the
/// positive and every degraded input of the batch a negative. Gradient reaches `s_r` only.
pub fn contrastive_image_loss<S: Scalar>(
    g: &mut Graph<S>,
    phi: &PhiExtractor<S>,
    s_r: Var,
    positive_features: &Tensor<S>,
    negative_features: &[Tensor<S>],
    tau: f64,
) -> Result<Var> {
    let anchor = phi.forward(g, s_r)?;
    let pos = g.constant(positive_features.clone());
    let negs: Vec<Var> = negative_features
        .iter()
        .map(|f| g.constant(f.clone()))
        .collect();
    contrastive_loss(g, anchor, pos, &negs, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(data: &[f64]) -> Tensor {
        Tensor::from_f64(&[data.len()], data).unwrap()
    }

    fn cl_value(anchor: &[f64], pos: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(vec_t(anchor));
        let p = g.constant(vec_t(pos));
        let n: Vec<Var> = negs.iter().map(|d| g.constant(vec_t(d))).collect();
        let l = contrastive_loss(&mut g, a, p, &n, tau).unwrap();
        g.value(l).item()
    }

    #[test]
    fn gk_zero_distance() {
        let x = vec_t(&[0.3, -2.0, 7.5]);
        for mode in [GkMode::Raw, GkMode::PerElementMean] {
            assert_eq!(
                gaussian_kernel_distance_value(&x, &x, 0.7, mode).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn gk_closed_form_at_two_sigma_squared() {
        let sigma: f64 = 0.8;
        // raw: ||x - y||^2 = 2 sigma^2
        let x = vec_t(&[0.0, 0.0]);
        let y = vec_t(&[sigma, sigma]);
        let v = gaussian_kernel_distance_value(&x, &y, sigma, GkMode::Raw).unwrap();
        assert!((v - (1.0 - (-1f64).exp())).abs() < 1e-12);
        // mean: every element differs by sqrt(2) sigma
        let d = 2f64.sqrt() * sigma;
        let y = vec_t(&[d, d]);
        let v = gaussian_kernel_distance_value(&x, &y, sigma, GkMode::PerElementMean).unwrap();
        assert!((v - 0.632_120_558_828_557_7).abs() < 1e-12);
    }

    #[test]
    fn gk_saturates_monotonically() {
        let x = vec_t(&[0.0]);
        let mut prev = 0.0;
        for k in 1..60 {
            let v =
                gaussian_kernel_distance_value(&x, &vec_t(&[k as f64 * 0.25]), 1.0, GkMode::Raw)
                    .unwrap();
            assert!(v > prev || v == 1.0);
            assert!(v <= 1.0);
            prev = v;
        }
        assert!(prev > 1.0 - 1e-12);
    }

    #[test]
    fn gk_shape_mismatch() {
        assert!(gaussian_kernel_distance_value(
            &vec_t(&[1.0]),
            &vec_t(&[1.0, 2.0]),
            1.0,
            GkMode::Raw
        )
        .is_err());
    }

    #[test]
    fn block_loss_with_equal_distances() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let t = g.constant(vec_t(&[0.0, 0.0]));
        let s = g.constant(vec_t(&[0.5, -0.5]));
        let l = gk_block_loss(&mut g, s, s, s, t, &w).unwrap();
        let d = gaussian_kernel_distance_value(
            &vec_t(&[0.5, -0.5]),
            &vec_t(&[0.0, 0.0]),
            w.sigma,
            w.gk_mode,
        )
        .unwrap();
        assert!((g.value(l).item() - 2.0 * d).abs() < 1e-15);
    }

    #[test]
    fn feature_loss_block_count_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 1]));
        let r = gk_feature_loss(&mut g, &[a, a], &[a], &LossWeights::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn contrastive_uniform_logits() {
        let a = [1.0, 2.0, -0.5];
        let negs: Vec<&[f64]> = vec![&a; 8];
        for tau in [1.0, 0.5, 1e-6] {
            let v = cl_value(&a, &a, &negs, tau);
            assert!((v - 9f64.ln()).abs() < 1e-12, "tau {tau}: {v}");
        }
    }

    #[test]
    fn contrastive_opposed_negative() {
        let v = cl_value(&[1.0, 0.0], &[2.0, 0.0], &[&[-3.0, 0.0]], 0.5);
        let oracle = -((2f64).exp() / ((2f64).exp() + (-2f64).exp())).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.018_149_927_917_809_6).abs() < 1e-9);
    }

    #[test]
    fn contrastive_hard_limit() {
        let anchor = [1.0, 0.2];
        let pos = [1.0, 0.25];
        let neg = [0.3, 1.0];
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01, 1e-3, 1e-6] {
            let v = cl_value(&anchor, &pos, &[&neg, &neg], tau);
            assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn contrastive_needs_negatives_and_nonzero_features() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[1.0]));
        assert!(contrastive_loss(&mut g, a, a, &[], 1.0).is_err());
        let z = g.constant(vec_t(&[0.0]));
        assert!(matches!(
            contrastive_loss(&mut g, z, a, &[a], 1.0),
            Err(Error::DegenerateFeature(_))
        ));
    }

    #[test]
    fn reconstruction_cases() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[0.1, 0.2, 0.3, 0.4]));
        let same = reconstruction_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let b = g.constant(vec_t(&[0.6, 0.7, 0.8, 0.9]));
        let off = reconstruction_loss(&mut g, a, b).unwrap();
        assert!((g.value(off).item() - 0.5).abs() < 1e-15);
        let c = g.constant(vec_t(&[0.3, 0.4, 0.3, 0.4]));
        let half = reconstruction_loss(&mut g, a, c).unwrap();
        assert!((g.value(half).item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert!((total_loss_value(1.0, 0.5, 2.0, &w).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(total_loss_value(0.7, 0.0, 0.0, &w).unwrap(), 0.7);
        let zero = LossWeights {
            alpha2: 0.0,
            alpha3: 0.0,
            ..w
        };
        assert_eq!(total_loss_value(0.7, 123.0, 9.0, &zero).unwrap(), 0.7);
        assert!(matches!(
            total_loss_value(f64::NAN, 0.0, 0.0, &w),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn graph_total_matches_value_form() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let (r, k, c) = (0.31, 0.77, 4.2);
        let rv = g.constant(Tensor::scalar(r));
        let kv = g.constant(Tensor::scalar(k));
        let cv = g.constant(Tensor::scalar(c));
        let t = total_loss(&mut g, rv, kv, cv, &w).unwrap();
        assert_eq!(g.value(t).item(), total_loss_value(r, k, c, &w).unwrap());
    }

    #[test]
    fn phi_is_deterministic_and_downsamples() {
        let a = PhiExtractor::<f64>::new(1, 7);
        assert_eq!(a, PhiExtractor::new(1, 7));
        let img = Tensor::full(&[1, 32, 32], 0.25);
        let f = a.features(&img).unwrap();
        assert_eq!(f.shape(), &[32, 4, 4]);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            sigma: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            tau: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            alpha1: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
