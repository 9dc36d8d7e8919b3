//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{project, CrossAttention, SpatialAxis};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    contrastive_image_loss, contrastive_loss, gaussian_kernel_distance, gk_block_loss,
    gk_feature_loss, reconstruction_loss, total_loss, GkMode, LossWeights, PhiExtractor,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the graph gradient of a scalar function at `x0` against central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`; any other inputs it needs
/// should be recorded inside the closure as constants.
pub fn gradcheck<S, F>(f: F, x0: &Tensor<S>, eps: f64) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!(
            "gradcheck eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let out = f(&mut g, x)?;
    let y0 = g.value(out);
    if y0.numel() != 1 || !y0.all_finite() {
        return Err(Error::Evaluation(format!(
            "gradcheck needs a finite scalar at x0, got {:?}",
            y0.data()
        )));
    }
    g.backward(out)?;
    let analytic: Vec<f64> = g
        .grad(x)
        .expect("leaf requires grad")
        .iter()
        .map(|v| v.as_f64())
        .collect();

    let eval = |t: Tensor<S>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(t);
        let out = f(&mut g, x)?;
        Ok(g.value(out).item().as_f64())
    };
    let mut numeric = Vec::with_capacity(x0.numel());
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += S::lit(eps);
        let mut minus = x0.clone();
        minus.data_mut()[i] -= S::lit(eps);
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold(
            (0, 0.0),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// Max-norm relative error: `max|a - n| / max(max|a|, max|n|, REL_FLOOR)`.
pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(REL_FLOOR, f64::max);
    diff / scale
}

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub trials: usize,
    /// Worst max-norm relative error over all trials.
    pub max_rel_error: f64,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.failures == 0)
    }

    pub fn total_trials(&self) -> usize {
        self.cases.iter().map(|c| c.trials).sum()
    }

    pub fn worst(&self) -> Option<&CaseReport> {
        self.cases
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

type Objective = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;
type Builder = fn(&mut ChaCha8Rng) -> (Tensor, Objective);

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Entries in `[-1, -0.2] U [0.2, 1]`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t: Tensor = Tensor::uniform(shape, 0.2, 1.0, rng);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar with fixed random weights so every output entry matters.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let wv = g.constant(w.reshape(g.shape(out))?);
    let m = g.mul(out, wv)?;
    g.sum(m)
}

fn unary(
    rng: &mut ChaCha8Rng,
    x0: Tensor,
    out_len: usize,
    op: fn(&mut Graph, Var) -> Result<Var>,
) -> (Tensor, Objective) {
    let w = uniform(rng, &[out_len]);
    (
        x0,
        Box::new(move |g, x| {
            let y = op(g, x)?;
            weighted(g, y, &w)
        }),
    )
}

/// Checks `op(x, other)` or `op(other, x)` with respect to `x`.
fn binary(
    rng: &mut ChaCha8Rng,
    x0: Tensor,
    other: Tensor,
    x_first: bool,
    out_len: usize,
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> (Tensor, Objective) {
    let w = uniform(rng, &[out_len]);
    (
        x0,
        Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let y = if x_first { op(g, x, o)? } else { op(g, o, x)? };
            weighted(g, y, &w)
        }),
    )
}

fn attention_case(
    rng: &mut ChaCha8Rng,
    axis: SpatialAxis,
    spatial: bool,
    wrt_teacher: bool,
) -> (Tensor, Objective) {
    let (c, n) = (3, 5);
    let other = uniform(rng, &[c, n]);
    let x0 = uniform(rng, &[c, n]);
    let w = uniform(rng, &[c * n]);
    let ca = CrossAttention {
        spatial_axis: axis,
        ..CrossAttention::default()
    };
    (
        x0,
        Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let (t, s) = if wrt_teacher { (x, o) } else { (o, x) };
            let y = if spatial {
                ca.spatial(g, t, s)?
            } else {
                ca.channel(g, t, s)?
            };
            weighted(g, y, &w)
        }),
    )
}

fn gk_case(rng: &mut ChaCha8Rng, mode: GkMode) -> (Tensor, Objective) {
    let y0 = uniform(rng, &[2, 3]);
    let x0 = uniform(rng, &[2, 3]);
    (
        x0,
        Box::new(move |g, x| {
            let y = g.constant(y0.clone());
            gaussian_kernel_distance(g, x, y, 1.0, mode)
        }),
    )
}

fn contrastive_case(rng: &mut ChaCha8Rng, wrt_anchor: bool) -> (Tensor, Objective) {
    let other = uniform(rng, &[6]);
    let negs: Vec<Tensor> = (0..3).map(|_| uniform(rng, &[6])).collect();
    let x0 = uniform(rng, &[6]);
    (
        x0,
        Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let n: Vec<Var> = negs.iter().map(|t| g.constant(t.clone())).collect();
            let (a, p) = if wrt_anchor { (x, o) } else { (o, x) };
            contrastive_loss(g, a, p, &n, 0.5)
        }),
    )
}

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[3, 4]));
            binary(r, a, b, true, 12, |g, a, b| g.add(a, b))
        }),
        ("sub", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[3, 4]));
            binary(r, a, b, false, 12, |g, a, b| g.sub(a, b))
        }),
        ("mul", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[3, 4]));
            binary(r, a, b, true, 12, |g, a, b| g.mul(a, b))
        }),
        ("square", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.square(x))
        }),
        ("scale", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.scale(x, 1.7))
        }),
        ("neg", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.neg(x))
        }),
        ("offset", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.offset(x, 0.3))
        }),
        ("abs", |r| {
            let a = away_from_zero(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.abs(x))
        }),
        ("exp", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.exp(x))
        }),
        ("gelu", |r| {
            let a = Tensor::uniform(&[3, 4], -3.0, 3.0, r);
            unary(r, a, 12, |g, x| g.gelu(x))
        }),
        ("tanh", |r| {
            let a = Tensor::uniform(&[3, 4], -2.0, 2.0, r);
            unary(r, a, 12, |g, x| g.tanh(x))
        }),
        ("sum", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 1, |g, x| g.sum(x))
        }),
        ("mean", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 1, |g, x| g.mean(x))
        }),
        ("matmul.lhs", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[4, 5]));
            binary(r, a, b, true, 15, |g, a, b| g.matmul(a, b))
        }),
        ("matmul.rhs", |r| {
            let (a, b) = (uniform(r, &[4, 5]), uniform(r, &[3, 4]));
            binary(r, a, b, false, 15, |g, a, b| g.matmul(a, b))
        }),
        ("matmul_nt.lhs", |r| {
            let (a, b) = (uniform(r, &[3, 4]), uniform(r, &[5, 4]));
            binary(r, a, b, true, 15, |g, a, b| g.matmul_nt(a, b))
        }),
        ("matmul_nt.rhs", |r| {
            let (a, b) = (uniform(r, &[5, 4]), uniform(r, &[3, 4]));
            binary(r, a, b, false, 15, |g, a, b| g.matmul_nt(a, b))
        }),
        ("transpose", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.transpose(x))
        }),
        ("reshape", |r| {
            let a = uniform(r, &[3, 4]);
            unary(r, a, 12, |g, x| g.reshape(x, &[2, 6]))
        }),
        ("softmax_rows", |r| {
            let a = Tensor::uniform(&[3, 4], -3.0, 3.0, r);
            unary(r, a, 12, |g, x| g.softmax_rows(x))
        }),
        ("conv2d.x", |r| {
            let (w, b) = (uniform(r, &[3, 2, 3, 3]), uniform(r, &[3]));
            let x = uniform(r, &[2, 5, 5]);
            let out_w = uniform(r, &[27]);
            (
                x,
                Box::new(move |g, x| {
                    let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                    let y = g.conv2d(x, wv, bv, 2)?;
                    weighted(g, y, &out_w)
                }),
            )
        }),
        ("conv2d.weight", |r| {
            let (x, b) = (uniform(r, &[2, 5, 5]), uniform(r, &[3]));
            let w = uniform(r, &[3, 2, 3, 3]);
            let out_w = uniform(r, &[75]);
            (
                w,
                Box::new(move |g, w| {
                    let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                    let y = g.conv2d(xv, w, bv, 1)?;
                    weighted(g, y, &out_w)
                }),
            )
        }),
        ("conv2d.bias", |r| {
            let (x, w) = (uniform(r, &[2, 4, 4]), uniform(r, &[3, 2, 3, 3]));
            let b = uniform(r, &[3]);
            let out_w = uniform(r, &[48]);
            (
                b,
                Box::new(move |g, b| {
                    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                    let y = g.conv2d(xv, wv, b, 1)?;
                    weighted(g, y, &out_w)
                }),
            )
        }),
        ("add_channel_bias.x", |r| {
            let (a, b) = (uniform(r, &[3, 2, 2]), uniform(r, &[3]));
            binary(r, a, b, true, 12, |g, a, b| g.add_channel_bias(a, b))
        }),
        ("add_channel_bias.bias", |r| {
            let (a, b) = (uniform(r, &[3]), uniform(r, &[3, 2, 2]));
            binary(r, a, b, false, 12, |g, a, b| g.add_channel_bias(a, b))
        }),
        ("upsample_nearest2x", |r| {
            let a = uniform(r, &[2, 2, 3]);
            unary(r, a, 48, |g, x| g.upsample_nearest2x(x))
        }),
        ("concat_channels", |r| {
            let (a, b) = (uniform(r, &[1, 2, 2]), uniform(r, &[2, 2, 2]));
            binary(r, a, b, false, 12, |g, a, b| g.concat_channels(a, b))
        }),
        ("layer_norm_channels", |r| {
            let a = uniform(r, &[4, 3]);
            unary(r, a, 12, |g, x| g.layer_norm_channels(x))
        }),
        ("cosine", |r| {
            let (a, b) = (uniform(r, &[6]), uniform(r, &[6]));
            binary(r, a, b, true, 1, |g, a, b| g.cosine(a, b))
        }),
        ("stack", |r| {
            let a = uniform(r, &[4]);
            unary(r, a, 3, |g, x| {
                let (i0, i2) = (g.index(x, 0)?, g.index(x, 2)?);
                let s = g.sum(x)?;
                g.stack(&[i0, s, i2])
            })
        }),
        ("log_sum_exp", |r| {
            let a = Tensor::uniform(&[5], -3.0, 3.0, r);
            unary(r, a, 1, |g, x| g.log_sum_exp(x))
        }),
        ("index", |r| {
            let a = uniform(r, &[5]);
            unary(r, a, 1, |g, x| g.index(x, 3))
        }),
        ("attention.channel.teacher", |r| {
            attention_case(r, SpatialAxis::Columns, false, true)
        }),
        ("attention.channel.student", |r| {
            attention_case(r, SpatialAxis::Columns, false, false)
        }),
        ("attention.spatial_columns.teacher", |r| {
            attention_case(r, SpatialAxis::Columns, true, true)
        }),
        ("attention.spatial_columns.student", |r| {
            attention_case(r, SpatialAxis::Columns, true, false)
        }),
        ("attention.spatial_rows.student", |r| {
            attention_case(r, SpatialAxis::Rows, true, false)
        }),
        ("project", |r| {
            let (x, b) = (uniform(r, &[3, 4]), uniform(r, &[2]));
            let w = uniform(r, &[2, 3]);
            let out_w = uniform(r, &[8]);
            (
                w,
                Box::new(move |g, w| {
                    let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                    let y = project(g, w, bv, xv)?;
                    weighted(g, y, &out_w)
                }),
            )
        }),
        ("loss.gk_distance.raw", |r| gk_case(r, GkMode::Raw)),
        ("loss.gk_distance.mean", |r| {
            gk_case(r, GkMode::PerElementMean)
        }),
        ("loss.gk_block", |r| {
            let t = uniform(r, &[3, 4]);
            let s = uniform(r, &[3, 4]);
            (
                s,
                Box::new(move |g, s| {
                    let tv = g.constant(t.clone());
                    let w = LossWeights::default();
                    let fc = w.attention.channel(g, tv, s)?;
                    let ft = w.attention.spatial(g, tv, s)?;
                    gk_block_loss(g, s, fc, ft, tv, &w)
                }),
            )
        }),
        ("loss.gk_feature", |r| {
            let (t0, t1, s1) = (
                uniform(r, &[2, 4]),
                uniform(r, &[2, 2]),
                uniform(r, &[2, 2]),
            );
            let s0 = uniform(r, &[2, 4]);
            (
                s0,
                Box::new(move |g, s0| {
                    let (t0v, t1v, s1v) = (
                        g.constant(t0.clone()),
                        g.constant(t1.clone()),
                        g.constant(s1.clone()),
                    );
                    gk_feature_loss(g, &[s0, s1v], &[t0v, t1v], &LossWeights::default())
                }),
            )
        }),
        ("loss.contrastive.anchor", |r| contrastive_case(r, true)),
        ("loss.contrastive.positive", |r| contrastive_case(r, false)),
        ("loss.contrastive_image", |r| {
            let phi = PhiExtractor::new(1, r.random());
            let pos = phi.features(&uniform(r, &[1, 8, 8])).expect("valid image");
            let negs: Vec<Tensor> = (0..2)
                .map(|_| phi.features(&uniform(r, &[1, 8, 8])).expect("valid image"))
                .collect();
            let x = uniform(r, &[1, 8, 8]);
            (
                x,
                Box::new(move |g, x| contrastive_image_loss(g, &phi, x, &pos, &negs, 0.5)),
            )
        }),
        ("loss.reconstruction", |r| {
            let target = uniform(r, &[1, 3, 3]);
            let mut x = away_from_zero(r, &[1, 3, 3]);
            x.data_mut()
                .iter_mut()
                .zip(target.data())
                .for_each(|(v, t)| *v += t);
            (
                x,
                Box::new(move |g, x| {
                    let t = g.constant(target.clone());
                    reconstruction_loss(g, x, t)
                }),
            )
        }),
        ("loss.total", |r| {
            let x = Tensor::uniform(&[3], 0.1, 2.0, r);
            let w = LossWeights {
                alpha2: r.random(),
                alpha3: r.random(),
                ..LossWeights::default()
            };
            (
                x,
                Box::new(move |g, x| {
                    let (a, b, c) = (g.index(x, 0)?, g.index(x, 1)?, g.index(x, 2)?);
                    total_loss(g, a, b, c, &w)
                }),
            )
        }),
    ]
}

/// Runs every op and loss through `trials` seeded central-difference checks.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut reports = Vec::new();
    for (k, (name, build)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut report = CaseReport {
            name,
            trials,
            max_rel_error: 0.0,
            failures: 0,
        };
        for _ in 0..trials {
            let (x0, f) = build(&mut rng);
            let r = gradcheck(|g: &mut Graph, x| f(g, x), &x0, SUITE_EPS)?;
            let err = norm_relative_error(&r.analytic, &r.numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            if !(err < SUITE_TOLERANCE) {
                report.failures += 1;
            }
        }
        reports.push(report);
    }
    Ok(SuiteReport {
        cases: reports,
        tolerance: SUITE_TOLERANCE,
    })
}
