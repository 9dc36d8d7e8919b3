//! Cross-network attention between teacher and student block features.
//!
//! Both features are first projected into a shared channel width. The student
//! is then re-mixed along the channel axis (`C x C` attention) and along the
//! spatial axis (`N x N` attention), with the teacher supplying the queries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-block activation in channel-first `(C, H, W)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<S: Scalar = f64> {
    values: Tensor<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        if values.rank() != 3 {
            return dim_err(format!(
                "feature map must be [C, H, W], got {:?}",
                values.shape()
            ));
        }
        Ok(Self { values })
    }

    /// Rebuilds a map from its `[C, N]` matrix view.
    pub fn from_matrix(matrix: Tensor<S>, height: usize, width: usize) -> Result<Self> {
        let c = matrix.shape()[0];
        Self::new(matrix.reshape(&[c, height, width])?)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<S> {
        self.values
    }

    /// `[C, N]` view with `N = H * W`, rows scanned before columns.
    pub fn matrix(&self) -> Tensor<S> {
        self.values
            .reshape(&[self.channels(), self.pixels()])
            .expect("same element count")
    }
}

/// How the attention temperature `lambda` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// `sqrt(d)` with `d` the length of the contracted axis: `N` for the channel
    /// variant, `C` for the spatial one.
    #[default]
    ContractionDim,
    Constant(f64),
}

impl LambdaPolicy {
    pub fn resolve(self, contraction_len: usize) -> f64 {
        match self {
            LambdaPolicy::ContractionDim => (contraction_len as f64).sqrt(),
            LambdaPolicy::Constant(v) => v,
        }
    }
}

/// Normalization axis of the `N x N` spatial attention matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialAxis {
    /// Each column sums to one, so `S * B` mixes student positions convexly.
    #[default]
    Columns,
    Rows,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct CrossAttention {
    #[serde(default)]
    pub lambda: LambdaPolicy,
    #[serde(default)]
    pub spatial_axis: SpatialAxis,
}

impl CrossAttention {
    fn check(&self, g: &Graph<impl Scalar>, t: Var, s: Var) -> Result<(usize, usize)> {
        match (g.shape(t), g.shape(s)) {
            ([ct, nt], [cs, ns]) if ct == cs && nt == ns => Ok((*cs, *ns)),
            (a, b) => dim_err(format!(
                "cross attention needs equal [C, N] teacher/student matrices, got {a:?} and {b:?}"
            )),
        }
    }

    /// `softmax_rows(T * S^T / lambda)`, a `C x C` matrix.
    pub fn channel_weights<S: Scalar>(&self, g: &mut Graph<S>, t: Var, s: Var) -> Result<Var> {
        let (_, n) = self.check(g, t, s)?;
        let lambda = self.lambda.resolve(n);
        let st = g.transpose(s)?;
        let logits = g.matmul(t, st)?;
        let logits = g.scale(logits, S::lit(1.0 / lambda))?;
        g.softmax_rows(logits)
    }

    /// Normalized `T^T * S / lambda`, an `N x N` matrix.
    pub fn spatial_weights<S: Scalar>(&self, g: &mut Graph<S>, t: Var, s: Var) -> Result<Var> {
        let (c, _) = self.check(g, t, s)?;
        let inv_lambda = S::lit(1.0 / self.lambda.resolve(c));
        match self.spatial_axis {
            SpatialAxis::Rows => {
                let tt = g.transpose(t)?;
                let logits = g.matmul(tt, s)?;
                let logits = g.scale(logits, inv_lambda)?;
                g.softmax_rows(logits)
            }
            SpatialAxis::Columns => {
                let rows = self.spatial_rows(g, t, s, inv_lambda)?;
                g.transpose(rows)
            }
        }
    }

    /// `softmax_rows(S^T T / lambda)`: the transpose of the column-normalized weights.
    fn spatial_rows<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        t: Var,
        s: Var,
        inv_lambda: S,
    ) -> Result<Var> {
        // scaling the C x N operand is cheaper than scaling the N x N logits
        let s_scaled = g.scale(s, inv_lambda)?;
        let st = g.transpose(s_scaled)?;
        let logits = g.matmul(st, t)?;
        g.softmax_rows(logits)
    }

    /// Channel interaction: `softmax(T * S^T / lambda) * S`.
    pub fn channel<S: Scalar>(&self, g: &mut Graph<S>, t: Var, s: Var) -> Result<Var> {
        let a = self.channel_weights(g, t, s)?;
        g.matmul(a, s)
    }

    /// Spatial interaction: `S * softmax(T^T * S / lambda)`.
    pub fn spatial<S: Scalar>(&self, g: &mut Graph<S>, t: Var, s: Var) -> Result<Var> {
        if self.spatial_axis == SpatialAxis::Columns {
            let (c, _) = self.check(g, t, s)?;
            let inv_lambda = S::lit(1.0 / self.lambda.resolve(c));
            let rows = self.spatial_rows(g, t, s, inv_lambda)?;
            return g.matmul_nt(s, rows);
        }
        let b = self.spatial_weights(g, t, s)?;
        g.matmul(s, b)
    }

    pub fn channel_map<S: Scalar>(
        &self,
        t: &FeatureMap<S>,
        s: &FeatureMap<S>,
    ) -> Result<FeatureMap<S>> {
        self.eval_map(t, s, |ca, g, t, s| ca.channel(g, t, s))
    }

    pub fn spatial_map<S: Scalar>(
        &self,
        t: &FeatureMap<S>,
        s: &FeatureMap<S>,
    ) -> Result<FeatureMap<S>> {
        self.eval_map(t, s, |ca, g, t, s| ca.spatial(g, t, s))
    }

    fn eval_map<S: Scalar>(
        &self,
        t: &FeatureMap<S>,
        s: &FeatureMap<S>,
        f: impl Fn(&Self, &mut Graph<S>, Var, Var) -> Result<Var>,
    ) -> Result<FeatureMap<S>> {
        if t.values().shape() != s.values().shape() {
            return dim_err(format!(
                "teacher map {:?} and student map {:?} differ",
                t.values().shape(),
                s.values().shape()
            ));
        }
        let mut g = Graph::new();
        let tv = g.constant(t.matrix());
        let sv = g.constant(s.matrix());
        let out = f(self, &mut g, tv, sv)?;
        FeatureMap::from_matrix(g.value(out).clone(), s.height(), s.width())
    }
}

/// Learned 1x1 channel map into the shared distillation width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Projector<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([du, _], [db]) if du == db => Ok(Self { weight, bias }),
            (w, b) => dim_err(format!("projector weight {w:?} and bias {b:?} disagree")),
        }
    }

    /// Xavier-style random init, zero bias.
    pub fn random<R: Rng + ?Sized>(src_channels: usize, unified: usize, rng: &mut R) -> Self {
        let std = (2.0 / (src_channels + unified) as f64).sqrt();
        Self {
            weight: Tensor::randn(&[unified, src_channels], std, rng),
            bias: Tensor::zeros(&[unified]),
        }
    }

    pub fn src_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn unified_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn apply(&self, f: &FeatureMap<S>) -> Result<FeatureMap<S>> {
        let mut g = Graph::new();
        let w = g.constant(self.weight.clone());
        let b = g.constant(self.bias.clone());
        let x = g.constant(f.matrix());
        let y = project(&mut g, w, b, x)?;
        FeatureMap::from_matrix(g.value(y).clone(), f.height(), f.width())
    }
}

/// `weight * x + bias` on a `[C, N]` matrix.
pub fn project<S: Scalar>(g: &mut Graph<S>, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let src = g.shape(weight)[1];
    let c = g.shape(x)[0];
    if src != c {
        return dim_err(format!(
            "projector expects {src} input channels, feature has {c}"
        ));
    }
    let y = g.matmul(weight, x)?;
    g.add_channel_bias(y, bias)
}
