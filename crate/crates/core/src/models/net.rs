use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::FeatureMap;
use crate::error::{config_err, dim_err, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor as a leaf; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.clone();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    /// Copies values from `other`, which must hold the same names and shapes in order.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.names != other.names {
            return config_err("parameter names do not match");
        }
        for (i, (dst, src)) in self.tensors.iter_mut().zip(&other.tensors).enumerate() {
            if dst.shape() != src.shape() {
                return dim_err(format!(
                    "parameter `{}` has shape {:?}, source has {:?}",
                    self.names[i],
                    dst.shape(),
                    src.shape()
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    w: usize,
    b: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    q: usize,
    k: usize,
    v: usize,
    out: Affine,
    ffn_in: Affine,
    ffn_out: Affine,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    intro: Affine,
    encoder: Vec<Vec<Block>>,
    down: Vec<Affine>,
    up: Vec<Affine>,
    reduce: Vec<Affine>,
    decoder: Vec<Vec<Block>>,
    output: Affine,
}

pub const FFN_EXPANSION: usize = 2;

/// Toy transformer-style encoder-decoder with a global residual.
///
/// Blocks are pre-norm channel self-attention followed by a pointwise
/// feed-forward, both residual. Levels are joined by a strided 3x3 conv going
/// down, and a 3x3 conv plus 2x nearest upsampling going up; encoder features
/// are concatenated back in and reduced by a 1x1 map. The output conv starts
/// at zero, so a fresh net is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationNet<S: Scalar = f64> {
    cfg: ModelConfig,
    params: ParamStore<S>,
    layout: Layout,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub output: Var,
    /// `[C, N]` matrices, one per tap in [`ModelConfig::taps`] order.
    pub features: Vec<Var>,
    /// `(H, W)` of every tap.
    pub extents: Vec<(usize, usize)>,
}

struct Init<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Init<'_, S> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, zero: bool) -> Affine {
        let w = if zero {
            Tensor::zeros(&[c_out, c_in, 3, 3])
        } else {
            Tensor::randn(
                &[c_out, c_in, 3, 3],
                (1.0 / (9 * c_in) as f64).sqrt(),
                &mut self.rng,
            )
        };
        let w = self.store.push(format!("{name}.weight"), w);
        let b = self
            .store
            .push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Affine { w, b: Some(b) }
    }

    fn linear(&mut self, name: &str, c_in: usize, c_out: usize, bias: bool, gain: f64) -> Affine {
        let w = Tensor::randn(&[c_out, c_in], gain / (c_in as f64).sqrt(), &mut self.rng);
        let w = self.store.push(format!("{name}.weight"), w);
        let b = bias.then(|| {
            self.store
                .push(format!("{name}.bias"), Tensor::zeros(&[c_out]))
        });
        Affine { w, b }
    }

    fn block(&mut self, name: &str, c: usize) -> Block {
        let q = self.linear(&format!("{name}.q"), c, c, false, 1.0).w;
        let k = self.linear(&format!("{name}.k"), c, c, false, 1.0).w;
        let v = self.linear(&format!("{name}.v"), c, c, false, 1.0).w;
        let out = self.linear(&format!("{name}.out"), c, c, true, 0.5);
        let ffn_in = self.linear(&format!("{name}.ffn_in"), c, FFN_EXPANSION * c, true, 1.0);
        let ffn_out = self.linear(&format!("{name}.ffn_out"), FFN_EXPANSION * c, c, true, 0.5);
        Block {
            q,
            k,
            v,
            out,
            ffn_in,
            ffn_out,
        }
    }
}

impl<S: Scalar> RestorationNet<S> {
    /// Deterministic initialization from `(cfg, seed)`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let layout = build_layout(cfg, &mut init);
        Ok(Self {
            cfg: cfg.clone(),
            params,
            layout,
        })
    }

    /// Rebuilds a net around existing parameters, checking names and shapes.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Zeroes the final conv, making the net the identity map.
    pub fn zero_output_layer(&mut self) {
        let layout = &self.layout;
        for idx in [Some(layout.output.w), layout.output.b]
            .into_iter()
            .flatten()
        {
            self.params.tensors_mut()[idx]
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = S::zero());
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.cfg.spatial_divisor();
        match *shape {
            [c, h, w] if c == self.cfg.input_channels => {
                if h % d != 0 || w % d != 0 {
                    return dim_err(format!(
                        "input extent {h}x{w} must be divisible by {d} for {} levels",
                        self.cfg.levels()
                    ));
                }
                Ok(())
            }
            ref s => dim_err(format!(
                "expected a [{}, H, W] image, got {s:?}",
                self.cfg.input_channels
            )),
        }
    }

    /// Records a forward pass on `g` using parameter handles from [`ParamStore::bind`].
    pub fn forward_graph(&self, g: &mut Graph<S>, p: &[Var], x: Var) -> Result<NetOutput> {
        self.check_input(g.shape(x))?;
        if p.len() != self.params.len() {
            return config_err(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                p.len()
            ));
        }
        let layout = &self.layout;
        let levels = self.cfg.levels();
        let (_, h0, w0) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
        let extent = |l: usize| (h0 >> l, w0 >> l);

        let mut features = Vec::with_capacity(self.cfg.tap_count());
        let mut extents = Vec::with_capacity(self.cfg.tap_count());
        let mut skips = Vec::with_capacity(levels);

        let mut h = conv(g, p, layout.intro, x, 1)?;
        for l in 0..levels {
            let c = self.cfg.channels_at(l);
            let (hh, ww) = extent(l);
            let mut m = g.reshape(h, &[c, hh * ww])?;
            for blk in &layout.encoder[l] {
                m = block(g, p, blk, m)?;
            }
            features.push(m);
            extents.push((hh, ww));
            h = g.reshape(m, &[c, hh, ww])?;
            if l + 1 < levels {
                skips.push(h);
                h = conv(g, p, layout.down[l], h, 2)?;
            }
        }
        for l in (0..levels - 1).rev() {
            let c = self.cfg.channels_at(l);
            let (hh, ww) = extent(l);
            let u = conv(g, p, layout.up[l], h, 1)?;
            let u = g.upsample_nearest2x(u)?;
            let cat = g.concat_channels(u, skips[l])?;
            let cat = g.reshape(cat, &[2 * c, hh * ww])?;
            let mut m = affine(g, p, layout.reduce[l], cat)?;
            for blk in &layout.decoder[l] {
                m = block(g, p, blk, m)?;
            }
            features.push(m);
            extents.push((hh, ww));
            h = g.reshape(m, &[c, hh, ww])?;
        }
        let correction = conv(g, p, layout.output, h, 1)?;
        let output = g.add(x, correction)?;
        Ok(NetOutput {
            output,
            features,
            extents,
        })
    }

    /// Inference without gradients: reconstruction plus every tapped feature map.
    pub fn forward_with_features(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<FeatureMap<S>>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, &p, xv)?;
        let feats = out
            .features
            .iter()
            .zip(&out.extents)
            .map(|(&v, &(hh, ww))| FeatureMap::from_matrix(g.value(v).clone(), hh, ww))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.value(out.output).clone(), feats))
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_with_features(x)?.0)
    }

    /// Multiply-accumulates recorded while running a forward pass on an `h x w` input.
    pub fn traced_macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[self.cfg.input_channels, h, w]));
        self.forward_graph(&mut g, &p, x)?;
        Ok(g.macs())
    }
}

fn build_layout<S: Scalar>(cfg: &ModelConfig, init: &mut Init<'_, S>) -> Layout {
    let levels = cfg.levels();
    let intro = init.conv("intro", cfg.input_channels, cfg.base_channels, false);
    let mut encoder = Vec::with_capacity(levels);
    let mut down = Vec::new();
    for l in 0..levels {
        let c = cfg.channels_at(l);
        encoder.push(
            (0..cfg.level_layers[l])
                .map(|i| init.block(&format!("enc{l}.block{i}"), c))
                .collect(),
        );
        if l + 1 < levels {
            down.push(init.conv(&format!("down{l}"), c, 2 * c, false));
        }
    }
    let mut up = vec![None; levels.saturating_sub(1)];
    let mut reduce = vec![None; levels.saturating_sub(1)];
    let mut decoder = vec![Vec::new(); levels.saturating_sub(1)];
    for l in (0..levels - 1).rev() {
        let c = cfg.channels_at(l);
        up[l] = Some(init.conv(&format!("up{l}"), 2 * c, c, false));
        reduce[l] = Some(init.linear(&format!("reduce{l}"), 2 * c, c, true, 1.0));
        decoder[l] = (0..cfg.level_layers[l])
            .map(|i| init.block(&format!("dec{l}.block{i}"), c))
            .collect();
    }
    let output = init.conv("output", cfg.base_channels, cfg.input_channels, true);
    Layout {
        intro,
        encoder,
        down,
        up: up.into_iter().map(Option::unwrap).collect(),
        reduce: reduce.into_iter().map(Option::unwrap).collect(),
        decoder,
        output,
    }
}

fn conv<S: Scalar>(g: &mut Graph<S>, p: &[Var], a: Affine, x: Var, stride: usize) -> Result<Var> {
    g.conv2d(x, p[a.w], p[a.b.expect("conv has bias")], stride)
}

fn affine<S: Scalar>(g: &mut Graph<S>, p: &[Var], a: Affine, x: Var) -> Result<Var> {
    let y = g.matmul(p[a.w], x)?;
    match a.b {
        Some(b) => g.add_channel_bias(y, p[b]),
        None => Ok(y),
    }
}

fn block<S: Scalar>(g: &mut Graph<S>, p: &[Var], b: &Block, m: Var) -> Result<Var> {
    let n = g.shape(m)[1];
    let h = g.layer_norm_channels(m)?;
    let q = g.matmul(p[b.q], h)?;
    let k = g.matmul(p[b.k], h)?;
    let v = g.matmul(p[b.v], h)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, S::lit(1.0 / (n as f64).sqrt()))?;
    let attn = g.softmax_rows(logits)?;
    let mixed = g.matmul(attn, v)?;
    let o = affine(g, p, b.out, mixed)?;
    let m = g.add(m, o)?;

    let h = g.layer_norm_channels(m)?;
    let f = affine(g, p, b.ffn_in, h)?;
    let f = g.gelu(f)?;
    let f = affine(g, p, b.ffn_out, f)?;
    g.add(m, f)
}
