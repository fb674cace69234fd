//! Hybrid CNN-Transformer encoder and the 6-DoF pose network.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`]; forward passes run
//! through a [`Session`] that binds those parameters into a graph.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::params::{join, Init, ParamGroup, ParamId, ParamStore, Session};
use crate::{math, Error, Result, Tensor};

/// Std of the truncated-normal init used for projections and embeddings.
pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Pose output scale, so an untrained network predicts near-identity motion.
pub const POSE_SCALE: f64 = 0.01;
pub const POSE_CHANNELS: [usize; 6] = [8, 16, 32, 64, 64, 64];
pub const POSE_KERNELS: [usize; 6] = [7, 5, 3, 3, 3, 3];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Number of transformer layers `L`.
    pub num_layers: usize,
    /// Attention heads `M`.
    pub num_heads: usize,
    /// Per-head width `d`.
    pub head_dim: usize,
    /// Token width `C`.
    pub embed_dim: usize,
    /// Patch side on the stem feature map.
    pub patch_size: usize,
    /// One stride-2 residual stage per entry.
    pub stem_channels: Vec<usize>,
    /// Input `(height, width)`.
    pub image_size: (usize, usize),
    /// MLP hidden width as a multiple of `C`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            embed_dim: 64,
            patch_size: 4,
            stem_channels: vec![16, 32],
            image_size: (96, 128),
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.head_dim == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("num_heads, head_dim, embed_dim and mlp_ratio must be positive".into());
        }
        if self.patch_size == 0 || self.stem_channels.is_empty() || self.stem_channels.contains(&0) {
            return bad("patch_size and stem channels must be positive, with at least one stem stage".into());
        }
        let unit = self.stem_stride() * self.patch_size;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return bad(alloc::format!(
                "image size {h}x{w} must be a positive multiple of stem stride x patch size = {unit}"
            ));
        }
        Ok(())
    }

    pub fn stem_stride(&self) -> usize {
        1 << self.stem_channels.len()
    }

    /// Spatial size of the stem output.
    pub fn feature_size(&self) -> (usize, usize) {
        let s = self.stem_stride();
        (self.image_size.0 / s, self.image_size.1 / s)
    }

    /// Patch grid `(rows, cols)`.
    pub fn token_grid(&self) -> (usize, usize) {
        let (fh, fw) = self.feature_size();
        (fh / self.patch_size, fw / self.patch_size)
    }

    /// `N`, the number of patch tokens.
    pub fn num_patches(&self) -> usize {
        let (r, c) = self.token_grid();
        r * c
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut Init,
    group: ParamGroup,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, init: &'a mut Init, group: ParamGroup) -> Self {
        Self {
            store,
            init,
            group,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        Builder {
            store: self.store,
            init: self.init,
            group: self.group,
            prefix: join(&self.prefix, name),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.store.add(join(&self.prefix, name), value, self.group)
    }

    pub fn init(&mut self) -> &mut Init {
        self.init
    }
}

/// `y = x W + b` on row vectors; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let mut b = b.scope(name);
        let w = b.init().trunc_normal(&[fan_in, fan_out], INIT_STD);
        let weight = b.add("weight", w);
        let bias = bias.then(|| b.add("bias", Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let y = s.graph.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_col_bias(y, b)
            }
            None => y,
        }
    }
}

/// 2-D convolution with "same"-style `k / 2` padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut b = b.scope(name);
        let w = b.init().kaiming_uniform(&[cout, cin, k, k], cin * k * k);
        let weight = b.add("weight", w);
        let bias = Some(b.add("bias", Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            spec: Conv2dSpec::new(stride, k / 2),
        }
    }

    /// Same shape as [`Conv::new`] but with all-zero weights.
    pub fn zeroed(b: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let mut b = b.scope(name);
        let weight = b.add("weight", Tensor::zeros(&[cout, cin, k, k]));
        let bias = Some(b.add("bias", Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            spec: Conv2dSpec::new(stride, k / 2),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            gamma: b.add("gamma", Tensor::full(&[dim], 1.0)),
            beta: b.add("beta", Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm_rows(x, g, b, LAYER_NORM_EPS)
    }
}

/// Residual conv unit: `x + conv(relu(x))`.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub conv: Conv,
}

impl ResidualUnit {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Self {
        Self {
            conv: Conv::new(b, name, channels, channels, 3, 1),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let r = s.graph.relu(x);
        let r = self.conv.forward(s, r);
        s.graph.add(x, r)
    }
}

/// Reduced residual CNN backbone: per stage a stride-2 conv + ReLU followed by
/// a residual unit, then a 1x1 projection to the token width.
#[derive(Clone, Debug)]
pub struct CnnStem {
    stages: Vec<(Conv, ResidualUnit)>,
    proj: Conv,
    input_size: (usize, usize),
}

impl CnnStem {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Self {
        let mut b = b.scope("stem");
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in cfg.stem_channels.iter().enumerate() {
            let down = Conv::new(&mut b, &alloc::format!("down{i}"), cin, c, 3, 2);
            let res = ResidualUnit::new(&mut b, &alloc::format!("res{i}"), c);
            stages.push((down, res));
            cin = c;
        }
        let proj = Conv::new(&mut b, "proj", cin, cfg.embed_dim, 1, 1);
        Self {
            stages,
            proj,
            input_size: cfg.image_size,
        }
    }

    /// `[3, H, W]` image to the `[C, H / s, W / s]` feature map `F`.
    pub fn forward(&self, s: &mut Session, image: Var) -> Result<Var> {
        let (h, w) = self.input_size;
        if s.graph.shape(image) != [3, h, w] {
            return Err(Error::shape(
                "cnn_stem",
                alloc::format!("expected [3, {h}, {w}], got {:?}", s.graph.shape(image)),
            ));
        }
        let mut x = image;
        for (down, res) in &self.stages {
            x = down.forward(s, x);
            x = s.graph.relu(x);
            x = res.forward(s, x);
        }
        Ok(self.proj.forward(s, x))
    }
}

/// `Z_0 = [t_s; p_1 E; ...; p_N E] (+ positional embedding)`.
///
/// `f` is `[C, H, W]`; `e_weight` is `[C p^2, C']`; `special` is `[1, C']`.
pub fn patchify_and_embed(
    g: &mut Graph,
    f: Var,
    patch: usize,
    e_weight: Var,
    e_bias: Option<Var>,
    special: Var,
    pos: Option<Var>,
) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify_and_embed",
            alloc::format!("feature {s:?} not divisible by patch {patch}"),
        ));
    }
    let patches = g.patchify(f, patch);
    let mut tokens = g.matmul(patches, e_weight);
    if let Some(b) = e_bias {
        tokens = g.add_col_bias(tokens, b);
    }
    let z = g.concat_rows(&[special, tokens]);
    Ok(match pos {
        Some(p) => g.add(z, p),
        None => z,
    })
}

/// One attention head: `softmax(Q K^T / sqrt(d)) V` with `Q = Z W_Q` etc.
pub fn self_attention_head(g: &mut Graph, z: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let d = g.shape(wq)[1];
    let q = g.matmul(z, wq);
    let k = g.matmul(z, wk);
    let v = g.matmul(z, wv);
    let a = attention_weights(g, q, k, 1.0 / math::sqrt(d as f64));
    g.matmul(a, v)
}

/// Row-stochastic `softmax(scale * Q K^T)`, rows indexed by queries.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var, scale: f64) -> Var {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = if scale == 1.0 { logits } else { g.mul_scalar(logits, scale) };
    g.softmax_rows(logits)
}

/// Pre-norm transformer layer:
/// `MSA = Z + concat(SA^1..SA^M)(LN(Z)) W`, `Z' = MLP(LN(MSA)) + MSA`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    /// `[M d, C]`.
    pub wo: ParamId,
    pub ln_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Self {
        let mut b = b.scope(name);
        let (c, d) = (cfg.embed_dim, cfg.head_dim);
        let ln_attn = LayerNorm::new(&mut b, "ln_attn", c);
        let (mut wq, mut wk, mut wv) = (Vec::new(), Vec::new(), Vec::new());
        for m in 0..cfg.num_heads {
            let mut h = b.scope(&alloc::format!("head{m}"));
            let q = h.init().trunc_normal(&[c, d], INIT_STD);
            wq.push(h.add("wq", q));
            let k = h.init().trunc_normal(&[c, d], INIT_STD);
            wk.push(h.add("wk", k));
            let v = h.init().trunc_normal(&[c, d], INIT_STD);
            wv.push(h.add("wv", v));
        }
        let o = b.init().trunc_normal(&[cfg.num_heads * d, c], INIT_STD);
        let wo = b.add("wo", o);
        let ln_mlp = LayerNorm::new(&mut b, "ln_mlp", c);
        let hidden = cfg.mlp_ratio * c;
        let fc1 = Linear::new(&mut b, "fc1", c, hidden, true);
        let fc2 = Linear::new(&mut b, "fc2", hidden, c, true);
        Self {
            ln_attn,
            wq,
            wk,
            wv,
            wo,
            ln_mlp,
            fc1,
            fc2,
        }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Var {
        let x = self.ln_attn.forward(s, z);
        let mut heads = Vec::with_capacity(self.wq.len());
        for m in 0..self.wq.len() {
            let (q, k, v) = (s.param(self.wq[m]), s.param(self.wk[m]), s.param(self.wv[m]));
            heads.push(self_attention_head(s.graph, x, q, k, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { s.graph.concat_cols(&heads) };
        let wo = s.param(self.wo);
        let proj = s.graph.matmul(cat, wo);
        let msa = s.graph.add(z, proj);

        let y = self.ln_mlp.forward(s, msa);
        let y = self.fc1.forward(s, y);
        let y = s.graph.gelu(y);
        let y = self.fc2.forward(s, y);
        s.graph.add(y, msa)
    }
}

/// Token matrix `Z_l` of shape `[N + 1, C]` (special token first).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layer_index: usize,
}

impl TokenSequence {
    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[0] - 1
    }
}

/// Graph handles produced by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Stem feature map `F`.
    pub features: Var,
    /// `Z_0`.
    pub embedded: Var,
    /// `Z_1 .. Z_L`.
    pub layers: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: CnnStem,
    pub embed: Linear,
    pub special: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = b.scope("encoder");
        let stem = CnnStem::new(&mut b, cfg);
        let c = cfg.embed_dim;
        let p = cfg.patch_size;
        let embed = Linear::new(&mut b, "embed", c * p * p, c, true);
        let t = b.init().trunc_normal(&[1, c], INIT_STD);
        let special = b.add("special_token", t);
        let t = b.init().trunc_normal(&[cfg.num_patches() + 1, c], INIT_STD);
        let pos = b.add("pos_embed", t);
        let layers = (0..cfg.num_layers)
            .map(|l| TransformerLayer::new(&mut b, &alloc::format!("layer{l}"), cfg))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            stem,
            embed,
            special,
            pos,
            layers,
        })
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<EncoderOutput> {
        let features = self.stem.forward(s, image)?;
        let w = s.param(self.embed.weight);
        let b = self.embed.bias.map(|b| s.param(b));
        let t = s.param(self.special);
        let pos = s.param(self.pos);
        let embedded = patchify_and_embed(s.graph, features, self.config.patch_size, w, b, t, Some(pos))?;
        let mut z = embedded;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            z = layer.forward(s, z);
            layers.push(z);
        }
        Ok(EncoderOutput {
            features,
            embedded,
            layers,
        })
    }

    /// Inference on one normalized image: `F` and `[Z_1 .. Z_L]`.
    pub fn encode(&self, params: &ParamStore, image: &Tensor) -> Result<(Tensor, Vec<TokenSequence>)> {
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, params, false);
        let x = s.graph.constant(image.clone());
        let out = self.forward(&mut s, x)?;
        let layers = out
            .layers
            .iter()
            .enumerate()
            .map(|(l, &v)| TokenSequence {
                tokens: g.value(v).clone(),
                layer_index: l + 1,
            })
            .collect();
        Ok((g.value(out.features).clone(), layers))
    }
}

/// Seven-conv pose network over the channel-concatenated `[target, source]`
/// pair: six stride-2 convs with ReLU, a 1x1 conv to six channels, global
/// average pooling and a 0.01 output scale.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub convs: Vec<Conv>,
    pub head: Conv,
}

impl PoseNet {
    pub fn new(b: &mut Builder) -> Self {
        let mut b = b.scope("pose");
        let mut cin = 6;
        let mut convs = Vec::new();
        for (i, (&c, &k)) in POSE_CHANNELS.iter().zip(&POSE_KERNELS).enumerate() {
            convs.push(Conv::new(&mut b, &alloc::format!("conv{i}"), cin, c, k, 2));
            cin = c;
        }
        let head = Conv::zeroed(&mut b, "head", cin, 6, 1, 1);
        Self { convs, head }
    }

    /// Target-to-source motion `[rx, ry, rz, tx, ty, tz]` as a `[6]` var.
    pub fn forward(&self, s: &mut Session, target: Var, source: Var) -> Result<Var> {
        if s.graph.shape(target) != s.graph.shape(source) || s.graph.shape(target).len() != 3 {
            return Err(Error::shape("estimate_pose", "target and source must be same-size [C, H, W] frames"));
        }
        let mut x = s.graph.concat_rows(&[target, source]);
        for conv in &self.convs {
            x = conv.forward(s, x);
            x = s.graph.relu(x);
        }
        let y = self.head.forward(s, x);
        let sh = s.graph.shape(y).to_vec();
        let y = s.graph.reshape(y, &[6, sh[1] * sh[2]]);
        let y = s.graph.transpose(y);
        let y = s.graph.mean_leading(y);
        let y = s.graph.reshape(y, &[6]);
        Ok(s.graph.mul_scalar(y, POSE_SCALE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{check_gradient, DEFAULT_EPS};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            head_dim: 3,
            embed_dim: 4,
            patch_size: 2,
            stem_channels: vec![3],
            image_size: (8, 8),
            mlp_ratio: 2,
        }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let mut b = Builder::new(&mut store, &mut init, ParamGroup::Depth);
        let enc = Encoder::new(&mut b, cfg).unwrap();
        (store, enc)
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        init.trunc_normal(&[3, h, w], 0.5)
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.num_layers, 4);
        assert_eq!(cfg.num_patches(), (96 / 16) * (128 / 16));
        assert!(EncoderConfig { num_layers: 0, ..cfg.clone() }.validate().is_err());
        assert!(EncoderConfig { image_size: (90, 128), ..cfg }.validate().is_err());
    }

    #[test]
    fn stem_shape_and_zero_input() {
        let cfg = EncoderConfig {
            embed_dim: 32,
            image_size: (64, 64),
            ..EncoderConfig::default()
        };
        let (store, enc) = build(&cfg, 1);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, false);
        let x = s.graph.constant(Tensor::zeros(&[3, 64, 64]));
        let f = enc.stem.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(f), [32, 16, 16]);
        assert!(s.graph.value(f).all_finite());
        let bad = s.graph.constant(Tensor::zeros(&[3, 32, 64]));
        assert!(enc.stem.forward(&mut s, bad).is_err());
    }

    #[test]
    fn token_counts() {
        let mut g = Graph::new();
        for (side, expect) in [(16usize, 2usize), (32, 5)] {
            let f = g.constant(Tensor::full(&[32, side, side], 0.1));
            let e = g.constant(Tensor::zeros(&[32 * 16 * 16, 32]));
            let t = g.constant(Tensor::zeros(&[1, 32]));
            let z = patchify_and_embed(&mut g, f, 16, e, None, t, None).unwrap();
            assert_eq!(g.shape(z), [expect, 32]);
        }
    }

    #[test]
    fn embedding_matches_matrix_multiply() {
        // One 2x2 patch of a 3-channel map, projection maps 12 -> 12 as identity.
        let f_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let mut eye = vec![0.0; 144];
        for i in 0..12 {
            eye[i * 12 + i] = 1.0;
        }
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[3, 2, 2], f_data.clone()).unwrap());
        let e = g.constant(Tensor::new(&[12, 12], eye).unwrap());
        let t = g.constant(Tensor::full(&[1, 12], 7.0));
        let z = patchify_and_embed(&mut g, f, 2, e, None, t, None).unwrap();
        let z = g.value(z).data();
        assert!(z[..12].iter().all(|&v| v == 7.0));
        // (c, dy, dx) flattening equals the channel-major layout of one patch.
        assert_eq!(&z[12..], &f_data[..]);
    }

    fn loop_attention(z: &[Vec<f64>], wq: &[Vec<f64>], wk: &[Vec<f64>], wv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let proj = |w: &[Vec<f64>]| -> Vec<Vec<f64>> {
            z.iter()
                .map(|row| (0..w[0].len()).map(|j| (0..row.len()).map(|i| row[i] * w[i][j]).sum()).collect())
                .collect()
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let d = wq[0].len() as f64;
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                (0..v[0].len()).map(|c| (0..v.len()).map(|j| e[j] / s * v[j][c]).sum()).collect()
            })
            .collect()
    }

    fn rows(t: &[Vec<f64>]) -> Tensor {
        let (r, c) = (t.len(), t[0].len());
        Tensor::new(&[r, c], t.concat()).unwrap()
    }

    #[test]
    fn attention_head_loop_oracle() {
        let z = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]];
        let wq = vec![vec![1.0, 2.0], vec![0.0, -1.0]];
        let wk = vec![vec![-1.0, 1.0], vec![2.0, 0.0]];
        let wv = vec![vec![3.0, 0.0], vec![1.0, 1.0]];
        let mut g = Graph::new();
        let vars: Vec<Var> = [&z, &wq, &wk, &wv].iter().map(|m| g.constant(rows(m))).collect();
        let out = self_attention_head(&mut g, vars[0], vars[1], vars[2], vars[3]);
        let expect = loop_attention(&z, &wq, &wk, &wv).concat();
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_and_identical_tokens() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        let w = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = self_attention_head(&mut g, z, w, w, w);
        let v = g.matmul(z, w);
        assert_eq!(g.value(out), g.value(v));

        let z2 = g.constant(Tensor::new(&[2, 2], vec![0.3, -0.7, 0.3, -0.7]).unwrap());
        let q = g.matmul(z2, w);
        let a = attention_weights(&mut g, q, q, 1.0);
        assert!(g.value(a).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn zeroed_residual_branches_are_identity() {
        let cfg = tiny();
        let (mut store, enc) = build(&cfg, 2);
        for layer in &enc.layers {
            *store.get_mut(layer.wo) = Tensor::zeros(store.get(layer.wo).shape());
            let (w, b) = (layer.fc2.weight, layer.fc2.bias.unwrap());
            *store.get_mut(w) = Tensor::zeros(store.get(w).shape());
            *store.get_mut(b) = Tensor::zeros(store.get(b).shape());
        }
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, false);
        let x = s.graph.constant(image(8, 8, 3));
        let out = enc.forward(&mut s, x).unwrap();
        assert_eq!(out.layers.len(), 2);
        for &z in &out.layers {
            assert_eq!(g.value(z), g.value(out.embedded));
        }
    }

    #[test]
    fn encode_layer_counts_and_determinism() {
        for l in [2, 4] {
            let cfg = EncoderConfig { num_layers: l, ..tiny() };
            let (store, enc) = build(&cfg, 4);
            let img = image(8, 8, 5);
            let (f, zs) = enc.encode(&store, &img).unwrap();
            assert_eq!(zs.len(), l);
            assert!(zs.iter().all(|z| z.tokens.shape() == [cfg.num_patches() + 1, 4]));
            assert_eq!(enc.encode(&store, &img).unwrap(), (f, zs));
        }
    }

    #[test]
    fn transformer_layer_input_gradient() {
        let cfg = tiny();
        let (store, enc) = build(&cfg, 6);
        let z = Init::new(7).trunc_normal(&[5, 4], 1.0);
        let layer = &enc.layers[0];
        let r = check_gradient(
            &[z],
            |g, v| {
                let mut s = Session::new(g, &store, false);
                layer.forward(&mut s, v[0])
            },
            DEFAULT_EPS,
            64,
        );
        assert!(r.rel_error < 1e-6, "{}", r.rel_error);
    }

    #[test]
    fn pose_net_identity_at_init_and_gradient() {
        let mut store = ParamStore::new();
        let mut init = Init::new(8);
        let pose = PoseNet::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Pose));
        let (t, src) = (image(16, 16, 9), image(16, 16, 10));
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, false);
        let (a, b) = (s.graph.constant(t.clone()), s.graph.constant(src.clone()));
        let p = pose.forward(&mut s, a, b).unwrap();
        assert_eq!(g.value(p).data(), &[0.0; 6]);

        let head = pose.head.weight;
        *store.get_mut(head) = Init::new(11).trunc_normal(store.get(head).shape(), 0.5);
        let r = check_gradient(
            &[t, src],
            |g, v| {
                let mut s = Session::new(g, &store, false);
                pose.forward(&mut s, v[0], v[1]).unwrap()
            },
            DEFAULT_EPS,
            40,
        );
        assert!(r.rel_error < 1e-4, "{}", r.rel_error);
        assert!(r.analytic.iter().any(|&v| v != 0.0));
    }
}
