//! Attention connection module (position and channel attention), the
//! feature fusion decoder and the disparity head.
//!
//! Token matrices are handled token-major (`[N, C]`, one row per patch);
//! the `C x N` attention maps are their transposes.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::networks::{Builder, Conv, EncoderConfig, Linear, ResidualUnit};
use crate::params::{ParamId, Session};
use crate::{Error, Result, Tensor};

pub const CHANNEL_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_MIN_DEPTH: f64 = 0.1;
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;
/// Largest upsampling of a decoder stage relative to the token grid.
pub const MAX_STAGE_UPSCALE: usize = 8;

/// Drops the special token: `[N + 1, C]` to `[N, C]`.
pub fn strip_special(g: &mut Graph, z: Var) -> Var {
    let n = g.shape(z)[0];
    g.slice_rows(z, 1, n)
}

/// `A^p = softmax(Q K^T) V` with `Q, K, V` from 1x1 projections of `Z`.
/// No temperature is applied. Returns `[N, C]`.
pub fn position_attention(g: &mut Graph, z: Var, q: (Var, Option<Var>), k: (Var, Option<Var>), v: (Var, Option<Var>)) -> Var {
    let mut project = |(w, b): (Var, Option<Var>)| {
        let y = g.matmul(z, w);
        match b {
            Some(b) => g.add_col_bias(y, b),
            None => y,
        }
    };
    let (q, k, v) = (project(q), project(k), project(v));
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let a = g.softmax_rows(logits);
    g.matmul(a, v)
}

/// `A^c = softmax(Z Z^T) Z` over the `C x C` channel gram matrix (rows
/// normalized). Takes and returns token-major `[N, C]`.
pub fn channel_attention(g: &mut Graph, z: Var) -> Var {
    let zc = g.transpose(z);
    let gram = g.matmul(zc, z);
    let s = g.softmax_rows(gram);
    let out = g.matmul(s, zc);
    g.transpose(out)
}

/// Plain-value attention maps of one layer, each `C x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub position: Tensor,
    pub channel: Tensor,
}

/// Bound parameters of one fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w_p: Var,
    pub w_c: Var,
    /// `[C_out, C, 3, 3]`.
    pub conv_w: Var,
    pub conv_b: Option<Var>,
    /// Per output channel `[C_out]`.
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
}

/// One fusion step:
/// `X^ = Up(Conv(w_p A^p + w_c A^c + Z)) + X_skip`,
/// `X = X^ (1 + tanh(gamma CN(alpha ||X^_c||_2 + beta)))`.
///
/// `z`, `ap`, `ac` are `[N, C]` on a `grid = (rows, cols)` token layout;
/// `skip` is `[C_out, H_s, W_s]` and fixes the output size.
pub fn ffd_fuse(g: &mut Graph, z: Var, ap: Var, ac: Var, grid: (usize, usize), skip: Var, p: &FusionVars) -> Result<Var> {
    let zs = g.shape(z).to_vec();
    if zs.len() != 2 || zs[0] != grid.0 * grid.1 || g.shape(ap) != zs.as_slice() || g.shape(ac) != zs.as_slice() {
        return Err(Error::shape(
            "ffd_fuse",
            alloc::format!("tokens {zs:?}, A^p {:?}, A^c {:?}, grid {grid:?}", g.shape(ap), g.shape(ac)),
        ));
    }
    let c = zs[1];
    let ws = g.shape(p.conv_w).to_vec();
    let ss = g.shape(skip).to_vec();
    if ws.len() != 4 || ws[1] != c || ss.len() != 3 || ss[0] != ws[0] {
        return Err(Error::shape(
            "ffd_fuse",
            alloc::format!("conv weight {ws:?} vs tokens width {c} and skip {ss:?}"),
        ));
    }
    let wap = g.scale_by(ap, p.w_p);
    let wac = g.scale_by(ac, p.w_c);
    let fused = g.add(wap, wac);
    let fused = g.add(fused, z);
    let fused = g.transpose(fused);
    let fused = g.reshape(fused, &[c, grid.0, grid.1]);
    let y = g.conv2d(fused, p.conv_w, p.conv_b, crate::autograd::Conv2dSpec::new(1, ws[2] / 2));
    let y = g.resize_bilinear(y, ss[1], ss[2]);
    let x_hat = g.add(y, skip);
    Ok(channel_gate(g, x_hat, p.alpha, p.beta, p.gamma))
}

/// `x (1 + tanh(gamma CN(alpha ||x_c||_2 + beta)))` with the per-channel
/// spatial L2 norm and `CN(s) = s / sqrt(mean(s^2) + eps)`.
pub fn channel_gate(g: &mut Graph, x: Var, alpha: Var, beta: Var, gamma: Var) -> Var {
    let sq = g.row_sum_squares(x);
    let sq = g.add_scalar(sq, CHANNEL_NORM_EPS);
    let norm = g.sqrt(sq);
    let s = g.mul(alpha, norm);
    let s = g.add(s, beta);
    let s2 = g.square(s);
    let ms = g.mean(s2);
    let ms = g.add_scalar(ms, CHANNEL_NORM_EPS);
    let rms = g.sqrt(ms);
    let cn = g.div_by(s, rms);
    let t = g.mul(gamma, cn);
    let t = g.tanh(t);
    let gate = g.add_scalar(t, 1.0);
    g.mul_rows(x, gate)
}

/// `sigmoid(conv(elu(x)))` upsampled to `(h, w)`: a `[1, h, w]` disparity.
pub fn predict_disparity(g: &mut Graph, x: Var, conv_w: Var, conv_b: Option<Var>, out: (usize, usize)) -> Var {
    let k = g.shape(conv_w)[2];
    let y = g.elu(x);
    let y = g.conv2d(y, conv_w, conv_b, crate::autograd::Conv2dSpec::new(1, k / 2));
    let y = g.sigmoid(y);
    g.resize_bilinear(y, out.0, out.1)
}

fn depth_coefficients(min_depth: f64, max_depth: f64) -> Result<(f64, f64)> {
    if !(min_depth > 0.0) || !(max_depth > min_depth) || !max_depth.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "depth range needs 0 < min < max, got ({min_depth}, {max_depth})"
        )));
    }
    Ok((1.0 / min_depth - 1.0 / max_depth, 1.0 / max_depth))
}

/// `depth = 1 / (a disp + b)` so disparity 1 maps to `min_depth` and 0 to
/// `max_depth`.
pub fn disparity_to_depth(g: &mut Graph, disp: Var, min_depth: f64, max_depth: f64) -> Result<Var> {
    let (a, b) = depth_coefficients(min_depth, max_depth)?;
    let y = g.mul_scalar(disp, a);
    let y = g.add_scalar(y, b);
    Ok(g.recip(y))
}

/// Sigmoid-bounded inverse depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("DisparityMap", "value count does not match size"));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_depth(&self, min_depth: f64, max_depth: f64) -> Result<crate::image::DepthMap> {
        let (a, b) = depth_coefficients(min_depth, max_depth)?;
        let d = self.values.iter().map(|&v| 1.0 / (a * v + b)).collect();
        crate::image::DepthMap::new(self.height, self.width, d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    /// Channels of decoder stage `1..L`; the last entry repeats.
    pub channels: Vec<usize>,
    /// Disparity outputs, taken from the finest stages.
    pub num_scales: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 32, 16, 8],
            num_scales: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) || self.num_scales == 0 {
            return Err(Error::Config("decoder needs positive channels and at least one scale".into()));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels[stage.min(self.channels.len() - 1)]
    }
}

/// Position-attention projections of one layer.
#[derive(Clone, Debug)]
pub struct AcmBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl AcmBlock {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Self {
        let mut b = b.scope(name);
        let qk = (c / 8).max(1);
        Self {
            query: Linear::new(&mut b, "query", c, qk, true),
            key: Linear::new(&mut b, "key", c, qk, true),
            value: Linear::new(&mut b, "value", c, c, true),
        }
    }

    /// Both attentions of stripped tokens `[N, C]`, token-major.
    pub fn forward(&self, s: &mut Session, z: Var) -> (Var, Var) {
        let mut bind = |l: &Linear| (s.param(l.weight), l.bias.map(|b| s.param(b)));
        let (q, k, v) = (bind(&self.query), bind(&self.key), bind(&self.value));
        let ap = position_attention(s.graph, z, q, k, v);
        let ac = channel_attention(s.graph, z);
        (ap, ac)
    }
}

/// Parameters of one fusion stage plus its skip transition.
#[derive(Clone, Debug)]
pub struct FfdStage {
    pub w_p: ParamId,
    pub w_c: ParamId,
    pub conv: Conv,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub gamma: ParamId,
    /// 1x1 conv mapping the previous stage's channels.
    pub transition: Conv,
}

impl FfdStage {
    fn new(b: &mut Builder, name: &str, c: usize, prev: usize, out: usize) -> Self {
        let mut b = b.scope(name);
        Self {
            w_p: b.add("w_p", Tensor::scalar(0.0)),
            w_c: b.add("w_c", Tensor::scalar(0.0)),
            conv: Conv::new(&mut b, "conv", c, out, 3, 1),
            alpha: b.add("alpha", Tensor::full(&[out], 1.0)),
            beta: b.add("beta", Tensor::zeros(&[out])),
            gamma: b.add("gamma", Tensor::zeros(&[out])),
            transition: Conv::new(&mut b, "transition", prev, out, 1, 1),
        }
    }

    pub fn bind(&self, s: &mut Session) -> FusionVars {
        FusionVars {
            w_p: s.param(self.w_p),
            w_c: s.param(self.w_c),
            conv_w: s.param(self.conv.weight),
            conv_b: self.conv.bias.map(|b| s.param(b)),
            alpha: s.param(self.alpha),
            beta: s.param(self.beta),
            gamma: s.param(self.gamma),
        }
    }
}

/// Graph handles of one decoder pass.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Full-resolution `[1, H, W]` disparities, finest first.
    pub disparities: Vec<Var>,
    /// `(A^p_l, A^c_l)` token-major, for `l = 1..L`.
    pub attention: Vec<(Var, Var)>,
    /// Fused stage outputs `X_{L-1} .. X_0`.
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FeatureFusionDecoder {
    pub config: DecoderConfig,
    grid: (usize, usize),
    image_size: (usize, usize),
    pub acm: Vec<AcmBlock>,
    /// Residual conv on the last transformer output, giving `X_L`.
    pub seed: ResidualUnit,
    pub stages: Vec<FfdStage>,
    /// Heads for the last `num_scales` stages, coarsest first.
    pub heads: Vec<Conv>,
}

impl FeatureFusionDecoder {
    pub fn new(b: &mut Builder, enc: &EncoderConfig, cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = b.scope("decoder");
        let c = enc.embed_dim;
        let l_count = enc.num_layers;
        let acm = (0..l_count)
            .map(|l| AcmBlock::new(&mut b, &alloc::format!("acm{l}"), c))
            .collect();
        let seed = ResidualUnit::new(&mut b, "seed", c);
        let mut stages = Vec::with_capacity(l_count);
        let mut prev = c;
        for l in 0..l_count {
            let out = cfg.stage_channels(l);
            stages.push(FfdStage::new(&mut b, &alloc::format!("stage{l}"), c, prev, out));
            prev = out;
        }
        let scales = cfg.num_scales.min(l_count);
        let heads = (l_count - scales..l_count)
            .map(|l| Conv::new(&mut b, &alloc::format!("head{l}"), cfg.stage_channels(l), 1, 3, 1))
            .collect();
        Ok(Self {
            config: cfg.clone(),
            grid: enc.token_grid(),
            image_size: enc.image_size,
            acm,
            seed,
            stages,
            heads,
        })
    }

    /// Spatial size of decoder stage `l` (0-based).
    pub fn stage_size(&self, l: usize) -> (usize, usize) {
        let up = (1usize << l.min(30)).min(MAX_STAGE_UPSCALE);
        (self.grid.0 * up, self.grid.1 * up)
    }

    /// Decodes `Z_1 .. Z_L` (each `[N + 1, C]`).
    pub fn forward(&self, s: &mut Session, tokens: &[Var]) -> Result<DecoderOutput> {
        if tokens.len() != self.stages.len() {
            return Err(Error::shape(
                "decoder",
                alloc::format!("expected {} token sequences, got {}", self.stages.len(), tokens.len()),
            ));
        }
        let stripped: Vec<Var> = tokens.iter().map(|&z| strip_special(s.graph, z)).collect();
        let c = s.graph.shape(stripped[0])[1];
        let (gh, gw) = self.grid;

        let last = stripped[stripped.len() - 1];
        let grid = s.graph.transpose(last);
        let grid = s.graph.reshape(grid, &[c, gh, gw]);
        let mut x = self.seed.forward(s, grid);

        let mut attention = Vec::with_capacity(stripped.len());
        let mut stages = Vec::with_capacity(stripped.len());
        for (l, (stage, &z)) in self.stages.iter().zip(&stripped).enumerate() {
            let (ap, ac) = self.acm[l].forward(s, z);
            attention.push((ap, ac));
            let (h, w) = self.stage_size(l);
            let resized = s.graph.resize_bilinear(x, h, w);
            let skip = stage.transition.forward(s, resized);
            let skip = s.graph.elu(skip);
            let vars = stage.bind(s);
            x = ffd_fuse(s.graph, z, ap, ac, self.grid, skip, &vars)?;
            stages.push(x);
        }

        let first_head = stages.len() - self.heads.len();
        let mut disparities = Vec::with_capacity(self.heads.len());
        for (head, &x) in self.heads.iter().zip(&stages[first_head..]) {
            let w = s.param(head.weight);
            let b = head.bias.map(|b| s.param(b));
            disparities.push(predict_disparity(s.graph, x, w, b, self.image_size));
        }
        disparities.reverse();
        Ok(DecoderOutput {
            disparities,
            attention,
            stages,
        })
    }
}

/// Closed-form depth for one disparity value, for callers without a graph.
pub fn depth_from_disparity(disp: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    let (a, b) = depth_coefficients(min_depth, max_depth)?;
    Ok(1.0 / (a * disp + b))
}

/// Inverse of [`depth_from_disparity`].
pub fn disparity_from_depth(depth: f64, min_depth: f64, max_depth: f64) -> Result<f64> {
    let (a, b) = depth_coefficients(min_depth, max_depth)?;
    Ok((1.0 / depth - b) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{check_gradient, DEFAULT_EPS};
    use crate::params::{Init, ParamGroup, ParamStore};

    fn random(shape: &[usize], seed: u64, std: f64) -> Tensor {
        Init::new(seed).trunc_normal(shape, std)
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn at(t: &Tensor, r: usize, c: usize) -> f64 {
        t.data()[r * t.shape()[1] + c]
    }

    #[test]
    fn position_attention_loop_oracle() {
        let (n, c, dq) = (4, 3, 2);
        let z = random(&[n, c], 1, 1.0);
        let (wq, wk, wv) = (random(&[c, dq], 2, 1.0), random(&[c, dq], 3, 1.0), random(&[c, c], 4, 1.0));
        let (bq, bk, bv) = (random(&[dq], 5, 1.0), random(&[dq], 6, 1.0), random(&[c], 7, 1.0));
        let mut g = Graph::new();
        let vars: Vec<Var> = [&z, &wq, &wk, &wv, &bq, &bk, &bv].iter().map(|t| g.constant((*t).clone())).collect();
        let out = position_attention(&mut g, vars[0], (vars[1], Some(vars[4])), (vars[2], Some(vars[5])), (vars[3], Some(vars[6])));
        let proj = |w: &Tensor, b: &Tensor, i: usize, j: usize| {
            b.data()[j] + (0..c).map(|k| at(&z, i, k) * at(w, k, j)).sum::<f64>()
        };
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dq).map(|e| proj(&wq, &bq, i, e) * proj(&wk, &bk, j, e)).sum())
                .collect();
            let a = softmax(&logits);
            for ch in 0..c {
                let expect: f64 = (0..n).map(|j| a[j] * proj(&wv, &bv, j, ch)).sum();
                assert!((at(g.value(out), i, ch) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn position_attention_uniform_and_single() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[3, 2], vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap());
        let w = g.constant(random(&[2, 2], 8, 1.0));
        let out = position_attention(&mut g, z, (w, None), (w, None), (w, None));
        let v = g.matmul(z, w);
        for (a, b) in g.value(out).data().iter().zip(g.value(v).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let z1 = g.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let out = position_attention(&mut g, z1, (w, None), (w, None), (w, None));
        let v = g.matmul(z1, w);
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn channel_attention_cases() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[5, 3]));
        let out = channel_attention(&mut g, z);
        assert_eq!(g.shape(out), [5, 3]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        // Two channels over two tokens, only channel 0 nonzero (values 1, 2):
        // gram = [[5, 0], [0, 0]], softmax rows = [[e^5, 1] / (e^5 + 1), [0.5, 0.5]].
        let z = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]).unwrap());
        let zc = g.transpose(z);
        let gram = g.matmul(zc, z);
        let s = g.softmax_rows(gram);
        let p = 5f64.exp() / (5f64.exp() + 1.0);
        assert!((at(g.value(s), 0, 0) - p).abs() < 1e-15);
        assert!(at(g.value(s), 0, 0) > at(g.value(s), 0, 1));
        let out = channel_attention(&mut g, z);
        // Channel 0 output = p * z_0 (+ (1 - p) * z_1 = 0); channel 1 = 0.5 * z_0.
        let o = g.value(out);
        assert!((at(o, 0, 0) - p).abs() < 1e-15 && (at(o, 1, 0) - 2.0 * p).abs() < 1e-15);
        assert!((at(o, 0, 1) - 0.5).abs() < 1e-15 && (at(o, 1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn channel_attention_loop_oracle() {
        let (n, c) = (4, 3);
        let z = random(&[n, c], 9, 0.7);
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let out = channel_attention(&mut g, v);
        for a in 0..c {
            let row: Vec<f64> = (0..c).map(|b| (0..n).map(|i| at(&z, i, a) * at(&z, i, b)).sum()).collect();
            let s = softmax(&row);
            for i in 0..n {
                let expect: f64 = (0..c).map(|b| s[b] * at(&z, i, b)).sum();
                assert!((at(g.value(out), i, a) - expect).abs() < 1e-12);
            }
        }
    }

    struct FuseInputs {
        z: Tensor,
        ap: Tensor,
        ac: Tensor,
        skip: Tensor,
        params: [Tensor; 7],
    }

    fn fuse_inputs(seed: u64, grid: (usize, usize), c: usize, out: usize, skip_hw: (usize, usize)) -> FuseInputs {
        let n = grid.0 * grid.1;
        FuseInputs {
            z: random(&[n, c], seed, 1.0),
            ap: random(&[n, c], seed + 1, 1.0),
            ac: random(&[n, c], seed + 2, 1.0),
            skip: random(&[out, skip_hw.0, skip_hw.1], seed + 3, 1.0),
            params: [
                Tensor::scalar(0.7),
                Tensor::scalar(-0.4),
                random(&[out, c, 3, 3], seed + 4, 0.5),
                random(&[out], seed + 5, 0.5),
                random(&[out], seed + 6, 1.0),
                random(&[out], seed + 7, 1.0),
                random(&[out], seed + 8, 1.0),
            ],
        }
    }

    fn run_fuse(g: &mut Graph, v: &[Var], grid: (usize, usize)) -> Var {
        let p = FusionVars {
            w_p: v[4],
            w_c: v[5],
            conv_w: v[6],
            conv_b: Some(v[7]),
            alpha: v[8],
            beta: v[9],
            gamma: v[10],
        };
        ffd_fuse(g, v[0], v[1], v[2], grid, v[3], &p).unwrap()
    }

    fn fuse_tensors(i: &FuseInputs) -> Vec<Tensor> {
        let mut v = vec![i.z.clone(), i.ap.clone(), i.ac.clone(), i.skip.clone()];
        v.extend(i.params.iter().cloned());
        v
    }

    fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let coord = |o: usize, n: usize, on: usize| ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = (coord(oy, h, oh), coord(ox, w, ow));
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                out[oy * ow + ox] = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + src[y0 * w + x1] * (1.0 - fy) * fx
                    + src[y1 * w + x0] * fy * (1.0 - fx)
                    + src[y1 * w + x1] * fy * fx;
            }
        }
        out
    }

    /// Straight-line evaluation of the fusion formula.
    fn fuse_oracle(i: &FuseInputs, grid: (usize, usize)) -> Vec<f64> {
        let (gh, gw) = grid;
        let c = i.z.shape()[1];
        let [w_p, w_c, conv_w, conv_b, alpha, beta, gamma] = &i.params;
        let (wp, wc) = (w_p.data()[0], w_c.data()[0]);
        let out_c = conv_w.shape()[0];
        let fused = |ch: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= gh as isize || x >= gw as isize {
                return 0.0;
            }
            let n = y as usize * gw + x as usize;
            wp * at(&i.ap, n, ch) + wc * at(&i.ac, n, ch) + at(&i.z, n, ch)
        };
        let (sh, sw) = (i.skip.shape()[1], i.skip.shape()[2]);
        let mut x_hat = Vec::new();
        for o in 0..out_c {
            let mut conv = vec![0.0; gh * gw];
            for y in 0..gh {
                for x in 0..gw {
                    let mut acc = conv_b.data()[o];
                    for ch in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let w = conv_w.data()[((o * c + ch) * 3 + ky) * 3 + kx];
                                acc += w * fused(ch, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            }
                        }
                    }
                    conv[y * gw + x] = acc;
                }
            }
            let up = if (gh, gw) == (sh, sw) { conv } else { bilinear_oracle(&conv, gh, gw, sh, sw) };
            for (k, u) in up.iter().enumerate() {
                x_hat.push(u + i.skip.data()[o * sh * sw + k]);
            }
        }
        let hw = sh * sw;
        let s: Vec<f64> = (0..out_c)
            .map(|o| {
                let norm = (x_hat[o * hw..(o + 1) * hw].iter().map(|v| v * v).sum::<f64>() + CHANNEL_NORM_EPS).sqrt();
                alpha.data()[o] * norm + beta.data()[o]
            })
            .collect();
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / out_c as f64 + CHANNEL_NORM_EPS).sqrt();
        let mut out = x_hat;
        for o in 0..out_c {
            let gate = 1.0 + (gamma.data()[o] * s[o] / rms).tanh();
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v *= gate);
        }
        out
    }

    #[test]
    fn ffd_fuse_matches_straight_line_oracle() {
        for (seed, skip_hw) in [(10, (2, 3)), (20, (4, 6)), (30, (5, 7))] {
            let inputs = fuse_inputs(seed, (2, 3), 3, 2, skip_hw);
            let mut g = Graph::new();
            let vars: Vec<Var> = fuse_tensors(&inputs).into_iter().map(|t| g.constant(t)).collect();
            let out = run_fuse(&mut g, &vars, (2, 3));
            let expect = fuse_oracle(&inputs, (2, 3));
            for (a, b) in g.value(out).data().iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ffd_fuse_identity_configuration() {
        let mut inputs = fuse_inputs(40, (2, 2), 3, 2, (4, 4));
        inputs.params[0] = Tensor::scalar(0.0);
        inputs.params[1] = Tensor::scalar(0.0);
        inputs.params[2] = Tensor::zeros(&[2, 3, 3, 3]);
        inputs.params[3] = Tensor::zeros(&[2]);
        inputs.params[6] = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let vars: Vec<Var> = fuse_tensors(&inputs).into_iter().map(|t| g.constant(t)).collect();
        let out = run_fuse(&mut g, &vars, (2, 2));
        assert_eq!(g.value(out), &inputs.skip);
    }

    #[test]
    fn zero_gamma_gate_is_one() {
        let mut inputs = fuse_inputs(50, (2, 2), 3, 2, (2, 2));
        inputs.params[6] = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let vars: Vec<Var> = fuse_tensors(&inputs).into_iter().map(|t| g.constant(t)).collect();
        let out = run_fuse(&mut g, &vars, (2, 2));
        let mut plain = inputs;
        plain.params[4] = Tensor::zeros(&[2]);
        let expect = fuse_oracle(&plain, (2, 2));
        for (a, b) in g.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ffd_fuse_gradients() {
        let inputs = fuse_inputs(60, (2, 2), 3, 2, (4, 4));
        let r = check_gradient(&fuse_tensors(&inputs), |g, v| run_fuse(g, v, (2, 2)), DEFAULT_EPS, 30);
        assert!(r.rel_error < 1e-6, "{}", r.rel_error);
    }

    #[test]
    fn ffd_fuse_rejects_bad_shapes() {
        let inputs = fuse_inputs(70, (2, 2), 3, 2, (4, 4));
        let mut g = Graph::new();
        let mut vars: Vec<Var> = fuse_tensors(&inputs).into_iter().map(|t| g.constant(t)).collect();
        vars[3] = g.constant(Tensor::zeros(&[3, 4, 4]));
        let p = FusionVars { w_p: vars[4], w_c: vars[5], conv_w: vars[6], conv_b: Some(vars[7]), alpha: vars[8], beta: vars[9], gamma: vars[10] };
        assert!(ffd_fuse(&mut g, vars[0], vars[1], vars[2], (2, 2), vars[3], &p).is_err());
        assert!(ffd_fuse(&mut g, vars[0], vars[1], vars[2], (1, 3), vars[3], &p).is_err());
    }

    #[test]
    fn disparity_head_and_depth_law() {
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 3, 3], 80, 1.0));
        let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let d = predict_disparity(&mut g, x, w, None, (6, 6));
        assert_eq!(g.shape(d), [1, 6, 6]);
        assert!(g.value(d).data().iter().all(|&v| v == 0.5));
        let depth = disparity_to_depth(&mut g, d, 0.1, 100.0).unwrap();
        let expect = 1.0 / (0.5 * (1.0 / 0.1 - 1.0 / 100.0) + 1.0 / 100.0);
        assert!((g.value(depth).data()[0] - expect).abs() < 1e-15);
        assert!((expect - 1.0 / 5.005).abs() < 1e-15 && (expect - 0.1998).abs() < 1e-4);
        assert!((depth_from_disparity(1.0, 0.1, 100.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((depth_from_disparity(0.0, 0.1, 100.0).unwrap() - 100.0).abs() < 1e-9);
        assert!(disparity_to_depth(&mut g, d, 0.0, 100.0).is_err());
        assert!(disparity_to_depth(&mut g, d, -1.0, 100.0).is_err());
        let back = disparity_from_depth(expect, 0.1, 100.0).unwrap();
        assert!((back - 0.5).abs() < 1e-12);
    }

    #[test]
    fn decoder_shapes_and_scales() {
        let enc = EncoderConfig {
            num_layers: 3,
            num_heads: 1,
            head_dim: 4,
            embed_dim: 8,
            patch_size: 2,
            stem_channels: vec![4],
            image_size: (8, 12),
            mlp_ratio: 1,
        };
        let cfg = DecoderConfig { channels: vec![6, 4], num_scales: 4 };
        let mut store = ParamStore::new();
        let mut init = Init::new(90);
        let dec = FeatureFusionDecoder::new(&mut Builder::new(&mut store, &mut init, ParamGroup::Depth), &enc, &cfg).unwrap();
        assert_eq!(dec.heads.len(), 3);
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &store, false);
        let tokens: Vec<Var> = (0..3).map(|l| s.graph.constant(random(&[7, 8], 91 + l, 1.0))).collect();
        let out = dec.forward(&mut s, &tokens).unwrap();
        assert_eq!(out.disparities.len(), 3);
        assert_eq!(out.attention.len(), 3);
        let sizes: Vec<Vec<usize>> = out.stages.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(sizes, [vec![6, 2, 3], vec![4, 4, 6], vec![4, 8, 12]]);
        for &d in &out.disparities {
            assert_eq!(g.shape(d), [1, 8, 12]);
            assert!(g.value(d).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        for &(ap, ac) in &out.attention {
            assert_eq!(g.shape(ap), [6, 8]);
            assert_eq!(g.shape(ac), [6, 8]);
        }
    }
}
