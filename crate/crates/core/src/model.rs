//! The full depth + pose model: encoder, attention/fusion decoder and pose
//! network over one parameter store.

use alloc::vec::Vec;

use crate::acm_ffd::{DecoderConfig, DecoderOutput, DisparityMap, FeatureFusionDecoder, DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH};
use crate::autograd::{Graph, Var};
use crate::camera::Pose6DoF;
use crate::image::{DepthMap, ImageFrame};
use crate::losses::{total_loss, LossConfig, LossTerms};
use crate::networks::{Builder, Encoder, EncoderConfig, EncoderOutput, PoseNet};
use crate::params::{Init, ParamGroup, ParamStore, Session};
use crate::sample::SequenceSample;
use crate::{Error, Result, Tensor};

/// Per-channel input normalization applied before both networks.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.225;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Depth range of the disparity parameterization, meters.
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            min_depth: DEFAULT_MIN_DEPTH,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth && self.max_depth.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "depth range needs 0 < min < max, got ({}, {})",
                self.min_depth,
                self.max_depth
            )));
        }
        Ok(())
    }
}

/// Graph handles of a depth forward pass.
#[derive(Clone, Debug)]
pub struct DepthForward {
    pub encoder: EncoderOutput,
    pub decoder: DecoderOutput,
}

#[derive(Clone, Debug)]
pub struct MonoFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: FeatureFusionDecoder,
    pub pose: PoseNet,
}

impl MonoFormer {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let (encoder, decoder) = {
            let mut b = Builder::new(&mut params, &mut init, ParamGroup::Depth);
            let encoder = Encoder::new(&mut b, &config.encoder)?;
            let decoder = FeatureFusionDecoder::new(&mut b, &config.encoder, &config.decoder)?;
            (encoder, decoder)
        };
        let pose = PoseNet::new(&mut Builder::new(&mut params, &mut init, ParamGroup::Pose));
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            decoder,
            pose,
        })
    }

    /// Rebuilds the model for `config` and installs `values` by name.
    ///
    /// Every parameter of the architecture must be present with the same
    /// shape. Parameters are checked in architecture order and the first
    /// missing or mis-shaped one is reported; leftover names are rejected.
    pub fn from_named(config: &ModelConfig, values: Vec<(alloc::string::String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let mut by_name: alloc::collections::BTreeMap<alloc::string::String, Tensor> = values.into_iter().collect();
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = &model.params.entry(id).name;
            let value = by_name
                .remove(name)
                .ok_or_else(|| Error::ParamMismatch(alloc::format!("missing parameter `{name}`")))?;
            let expect = model.params.get(id).shape();
            if expect != value.shape() {
                return Err(Error::ParamMismatch(alloc::format!(
                    "`{name}` has shape {:?}, config expects {:?}",
                    value.shape(),
                    expect
                )));
            }
            *model.params.get_mut(id) = value;
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::ParamMismatch(alloc::format!("unexpected parameter `{name}`")));
        }
        Ok(model)
    }

    pub fn normalize(image: &Tensor) -> Tensor {
        image.map(|v| (v - INPUT_MEAN) / INPUT_STD)
    }

    fn check_frame(&self, frame: &ImageFrame) -> Result<()> {
        let (h, w) = self.config.encoder.image_size;
        if frame.height() != h || frame.width() != w {
            return Err(Error::shape(
                "model input",
                alloc::format!("frame is {}x{}, model expects {h}x{w}", frame.height(), frame.width()),
            ));
        }
        Ok(())
    }

    /// Encoder + decoder on a normalized `[3, H, W]` input.
    pub fn forward_depth(&self, s: &mut Session, image: Var) -> Result<DepthForward> {
        let encoder = self.encoder.forward(s, image)?;
        let decoder = self.decoder.forward(s, &encoder.layers)?;
        Ok(DepthForward { encoder, decoder })
    }

    /// Self-supervised loss of one sample, built on `s`.
    pub fn sample_loss(&self, s: &mut Session, sample: &SequenceSample, cfg: &LossConfig) -> Result<LossTerms> {
        sample.validate()?;
        self.check_frame(&sample.target)?;
        let target = s.graph.constant(sample.target.tensor().clone());
        let target_in = s.graph.constant(Self::normalize(sample.target.tensor()));
        let depth = self.forward_depth(s, target_in)?;
        let mut sources = Vec::with_capacity(sample.sources.len());
        let mut poses = Vec::with_capacity(sample.sources.len());
        for src in &sample.sources {
            sources.push(s.graph.constant(src.tensor().clone()));
            let src_in = s.graph.constant(Self::normalize(src.tensor()));
            poses.push(self.pose.forward(s, target_in, src_in)?);
        }
        total_loss(
            s.graph,
            target,
            &sources,
            &depth.decoder.disparities,
            &poses,
            &sample.intrinsics,
            (self.config.min_depth, self.config.max_depth),
            cfg,
        )
    }

    /// Finest-scale disparity of one frame.
    pub fn predict_disparity(&self, frame: &ImageFrame) -> Result<DisparityMap> {
        self.check_frame(frame)?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.params, false);
        let x = s.graph.constant(Self::normalize(frame.tensor()));
        let out = self.forward_depth(&mut s, x)?;
        let d = g.value(out.decoder.disparities[0]);
        DisparityMap::new(frame.height(), frame.width(), d.data().to_vec())
    }

    /// Finest-scale depth of one frame, meters (up to the monocular scale).
    pub fn predict_depth(&self, frame: &ImageFrame) -> Result<DepthMap> {
        self.predict_disparity(frame)?.to_depth(self.config.min_depth, self.config.max_depth)
    }

    /// Target-to-source motion.
    pub fn predict_pose(&self, target: &ImageFrame, source: &ImageFrame) -> Result<Pose6DoF> {
        self.check_frame(target)?;
        self.check_frame(source)?;
        let mut g = Graph::new();
        let mut s = Session::new(&mut g, &self.params, false);
        let t = s.graph.constant(Self::normalize(target.tensor()));
        let src = s.graph.constant(Self::normalize(source.tensor()));
        let p = self.pose.forward(&mut s, t, src)?;
        let v = g.value(p).data();
        Ok(Pose6DoF::from_vector([v[0], v[1], v[2], v[3], v[4], v[5]]))
    }

    /// Last-layer encoder tokens `Z_L` (special token included) of one frame.
    pub fn encode(&self, frame: &ImageFrame) -> Result<(Tensor, Vec<crate::networks::TokenSequence>)> {
        self.check_frame(frame)?;
        self.encoder.encode(&self.params, &Self::normalize(frame.tensor()))
    }
}
