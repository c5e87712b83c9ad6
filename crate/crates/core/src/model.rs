//! The trainable head: fusion followed by the per-cell decoder.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneSpec, FeaturePyramid};
use crate::decoder::{
    decode, decode_backward, decode_train, init_decoder_params, to_pixel_probabilities,
    DecoderCache, DecoderConfig, DecoderParams, LogitsGrid, ProbabilityMap,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, fuse_backward, fuse_with_cache, init_fusion_params, FusionCache, FusionConfig,
    FusionParams,
};
use crate::image::ImagePlane;
use crate::params::NamedParams;

/// Parameter count of a base-size (ViT-B/16) encoder.
pub const BASE_BACKBONE_PARAMS: usize = 86_000_000;

/// Head parameters must stay below this fraction of [`BASE_BACKBONE_PARAMS`].
pub const LIGHTWEIGHT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub fusion_cfg: FusionConfig,
    pub decoder_cfg: DecoderConfig,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

/// Gradients with the same layout as [`SegmentationModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
}

impl NamedParams for ModelGrads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32])) {
        self.fusion.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        self.fusion.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

impl NamedParams for SegmentationModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a [f32])) {
        self.fusion.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Vec<f32>)) {
        self.fusion.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Forward intermediates for one image.
pub struct Tape {
    fusion: FusionCache,
    decoder: DecoderCache,
}

impl SegmentationModel {
    /// Seeds the fusion weights with `fusion_cfg.init_seed` and the decoder
    /// with the following seed.
    pub fn new(spec: &BackboneSpec, fusion_cfg: FusionConfig, decoder_cfg: DecoderConfig) -> Result<Self> {
        let fusion = init_fusion_params(&fusion_cfg, spec, fusion_cfg.init_seed)?;
        let decoder = init_decoder_params(
            &decoder_cfg,
            fusion_cfg.fused_channels(spec.tap_layers.len()),
            fusion_cfg.init_seed.wrapping_add(1),
        )?;
        Self::from_parts(fusion_cfg, decoder_cfg, fusion, decoder)
    }

    pub fn from_parts(
        fusion_cfg: FusionConfig,
        decoder_cfg: DecoderConfig,
        fusion: FusionParams,
        decoder: DecoderParams,
    ) -> Result<Self> {
        decoder_cfg.validate()?;
        let fused_channels = fusion_cfg.fused_channels(fusion.levels.len());
        if decoder.in_channels() != fused_channels {
            return Err(Error::Contract(format!(
                "decoder takes {} channels but fusion produces {fused_channels}",
                decoder.in_channels()
            )));
        }
        if decoder.num_classes() != decoder_cfg.num_classes
            || decoder.layers.len() != decoder_cfg.hidden_sizes.len() + 1
        {
            return Err(Error::Contract("decoder weights do not match its config".into()));
        }
        let model = Self {
            fusion_cfg,
            decoder_cfg,
            fusion,
            decoder,
        };
        model.check_lightweight()?;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.decoder_cfg.num_classes
    }

    pub fn check_lightweight(&self) -> Result<()> {
        let n = self.param_count();
        let limit = (BASE_BACKBONE_PARAMS as f64 * LIGHTWEIGHT_FRACTION) as usize;
        if n >= limit {
            return Err(Error::Config(format!(
                "fusion + decoder hold {n} parameters; the head must stay under {limit} \
                 (1% of a {BASE_BACKBONE_PARAMS}-parameter base encoder)"
            )));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            fusion: self.fusion.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Changes the class count, re-initializing only the output layer.
    pub fn set_num_classes(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let cfg = DecoderConfig {
            num_classes,
            ..self.decoder_cfg.clone()
        };
        cfg.validate()?;
        self.decoder.reset_output_layer(num_classes, seed);
        self.decoder_cfg = cfg;
        Ok(())
    }

    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<LogitsGrid> {
        let fused = fuse(pyramid, &self.fusion_cfg, &self.fusion)?;
        decode(&fused, &self.decoder, &self.decoder_cfg)
    }

    pub fn forward_train(&self, pyramid: &FeaturePyramid, rng: &mut ChaCha8Rng) -> Result<(LogitsGrid, Tape)> {
        let (fused, fusion) = fuse_with_cache(pyramid, &self.fusion_cfg, &self.fusion)?;
        let (logits, decoder) = decode_train(&fused, &self.decoder, &self.decoder_cfg, rng)?;
        Ok((logits, Tape { fusion, decoder }))
    }

    /// Accumulates `dL/dtheta` for `d_logits = dL/dlogits` into `grads`.
    pub fn backward(&self, pyramid: &FeaturePyramid, tape: &Tape, d_logits: &[f32], grads: &mut ModelGrads) {
        let d_fused = decode_backward(&self.decoder, &tape.decoder, d_logits, &mut grads.decoder);
        fuse_backward(
            pyramid,
            &self.fusion_cfg,
            &self.fusion,
            &tape.fusion,
            &d_fused,
            &mut grads.fusion,
        );
    }

    /// Full single-pass inference on an image already normalized by
    /// [`Backbone::prepare`].
    pub fn predict_prepared(&self, backbone: &Backbone, image: &ImagePlane) -> Result<ProbabilityMap> {
        let pyramid = backbone.encode_prepared(image)?;
        let logits = self.forward(&pyramid)?;
        to_pixel_probabilities(&logits, image.spacing_um)
    }

    pub fn predict(&self, backbone: &Backbone, image: &ImagePlane) -> Result<ProbabilityMap> {
        self.predict_prepared(backbone, &backbone.prepare(image)?)
    }
}
