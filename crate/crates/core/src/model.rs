//! Full change detector: Siamese encoder, cross-temporal pyramid, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_channels_data, Graph, Var};
use crate::encoder::{EncodedPair, Encoder, EncoderConfig, PyramidPair};
use crate::error::{Error, Result};
use crate::fpn::{Fpn, FpnConfig};
use crate::led::{total_loss, DecodeOutput, Led, LedConfig, LossVars, UpsampleDecoder, DEFAULT_AUX_WEIGHT};
use crate::nn::Init;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fpn: FpnConfig,
    pub led: LedConfig,
    /// Difference weighting in the encoder. Off gives a plain Siamese encoder.
    pub csdw_enabled: bool,
    /// Layer-exchange decoder. Off selects the layer-by-layer upsampling decoder.
    pub led_enabled: bool,
    pub aux_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            fpn: FpnConfig::default(),
            led: LedConfig::default(),
            csdw_enabled: true,
            led_enabled: true,
            aux_weight: DEFAULT_AUX_WEIGHT,
        }
    }
}

impl ModelConfig {
    /// Small widths for CPU-scale experiments on 64-pixel inputs. The stem keeps full
    /// resolution so the finest level sits at stride 2.
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                widths: [24, 32, 48, 64],
                blocks_per_stage: 1,
                stem_stride: 1,
                ..Default::default()
            },
            fpn: FpnConfig { width: 48, ..Default::default() },
            ..Default::default()
        }
    }

    /// Tiny widths for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig { widths: [4, 8, 12, 16], blocks_per_stage: 1, ..Default::default() },
            fpn: FpnConfig { width: 8, ..Default::default() },
            ..Default::default()
        }
    }

    fn effective_encoder(&self) -> EncoderConfig {
        EncoderConfig { csdw_per_level: self.encoder.csdw_per_level && self.csdw_enabled, ..self.encoder.clone() }
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Led(Led),
    Upsample(UpsampleDecoder),
}

impl Decoder {
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyr: &PyramidPair) -> Result<DecodeOutput> {
        match self {
            Decoder::Led(led) => led.decode(g, store, pyr),
            Decoder::Upsample(dec) => dec.decode(g, store, pyr),
        }
    }
}

/// Architecture: which parameters exist and how they are wired.
#[derive(Debug, Clone)]
pub struct ChangeDetector {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fpn: Fpn,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: EncodedPair,
    pub pyramid: PyramidPair,
    pub decoded: DecodeOutput,
}

impl ChangeDetector {
    pub fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        if !(config.aux_weight >= 0.0 && config.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight must be finite and >= 0, got {}", config.aux_weight)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store, rng: &mut rng };
        let encoder = Encoder::new(&mut init, "encoder", &config.effective_encoder())?;
        let fpn = Fpn::new(&mut init, "fpn", &config.encoder.widths, &config.fpn);
        let decoder = if config.led_enabled {
            Decoder::Led(Led::new(&mut init, "led", config.fpn.width, config.encoder.finest_stride(), &config.led)?)
        } else {
            Decoder::Upsample(UpsampleDecoder::new(&mut init, "decoder", config.fpn.width, config.encoder.finest_stride()))
        };
        Ok(ChangeDetector { config: config.clone(), encoder, fpn, decoder })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, img_a: Var, img_b: Var) -> Result<ForwardOutput> {
        let img_a = g.affine(img_a, T::lit(4.0), T::lit(-2.0));
        let img_b = g.affine(img_b, T::lit(4.0), T::lit(-2.0));
        let encoded = self.encoder.encode_pair(g, store, img_a, img_b)?;
        let pyramid = self.fpn.forward(g, store, &encoded.pyramid)?;
        let decoded = self.decoder.decode(g, store, &pyramid)?;
        Ok(ForwardOutput { encoded, pyramid, decoded })
    }

    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, out: &DecodeOutput, target: &[u8]) -> Result<LossVars> {
        total_loss(g, out, target, self.config.aux_weight)
    }
}

/// Architecture plus parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub arch: ChangeDetector,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = ChangeDetector::build(config, &mut params, seed)?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Main logits `(N, 2, H, W)` for a batch of image pairs.
    pub fn logits(&self, img_a: &Tensor<T>, img_b: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let a = g.constant(img_a.clone());
        let b = g.constant(img_b.clone());
        let out = self.arch.forward(&mut g, &self.params, a, b)?;
        Ok(g.value(out.decoded.main).clone())
    }

    /// Class probabilities `(N, 2, H, W)`.
    pub fn probabilities(&self, img_a: &Tensor<T>, img_b: &Tensor<T>) -> Result<Tensor<T>> {
        let logits = self.logits(img_a, img_b)?;
        Tensor::new(logits.shape(), softmax_channels_data(logits.data(), logits.shape()))
    }

    /// Same architecture, parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn output_shapes() {
        let model = Model::<f32>::new(&ModelConfig::desk(), 0).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(Shape::new(1, 3, 64, 64), 0.3));
        let b = g.constant(Tensor::full(Shape::new(1, 3, 64, 64), 0.6));
        let out = model.arch.forward(&mut g, &model.params, a, b).unwrap();
        assert_eq!(g.shape(out.decoded.main), Shape::new(1, 2, 64, 64));
        let aux: Vec<_> = out.decoded.aux.iter().map(|&v| g.shape(v)).collect();
        assert_eq!(aux, [Shape::new(1, 2, 8, 8), Shape::new(1, 2, 16, 16), Shape::new(1, 2, 32, 32)]);
        for k in 0..4 {
            assert_eq!(g.shape(out.pyramid.a[k]).c(), 48);
        }
    }

    #[test]
    fn baseline_has_same_heads() {
        let cfg = ModelConfig { csdw_enabled: false, led_enabled: false, ..ModelConfig::desk() };
        let model = Model::<f32>::new(&cfg, 0).unwrap();
        assert!(model.params.iter().all(|(_, n, _)| !n.contains("csdw")));
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(Shape::new(1, 3, 32, 32), 0.3));
        let out = model.arch.forward(&mut g, &model.params, a, a).unwrap();
        assert_eq!(g.shape(out.decoded.main), Shape::new(1, 2, 32, 32));
        assert_eq!(out.decoded.aux.len(), 3);
    }

    #[test]
    fn deterministic_forward() {
        let model = Model::<f32>::new(&ModelConfig::tiny(), 7).unwrap();
        let a = Tensor::from_fn(Shape::new(1, 3, 32, 32), |[_, c, h, w]| ((c + h * w) % 7) as f32 / 7.0);
        let b = a.map(|v| 1.0 - v);
        assert_eq!(model.logits(&a, &b).unwrap(), model.logits(&a, &b).unwrap());
    }
}
