//! Layer-exchange decoder and the baseline upsampling decoder.
//!
//! Per level, coarsest to finest, the LED runs
//! `layer_exchange → refine → residual cross fusion → channel attention → csdw`.
//! The concatenated pair of each of the three coarser levels feeds an auxiliary head; the
//! finest pair feeds the main head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::csdw::{Csdw, CsdwConfig};
use crate::encoder::{PyramidPair, LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, RefineBlock, RefineKind};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape};

pub const NUM_CLASSES: usize = 2;
pub const DEFAULT_AUX_WEIGHT: f64 = 0.3;
/// Classifier heads start near zero so initial predictions are close to uniform.
const HEAD_GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedConfig {
    pub squeeze_ratio: usize,
    pub refine: RefineKind,
    /// One set of stream parameters shared by both temporal streams.
    pub tied_streams: bool,
    pub csdw: CsdwConfig,
}

impl Default for LedConfig {
    fn default() -> Self {
        LedConfig { squeeze_ratio: 4, refine: RefineKind::Conv, tied_streams: false, csdw: CsdwConfig::default() }
    }
}

/// Squeeze-excite gate `x · sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::InvalidArgument(format!(
                "channel attention: {channels} channels not divisible by squeeze ratio {ratio}"
            )));
        }
        let hidden = channels / ratio;
        Ok(ChannelAttention {
            squeeze: Conv2d::new(init, &format!("{name}.squeeze"), channels, hidden, 1, 1, true, 1.0),
            excite: Conv2d::new(init, &format!("{name}.excite"), hidden, channels, 1, 1, true, 1.0),
        })
    }

    pub fn gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let p = g.global_avg_pool(x);
        let h = self.squeeze.forward(g, store, p)?;
        let h = g.relu(h);
        let h = self.excite.forward(g, store, h)?;
        Ok(g.sigmoid(h))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gate = self.gate(g, store, x)?;
        g.mul(x, gate)
    }
}

/// One stream's worth of level parameters.
#[derive(Debug, Clone)]
pub struct StreamParams {
    pub fuse: Conv2d,
    pub refine: RefineBlock,
    pub cross: Conv2d,
    pub attention: ChannelAttention,
}

impl StreamParams {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, width: usize, cfg: &LedConfig) -> Result<Self> {
        Ok(StreamParams {
            fuse: Conv2d::new(init, &format!("{name}.fuse"), 2 * width, width, 1, 1, true, 1.0),
            refine: RefineBlock::new(init, &format!("{name}.refine"), width, cfg.refine, false)?,
            cross: Conv2d::new(init, &format!("{name}.cross"), width, width, 1, 1, true, 0.5),
            attention: ChannelAttention::new(init, &format!("{name}.attn"), width, cfg.squeeze_ratio)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LedLevelParams {
    pub a: StreamParams,
    pub b: StreamParams,
    pub csdw: Csdw,
    pub width: usize,
}

impl LedLevelParams {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, width: usize, cfg: &LedConfig) -> Result<Self> {
        let (na, nb) = if cfg.tied_streams {
            (format!("{name}.stream"), format!("{name}.stream"))
        } else {
            (format!("{name}.stream_a"), format!("{name}.stream_b"))
        };
        let csdw_cfg = CsdwConfig { tied: cfg.csdw.tied || cfg.tied_streams, ..cfg.csdw.clone() };
        Ok(LedLevelParams {
            a: StreamParams::new(init, &na, width, cfg)?,
            b: StreamParams::new(init, &nb, width, cfg)?,
            csdw: Csdw::new(init, &format!("{name}.csdw"), width, &csdw_cfg)?,
            width,
        })
    }
}

/// Cross-wired fusion: `x_a' = fuse_a([x_a, prev_b])`, `x_b' = fuse_b([x_b, prev_a])`.
/// Identity on both streams when there is no previous level.
pub fn layer_exchange<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &LedLevelParams,
    x_a: Var,
    x_b: Var,
    prev: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let sa = g.shape(x_a);
    for v in [Some(x_b), prev.map(|p| p.0), prev.map(|p| p.1)].into_iter().flatten() {
        if g.shape(v) != sa {
            return Err(Error::ShapeMismatch { op: "layer_exchange", left: sa, right: g.shape(v) });
        }
    }
    let Some((prev_a, prev_b)) = prev else {
        return Ok((x_a, x_b));
    };
    let cat_a = g.concat_channels(x_a, prev_b)?;
    let cat_b = g.concat_channels(x_b, prev_a)?;
    let new_a = params.a.fuse.forward(g, store, cat_a)?;
    let new_b = params.b.fuse.forward(g, store, cat_b)?;
    Ok((new_a, new_b))
}

#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub a: Var,
    pub b: Var,
    /// `concat(a, b)` for supervision.
    pub pair: Var,
}

pub fn led_level<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &LedLevelParams,
    x_a: Var,
    x_b: Var,
    prev: Option<(Var, Var)>,
) -> Result<LevelOutput> {
    let (xa, xb) = layer_exchange(g, store, params, x_a, x_b, prev)?;
    let ra = params.a.refine.forward(g, store, xa)?;
    let rb = params.b.refine.forward(g, store, xb)?;
    let from_b = params.a.cross.forward(g, store, rb)?;
    let from_a = params.b.cross.forward(g, store, ra)?;
    let fa = g.add(ra, from_b)?;
    let fb = g.add(rb, from_a)?;
    let fa = params.a.attention.forward(g, store, fa)?;
    let fb = params.b.attention.forward(g, store, fb)?;
    let out = params.csdw.forward(g, store, fa, fb)?;
    let pair = g.concat_channels(out.a, out.b)?;
    Ok(LevelOutput { a: out.a, b: out.b, pair })
}

/// Main and auxiliary logits.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    /// `(N, 2, H, W)` at input resolution.
    pub main: Var,
    /// Coarsest first; each at twice its level's resolution.
    pub aux: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Led {
    pub config: LedConfig,
    pub levels: Vec<LedLevelParams>,
    pub aux_heads: Vec<Conv2d>,
    pub main_head: Conv2d,
    /// Input pixels per finest-level cell; the main logits are upsampled by this factor.
    pub finest_stride: usize,
}

impl Led {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        width: usize,
        finest_stride: usize,
        cfg: &LedConfig,
    ) -> Result<Self> {
        let levels = (0..LEVELS)
            .map(|k| LedLevelParams::new(init, &format!("{name}.level{k}"), width, cfg))
            .collect::<Result<_>>()?;
        let aux_heads = (1..LEVELS)
            .map(|k| Conv2d::new(init, &format!("{name}.aux_head{k}"), 2 * width, NUM_CLASSES, 1, 1, true, HEAD_GAIN))
            .collect();
        let main_head = Conv2d::new(init, &format!("{name}.main_head"), 2 * width, NUM_CLASSES, 1, 1, true, HEAD_GAIN);
        Ok(Led { config: cfg.clone(), levels, aux_heads, main_head, finest_stride })
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyr: &PyramidPair) -> Result<DecodeOutput> {
        let mut prev: Option<(Var, Var)> = None;
        let mut aux = Vec::with_capacity(LEVELS - 1);
        for k in (0..LEVELS).rev() {
            let out = led_level(g, store, &self.levels[k], pyr.a[k], pyr.b[k], prev)?;
            if k == 0 {
                let logits = self.main_head.forward(g, store, out.pair)?;
                let main = g.upsample_bilinear(logits, self.finest_stride)?;
                return Ok(DecodeOutput { main, aux });
            }
            let logits = self.aux_heads[k - 1].forward(g, store, out.pair)?;
            aux.push(g.upsample_bilinear(logits, 2)?);
            let up_a = g.upsample_bilinear(out.a, 2)?;
            let up_b = g.upsample_bilinear(out.b, 2)?;
            prev = Some((up_a, up_b));
        }
        unreachable!("loop returns at the finest level")
    }
}

/// Per level `y_k = relu(conv3x3([a_k, b_k])) + up2(y_{k+1})`, heads as in the LED.
#[derive(Debug, Clone)]
pub struct UpsampleDecoder {
    pub merge: Vec<Conv2d>,
    pub aux_heads: Vec<Conv2d>,
    pub main_head: Conv2d,
    pub finest_stride: usize,
}

impl UpsampleDecoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, width: usize, finest_stride: usize) -> Self {
        UpsampleDecoder {
            merge: (0..LEVELS)
                .map(|k| Conv2d::new(init, &format!("{name}.merge{k}"), 2 * width, width, 3, 1, true, 1.0))
                .collect(),
            aux_heads: (1..LEVELS)
                .map(|k| Conv2d::new(init, &format!("{name}.aux_head{k}"), width, NUM_CLASSES, 1, 1, true, HEAD_GAIN))
                .collect(),
            main_head: Conv2d::new(init, &format!("{name}.main_head"), width, NUM_CLASSES, 1, 1, true, HEAD_GAIN),
            finest_stride,
        }
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyr: &PyramidPair) -> Result<DecodeOutput> {
        let mut carry: Option<Var> = None;
        let mut aux = Vec::with_capacity(LEVELS - 1);
        for k in (0..LEVELS).rev() {
            let cat = g.concat_channels(pyr.a[k], pyr.b[k])?;
            let m = self.merge[k].forward(g, store, cat)?;
            let mut y = g.relu(m);
            if let Some(c) = carry {
                let up = g.upsample_bilinear(c, 2)?;
                y = g.add(y, up)?;
            }
            if k == 0 {
                let logits = self.main_head.forward(g, store, y)?;
                let main = g.upsample_bilinear(logits, self.finest_stride)?;
                return Ok(DecodeOutput { main, aux });
            }
            let logits = self.aux_heads[k - 1].forward(g, store, y)?;
            aux.push(g.upsample_bilinear(logits, 2)?);
            carry = Some(y);
        }
        unreachable!("loop returns at the finest level")
    }
}

/// Nearest-neighbour downsampling of an `(N, H, W)` label map by an integer factor,
/// sampling the centre pixel of each block.
pub fn downsample_nearest(target: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) || target.len() != n * h * w {
        return Err(Error::InvalidArgument(format!(
            "cannot downsample {n}x{h}x{w} labels by {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let off = factor / 2;
    let mut out = Vec::with_capacity(n * ho * wo);
    for i in 0..n {
        for y in 0..ho {
            for x in 0..wo {
                out.push(target[(i * h + y * factor + off) * w + x * factor + off]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub main: Var,
    pub aux: Vec<Var>,
}

/// `CE(main, target) + aux_weight · Σ CE(aux_l, nearest(target))`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &DecodeOutput,
    target: &[u8],
    aux_weight: f64,
) -> Result<LossVars> {
    let [n, _, h, w] = g.shape(out.main).0;
    let main = g.cross_entropy(out.main, target)?;
    let mut total = main;
    let mut aux = Vec::with_capacity(out.aux.len());
    for &logits in &out.aux {
        let s: Shape = g.shape(logits);
        if h % s.h() != 0 || w % s.w() != 0 || h / s.h() != w / s.w() {
            return Err(Error::InvalidShape(format!("aux logits {s} do not divide input {h}x{w}")));
        }
        let t = downsample_nearest(target, n, h, w, h / s.h())?;
        let ce = g.cross_entropy(logits, &t)?;
        aux.push(ce);
        let weighted = g.scale(ce, T::lit(aux_weight));
        total = g.add(total, weighted)?;
    }
    Ok(LossVars { total, main, aux })
}
