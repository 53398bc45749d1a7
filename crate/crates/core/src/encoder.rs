//! Siamese hierarchical encoder with difference weighting after every stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::csdw::{Csdw, CsdwConfig, CsdwWeightVars};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, RefineBlock, RefineKind};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Total downsampling of the coarsest level.
pub const INPUT_MULTIPLE: usize = 32;
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel width of each of the 4 stages; strictly increasing.
    pub widths: [usize; LEVELS],
    pub blocks_per_stage: usize,
    /// Stride of the stem conv, 1 or 2. With 2 the levels sit at strides 4, 8, 16, 32;
    /// with 1 at 2, 4, 8, 16, for inputs too small to spare the extra halving.
    pub stem_stride: usize,
    pub refine: RefineKind,
    /// Apply difference weighting after each stage.
    pub csdw_per_level: bool,
    /// Which stages get difference weighting when `csdw_per_level` is set (finest first).
    pub csdw_levels: [bool; LEVELS],
    /// One backbone for both images.
    pub shared_weights: bool,
    pub csdw: CsdwConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: [32, 64, 128, 256],
            blocks_per_stage: 2,
            stem_stride: 2,
            refine: RefineKind::Conv,
            csdw_per_level: true,
            csdw_levels: [true; LEVELS],
            shared_weights: true,
            csdw: CsdwConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "encoder widths must be positive and strictly increasing, got {:?}",
                self.widths
            )));
        }
        if !matches!(self.stem_stride, 1 | 2) {
            return Err(Error::Config(format!("stem_stride must be 1 or 2, got {}", self.stem_stride)));
        }
        Ok(())
    }

    /// Input pixels per cell of the finest level.
    pub fn finest_stride(&self) -> usize {
        2 * self.stem_stride
    }

    pub fn csdw_at(&self, level: usize) -> bool {
        self.csdw_per_level && self.csdw_levels[level]
    }
}

/// Four levels per temporal stream, index 0 the finest (stride 4 by default).
#[derive(Debug, Clone, Copy)]
pub struct PyramidPair {
    pub a: [Var; LEVELS],
    pub b: [Var; LEVELS],
}

impl PyramidPair {
    pub fn swapped(self) -> Self {
        PyramidPair { a: self.b, b: self.a }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    blocks: Vec<RefineBlock>,
}

#[derive(Debug, Clone)]
struct Backbone {
    stem: Conv2d,
    stages: Vec<Stage>,
}

impl Backbone {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let stem = Conv2d::new(init, &format!("{name}.stem"), 3, cfg.widths[0], 3, cfg.stem_stride, true, 1.0);
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = cfg.widths[0];
        for (k, &width) in cfg.widths.iter().enumerate() {
            let down = Conv2d::new(init, &format!("{name}.stage{k}.down"), cin, width, 3, 2, true, 1.0);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| RefineBlock::new(init, &format!("{name}.stage{k}.block{j}"), width, cfg.refine, false))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, blocks });
            cin = width;
        }
        Ok(Backbone { stem, stages })
    }

    fn stem<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(g, store, x)?;
        Ok(g.relu(h))
    }

    fn stage<T: Scalar>(&self, k: usize, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let st = &self.stages[k];
        let h = st.down.forward(g, store, x)?;
        let mut h = g.relu(h);
        for block in &st.blocks {
            h = block.forward(g, store, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    branch_a: Backbone,
    branch_b: Option<Backbone>,
    csdw: Vec<Option<Csdw>>,
}

/// Encoder outputs plus the per-level weights, kept for similarity analysis.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub pyramid: PyramidPair,
    /// Stage outputs before difference weighting.
    pub raw: PyramidPair,
    pub weights: [Option<CsdwWeightVars>; LEVELS],
}

impl Encoder {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (branch_a, branch_b) = if config.shared_weights {
            (Backbone::new(init, name, config)?, None)
        } else {
            (
                Backbone::new(init, &format!("{name}.a"), config)?,
                Some(Backbone::new(init, &format!("{name}.b"), config)?),
            )
        };
        let csdw = (0..LEVELS)
            .map(|k| {
                config
                    .csdw_at(k)
                    .then(|| Csdw::new(init, &format!("{name}.csdw{k}"), config.widths[k], &config.csdw))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { config: config.clone(), branch_a, branch_b, csdw })
    }

    /// Backbone features of both images with every difference-weighting module bypassed.
    pub fn backbone_pair<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img_a: Var,
        img_b: Var,
    ) -> Result<PyramidPair> {
        let plain = Encoder { csdw: vec![None; LEVELS], ..self.clone() };
        Ok(plain.encode_pair(g, store, img_a, img_b)?.pyramid)
    }

    /// Run both images through the backbone; after stage `k` the pair is difference-weighted
    /// (when enabled) and the weighted features both feed stage `k + 1` and become level `k`.
    pub fn encode_pair<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        img_a: Var,
        img_b: Var,
    ) -> Result<EncodedPair> {
        let (sa, sb) = (g.shape(img_a), g.shape(img_b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "encode_pair", left: sa, right: sb });
        }
        if sa.c() != 3 {
            return Err(Error::InvalidArgument(format!("expected 3-channel images, got {sa}")));
        }
        for size in [sa.h(), sa.w()] {
            if size % INPUT_MULTIPLE != 0 {
                return Err(Error::Indivisible { size, multiple: INPUT_MULTIPLE });
            }
        }
        let bb = self.branch_b.as_ref().unwrap_or(&self.branch_a);
        let mut xa = self.branch_a.stem(g, store, img_a)?;
        let mut xb = bb.stem(g, store, img_b)?;
        let mut levels_a = [xa; LEVELS];
        let mut levels_b = [xb; LEVELS];
        let mut raw_a = [xa; LEVELS];
        let mut raw_b = [xb; LEVELS];
        let mut weights = [None; LEVELS];
        for k in 0..LEVELS {
            xa = self.branch_a.stage(k, g, store, xa)?;
            xb = bb.stage(k, g, store, xb)?;
            raw_a[k] = xa;
            raw_b[k] = xb;
            if let Some(csdw) = &self.csdw[k] {
                let out = csdw.forward(g, store, xa, xb)?;
                xa = out.a;
                xb = out.b;
                weights[k] = Some(out.weights);
            }
            levels_a[k] = xa;
            levels_b[k] = xb;
        }
        Ok(EncodedPair {
            pyramid: PyramidPair { a: levels_a, b: levels_b },
            raw: PyramidPair { a: raw_a, b: raw_b },
            weights,
        })
    }
}
