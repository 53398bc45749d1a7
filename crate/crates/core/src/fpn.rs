//! Cross-temporal feature pyramid.
//!
//! Each stream gets a lateral 1×1 projection to a common width and a top-down pathway.
//! At exchange levels the top-down input of stream A is stream B's coarser map and vice
//! versa. The default schedule exchanges at levels 2 and 0, alternating from the
//! coarsest merge.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{PyramidPair, LEVELS};
use crate::error::Result;
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub width: usize,
    pub exchange: bool,
    /// Levels (finest first) whose top-down input is taken from the other stream.
    /// Index 3 has no top-down input and is ignored.
    pub exchange_levels: [bool; LEVELS],
    /// Same lateral/output convs for both streams.
    pub tied: bool,
    /// 3×3 output conv on every merged level.
    pub smooth: bool,
}

impl Default for FpnConfig {
    fn default() -> Self {
        FpnConfig {
            width: 128,
            exchange: true,
            exchange_levels: [true, false, true, false],
            tied: true,
            smooth: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FpnBranch {
    lateral: Vec<Conv2d>,
    smooth: Option<Vec<Conv2d>>,
}

impl FpnBranch {
    fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, in_widths: &[usize; LEVELS], cfg: &FpnConfig) -> Self {
        let lateral = (0..LEVELS)
            .map(|k| Conv2d::new(init, &format!("{name}.lateral{k}"), in_widths[k], cfg.width, 1, 1, true, 1.0))
            .collect();
        let smooth = cfg.smooth.then(|| {
            (0..LEVELS)
                .map(|k| Conv2d::new(init, &format!("{name}.smooth{k}"), cfg.width, cfg.width, 3, 1, true, 1.0))
                .collect()
        });
        FpnBranch { lateral, smooth }
    }

    fn output<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, k: usize, p: Var) -> Result<Var> {
        match &self.smooth {
            Some(convs) => convs[k].forward(g, store, p),
            None => Ok(p),
        }
    }

    /// Plain single-stream pyramid.
    pub fn forward_single<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        levels: &[Var; LEVELS],
    ) -> Result<[Var; LEVELS]> {
        let mut merged = [levels[0]; LEVELS];
        merged[LEVELS - 1] = self.lateral[LEVELS - 1].forward(g, store, levels[LEVELS - 1])?;
        for k in (0..LEVELS - 1).rev() {
            let lat = self.lateral[k].forward(g, store, levels[k])?;
            let up = g.upsample_bilinear(merged[k + 1], 2)?;
            merged[k] = g.add(lat, up)?;
        }
        let mut out = merged;
        for k in 0..LEVELS {
            out[k] = self.output(g, store, k, merged[k])?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Fpn {
    pub config: FpnConfig,
    pub branch_a: FpnBranch,
    pub branch_b: FpnBranch,
}

impl Fpn {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        in_widths: &[usize; LEVELS],
        config: &FpnConfig,
    ) -> Self {
        let (na, nb) = if config.tied {
            (name.to_string(), name.to_string())
        } else {
            (format!("{name}.a"), format!("{name}.b"))
        };
        Fpn {
            config: config.clone(),
            branch_a: FpnBranch::new(init, &na, in_widths, config),
            branch_b: FpnBranch::new(init, &nb, in_widths, config),
        }
    }

    fn exchanges_at(&self, k: usize) -> bool {
        self.config.exchange && self.config.exchange_levels[k]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyr: &PyramidPair) -> Result<PyramidPair> {
        let top = LEVELS - 1;
        let mut pa = [pyr.a[0]; LEVELS];
        let mut pb = [pyr.b[0]; LEVELS];
        pa[top] = self.branch_a.lateral[top].forward(g, store, pyr.a[top])?;
        pb[top] = self.branch_b.lateral[top].forward(g, store, pyr.b[top])?;
        for k in (0..top).rev() {
            let (src_a, src_b) = if self.exchanges_at(k) { (pb[k + 1], pa[k + 1]) } else { (pa[k + 1], pb[k + 1]) };
            let lat_a = self.branch_a.lateral[k].forward(g, store, pyr.a[k])?;
            let up_a = g.upsample_bilinear(src_a, 2)?;
            let lat_b = self.branch_b.lateral[k].forward(g, store, pyr.b[k])?;
            let up_b = g.upsample_bilinear(src_b, 2)?;
            pa[k] = g.add(lat_a, up_a)?;
            pb[k] = g.add(lat_b, up_b)?;
        }
        let mut out = PyramidPair { a: pa, b: pb };
        for k in 0..LEVELS {
            out.a[k] = self.branch_a.output(g, store, k, pa[k])?;
            out.b[k] = self.branch_b.output(g, store, k, pb[k])?;
        }
        Ok(out)
    }
}
