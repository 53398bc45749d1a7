//! Channel-spatial difference weighting.
//!
//! Bi-temporal features `f_a`, `f_b` of shape `(N, C, H, W)` are compared two ways:
//!
//! * per pixel, the cosine between the two `C`-vectors at that pixel (`phi_c`, `(N, 1, H, W)`);
//! * per channel, the cosine between the two flattened `H·W` maps (`phi_s`, `(N, C, 1, 1)`).
//!
//! Each similarity becomes a weight `1 - sigmoid(phi)`, the two weights multiply under
//! broadcasting into `w` of shape `(N, C, H, W)`, and each stream is updated residually:
//! `f_i_out = conv_i(w · f_i) + f_i`.
//!
//! Both cosines clamp norms below by [`COSINE_EPS`], so an all-zero feature vector has
//! similarity 0 and weight 0.5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, Init};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsdwConfig {
    /// Kernel of both convs in each residual block.
    pub kernel: usize,
    /// Share one conv block between the two temporal streams.
    pub tied: bool,
    /// Per-pixel channel normalization between the two convs.
    pub norm: bool,
}

impl Default for CsdwConfig {
    fn default() -> Self {
        CsdwConfig { kernel: 3, tied: false, norm: false }
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, fa: Var, fb: Var, op: &'static str) -> Result<Shape> {
    let (sa, sb) = (g.shape(fa), g.shape(fb));
    if sa != sb {
        return Err(Error::ShapeMismatch { op, left: sa, right: sb });
    }
    Ok(sa)
}

/// Per-pixel cosine between channel vectors, shaped `(N, 1, H, W)`.
pub fn channel_similarity_map<T: Scalar>(g: &mut Graph<T>, fa: Var, fb: Var) -> Result<Var> {
    let [n, c, h, w] = check_pair(g, fa, fb, "channel_similarity_map")?.0;
    let rows = Shape::new(n * h * w, c, 1, 1);
    let ra = g.permute_reshape(fa, [0, 2, 3, 1], rows)?;
    let rb = g.permute_reshape(fb, [0, 2, 3, 1], rows)?;
    let cos = g.row_cosine(ra, rb, T::lit(COSINE_EPS))?;
    g.reshape(cos, Shape::new(n, 1, h, w))
}

/// Per-channel cosine between flattened spatial maps, shaped `(N, C, 1, 1)`.
pub fn spatial_similarity_vector<T: Scalar>(g: &mut Graph<T>, fa: Var, fb: Var) -> Result<Var> {
    let [n, c, h, w] = check_pair(g, fa, fb, "spatial_similarity_vector")?.0;
    let rows = Shape::new(n * c, h * w, 1, 1);
    let ra = g.reshape(fa, rows)?;
    let rb = g.reshape(fb, rows)?;
    let cos = g.row_cosine(ra, rb, T::lit(COSINE_EPS))?;
    g.reshape(cos, Shape::new(n, c, 1, 1))
}

/// Graph handles of every intermediate weight.
#[derive(Debug, Clone, Copy)]
pub struct CsdwWeightVars {
    pub phi_c: Var,
    pub phi_s: Var,
    pub w_c: Var,
    pub w_s: Var,
    pub w: Var,
}

/// Materialized weights: `phi_c`/`w_c` are `(N, 1, H, W)`, `phi_s`/`w_s` are `(N, C, 1, 1)`,
/// `w` is `(N, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsdwWeights<T> {
    pub phi_c: Tensor<T>,
    pub phi_s: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_s: Tensor<T>,
    pub w: Tensor<T>,
}

impl CsdwWeightVars {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> CsdwWeights<T> {
        CsdwWeights {
            phi_c: g.value(self.phi_c).clone(),
            phi_s: g.value(self.phi_s).clone(),
            w_c: g.value(self.w_c).clone(),
            w_s: g.value(self.w_s).clone(),
            w: g.value(self.w).clone(),
        }
    }
}

pub fn change_weight<T: Scalar>(g: &mut Graph<T>, fa: Var, fb: Var) -> Result<CsdwWeightVars> {
    let phi_c = channel_similarity_map(g, fa, fb)?;
    let phi_s = spatial_similarity_vector(g, fa, fb)?;
    let sc = g.sigmoid(phi_c);
    let w_c = g.affine(sc, -T::one(), T::one());
    let ss = g.sigmoid(phi_s);
    let w_s = g.affine(ss, -T::one(), T::one());
    let w = g.mul(w_c, w_s)?;
    Ok(CsdwWeightVars { phi_c, phi_s, w_c, w_s, w })
}

/// [`change_weight`] on plain tensors.
pub fn compute_weights<T: Scalar>(fa: &Tensor<T>, fb: &Tensor<T>) -> Result<CsdwWeights<T>> {
    let mut g = Graph::new();
    let a = g.constant(fa.clone());
    let b = g.constant(fb.clone());
    Ok(change_weight(&mut g, a, b)?.values(&g))
}

/// Residual conv blocks of both streams.
#[derive(Debug, Clone)]
pub struct Csdw {
    pub conv_a: ConvBlock,
    pub conv_b: ConvBlock,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CsdwOutput {
    pub a: Var,
    pub b: Var,
    pub weights: CsdwWeightVars,
}

impl Csdw {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        cfg: &CsdwConfig,
    ) -> Result<Self> {
        let (na, nb) = if cfg.tied {
            (format!("{name}.conv"), format!("{name}.conv"))
        } else {
            (format!("{name}.conv_a"), format!("{name}.conv_b"))
        };
        Ok(Csdw {
            conv_a: ConvBlock::new(init, &na, channels, cfg.kernel, cfg.norm)?,
            conv_b: ConvBlock::new(init, &nb, channels, cfg.kernel, cfg.norm)?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, fa: Var, fb: Var) -> Result<CsdwOutput> {
        let shape = check_pair(g, fa, fb, "csdw_forward")?;
        if shape.c() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "csdw block built for {} channels, got input {shape}",
                self.channels
            )));
        }
        let weights = change_weight(g, fa, fb)?;
        let wa = g.mul(weights.w, fa)?;
        let ca = self.conv_a.forward(g, store, wa)?;
        let a = g.add(ca, fa)?;
        let wb = g.mul(weights.w, fb)?;
        let cb = self.conv_b.forward(g, store, wb)?;
        let b = g.add(cb, fb)?;
        Ok(CsdwOutput { a, b, weights })
    }
}
