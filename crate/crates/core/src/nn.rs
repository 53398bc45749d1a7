//! Parameterized building blocks shared by the encoder, pyramid and decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Parameter construction context: the store being filled and the seeded source of
/// initial values.
pub struct Init<'a, T, R> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Init<'_, T, R> {
    /// Normal-initialized tensor, or the existing one if `name` is already present.
    pub fn normal(&mut self, name: &str, shape: Shape, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        self.store.get_or_insert_with(name, || {
            let dist = Normal::new(0.0, std.max(0.0)).expect("finite std");
            let data = (0..shape.numel()).map(|_| T::lit(dist.sample(rng))).collect();
            Tensor::new(shape, data).expect("init shape")
        })
    }

    pub fn zeros(&mut self, name: &str, shape: Shape) -> ParamId {
        self.store.get_or_insert_with(name, || Tensor::zeros(shape))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias, "same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let std = gain * (2.0 / (cin * kernel * kernel) as f64).sqrt();
        let weight = init.normal(&format!("{name}.weight"), Shape::new(cout, cin, kernel, kernel), std);
        let bias = bias.then(|| init.zeros(&format!("{name}.bias"), Shape::new(cout, 1, 1, 1)));
        Conv2d { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Channel-preserving `conv → [norm] → relu → conv`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub norm: bool,
}

impl ConvBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        kernel: usize,
        norm: bool,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("block kernel must be odd, got {kernel}")));
        }
        Ok(ConvBlock {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), channels, channels, kernel, 1, true, 1.0),
            conv2: Conv2d::new(init, &format!("{name}.conv2"), channels, channels, kernel, 1, true, 0.5),
            norm,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = self.conv1.forward(g, store, x)?;
        if self.norm {
            h = g.channel_norm(h, T::lit(NORM_EPS));
        }
        let h = g.relu(h);
        self.conv2.forward(g, store, h)
    }
}

/// Feature refinement block selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum RefineKind {
    /// `x + block(x)` with a double 3×3 conv block.
    #[default]
    Conv,
    /// Single-head self-attention inside non-overlapping windows, then a 1×1 MLP,
    /// each with a residual connection.
    WindowAttention { window: usize },
}


#[derive(Debug, Clone)]
pub enum RefineBlock {
    Conv(ConvBlock),
    WindowAttention(WindowAttention),
}

impl RefineBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        kind: RefineKind,
        norm: bool,
    ) -> Result<Self> {
        Ok(match kind {
            RefineKind::Conv => RefineBlock::Conv(ConvBlock::new(init, name, channels, 3, norm)?),
            RefineKind::WindowAttention { window } => {
                RefineBlock::WindowAttention(WindowAttention::new(init, name, channels, window)?)
            }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            RefineBlock::Conv(block) => {
                let h = block.forward(g, store, x)?;
                g.add(x, h)
            }
            RefineBlock::WindowAttention(attn) => attn.forward(g, store, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub window: usize,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub proj: Conv2d,
    pub mlp_in: Conv2d,
    pub mlp_out: Conv2d,
}

impl WindowAttention {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        channels: usize,
        window: usize,
    ) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidArgument("attention window must be >= 1".into()));
        }
        let c = channels;
        Ok(WindowAttention {
            window,
            query: Conv2d::new(init, &format!("{name}.q"), c, c, 1, 1, true, 0.5),
            key: Conv2d::new(init, &format!("{name}.k"), c, c, 1, 1, true, 0.5),
            value: Conv2d::new(init, &format!("{name}.v"), c, c, 1, 1, true, 1.0),
            proj: Conv2d::new(init, &format!("{name}.proj"), c, c, 1, 1, true, 0.5),
            mlp_in: Conv2d::new(init, &format!("{name}.mlp_in"), c, 2 * c, 1, 1, true, 1.0),
            mlp_out: Conv2d::new(init, &format!("{name}.mlp_out"), 2 * c, c, 1, 1, true, 0.5),
        })
    }

    /// Window side used for an `h × w` map: the configured window clipped to the map.
    fn effective_window(&self, h: usize, w: usize) -> Result<usize> {
        let ws = self.window.min(h).min(w);
        if !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
            return Err(Error::InvalidArgument(format!(
                "attention window {ws} does not tile a {h}x{w} map"
            )));
        }
        Ok(ws)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        let [_, c, h, w] = xs.0;
        let ws = self.effective_window(h, w)?;
        let (tokens_shape, part) = window_partition_index(xs, ws, false);
        let (keys_shape, part_t) = window_partition_index(xs, ws, true);
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let q = g.gather(q, part.clone(), tokens_shape)?;
        let kt = g.gather(k, part_t, keys_shape)?;
        let v = g.gather(v, part, tokens_shape)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / (c as f64).sqrt()));
        // softmax over keys: move the key axis onto the channel axis and back
        let [b, _, tq, tk] = g.shape(scores).0;
        let s = g.permute_reshape(scores, [0, 3, 2, 1], Shape::new(b, tk, tq, 1))?;
        let s = g.softmax_channels(s);
        let attn = g.permute_reshape(s, [0, 3, 2, 1], Shape::new(b, 1, tq, tk))?;
        let mixed = g.matmul(attn, v)?;
        let merged = g.gather(mixed, window_merge_index(xs, ws), xs)?;
        let out = self.proj.forward(g, store, merged)?;
        let x = g.add(x, out)?;
        let hdn = self.mlp_in.forward(g, store, x)?;
        let hdn = g.relu(hdn);
        let hdn = self.mlp_out.forward(g, store, hdn)?;
        g.add(x, hdn)
    }
}

/// Index map from `(N, C, H, W)` to windowed tokens `(N·nw, 1, T, C)`, or `(N·nw, 1, C, T)`
/// when `transposed`.
fn window_partition_index(shape: Shape, ws: usize, transposed: bool) -> (Shape, Vec<u32>) {
    let [n, c, h, w] = shape.0;
    let (nwy, nwx) = (h / ws, w / ws);
    let t = ws * ws;
    let out_shape = if transposed {
        Shape::new(n * nwy * nwx, 1, c, t)
    } else {
        Shape::new(n * nwy * nwx, 1, t, c)
    };
    let mut idx = vec![0u32; shape.numel()];
    for i in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let b = (i * nwy + wy) * nwx + wx;
                for ty in 0..ws {
                    for tx in 0..ws {
                        let tok = ty * ws + tx;
                        for ch in 0..c {
                            let src = shape.offset(i, ch, wy * ws + ty, wx * ws + tx);
                            let dst = if transposed { (b * c + ch) * t + tok } else { (b * t + tok) * c + ch };
                            idx[dst] = src as u32;
                        }
                    }
                }
            }
        }
    }
    (out_shape, idx)
}

/// Inverse of the non-transposed partition: tokens back to `(N, C, H, W)`.
fn window_merge_index(shape: Shape, ws: usize) -> Vec<u32> {
    let (_, part) = window_partition_index(shape, ws, false);
    let mut idx = vec![0u32; part.len()];
    for (token_pos, &src) in part.iter().enumerate() {
        idx[src as usize] = token_pos as u32;
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_partition_roundtrip() {
        let shape = Shape::new(2, 3, 4, 6);
        let src = Tensor::<f64>::from_fn(shape, |[a, b, c, d]| (a * 1000 + b * 100 + c * 10 + d) as f64);
        let mut g = Graph::new();
        let x = g.constant(src.clone());
        let (ts, part) = window_partition_index(shape, 2, false);
        let tok = g.gather(x, part, ts).unwrap();
        assert_eq!(g.shape(tok), Shape::new(12, 1, 4, 3));
        // second window of batch 0 covers rows 0..2, cols 2..4; its token 3 is pixel (1, 3)
        assert_eq!(g.value(tok).at(1, 0, 3, 2), src.at(0, 2, 1, 3));
        let back = g.gather(tok, window_merge_index(shape, 2), shape).unwrap();
        assert_eq!(g.value(back), &src);
    }

    #[test]
    fn window_attention_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = RefineBlock::new(
            &mut Init { store: &mut store, rng: &mut rng },
            "r",
            8,
            RefineKind::WindowAttention { window: 4 },
            false,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(2, 8, 8, 4), 0.1));
        let y = block.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 8, 8, 4));
        let odd = g.constant(Tensor::full(Shape::new(1, 8, 6, 6), 0.1));
        assert!(block.forward(&mut g, &store, odd).is_err());
    }

    #[test]
    fn tied_names_share_parameters() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let a = Conv2d::new(&mut init, "c", 4, 4, 3, 1, true, 1.0);
        let b = Conv2d::new(&mut init, "c", 4, 4, 3, 1, true, 1.0);
        assert_eq!(a.weight, b.weight);
        assert_eq!(store.len(), 2);
    }
}
