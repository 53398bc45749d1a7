//! Straight-line reference implementations on plain `Vec<f64>` arrays, written directly
//! from the defining formulas and sharing no code with the library's graph ops.

#![allow(dead_code)]

use bitemporal_core::{ParamStore, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Arr { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Arr { dims: t.shape().dims(), data: t.data().to_vec() }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        let [n, c, h, w] = self.dims;
        Tensor::new(Shape::new(n, c, h, w), self.data.clone()).unwrap()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Arr { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, o: &Arr, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.dims, o.dims);
        Arr { dims: self.dims, data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect() }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Direct 7-loop convolution with zero padding.
pub fn conv(x: &Arr, w: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let [n, cin, h, wd] = x.dims;
    let [cout, wcin, k, _] = w.dims;
    assert_eq!(cin, wcin);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Arr::zeros([n, cout, oh, ow]);
    for i in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (y * stride + ky) as isize - pad as isize;
                                let sx = (xx * stride + kx) as isize - pad as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += x.get(i, c, sy as usize, sx as usize) * w.get(o, c, ky, kx);
                            }
                        }
                    }
                    let at = out.idx(i, o, y, xx);
                    out.data[at] = acc;
                }
            }
        }
    }
    out
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let [n, ca, h, w] = a.dims;
    let cb = b.dims[1];
    let mut out = Arr::zeros([n, ca + cb, h, w]);
    for i in 0..n {
        for c in 0..ca + cb {
            for y in 0..h {
                for x in 0..w {
                    let v = if c < ca { a.get(i, c, y, x) } else { b.get(i, c - ca, y, x) };
                    let at = out.idx(i, c, y, x);
                    out.data[at] = v;
                }
            }
        }
    }
    out
}

pub const EPS: f64 = 1e-8;

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    dot / (nu * nv)
}

pub struct Weights {
    pub phi_c: Arr,
    pub phi_s: Arr,
    pub w_c: Arr,
    pub w_s: Arr,
    pub w: Arr,
}

/// `phi_c` per pixel across channels, `phi_s` per channel across space,
/// `w = (1 - sigmoid(phi_c)) * (1 - sigmoid(phi_s))` broadcast to `(N, C, H, W)`.
pub fn change_weight(a: &Arr, b: &Arr) -> Weights {
    let [n, c, h, w] = a.dims;
    let mut phi_c = Arr::zeros([n, 1, h, w]);
    let mut phi_s = Arr::zeros([n, c, 1, 1]);
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                let u: Vec<f64> = (0..c).map(|ch| a.get(i, ch, y, x)).collect();
                let v: Vec<f64> = (0..c).map(|ch| b.get(i, ch, y, x)).collect();
                let at = phi_c.idx(i, 0, y, x);
                phi_c.data[at] = cos(&u, &v);
            }
        }
        for ch in 0..c {
            let u: Vec<f64> = (0..h * w).map(|p| a.get(i, ch, p / w, p % w)).collect();
            let v: Vec<f64> = (0..h * w).map(|p| b.get(i, ch, p / w, p % w)).collect();
            let at = phi_s.idx(i, ch, 0, 0);
            phi_s.data[at] = cos(&u, &v);
        }
    }
    let w_c = phi_c.map(|v| 1.0 - sigmoid(v));
    let w_s = phi_s.map(|v| 1.0 - sigmoid(v));
    let mut full = Arr::zeros(a.dims);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let at = full.idx(i, ch, y, x);
                    full.data[at] = w_c.get(i, 0, y, x) * w_s.get(i, ch, 0, 0);
                }
            }
        }
    }
    Weights { phi_c, phi_s, w_c, w_s, w: full }
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Arr {
    Arr::from_tensor(store.by_name(name).unwrap_or_else(|_| panic!("missing parameter {name}")))
}

/// Conv with "same" padding from `{name}.weight` / `{name}.bias`.
pub fn conv_named(store: &ParamStore<f64>, name: &str, x: &Arr) -> Arr {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let k = w.dims[2];
    conv(x, &w, Some(&b), 1, k / 2)
}

pub fn conv_block(store: &ParamStore<f64>, name: &str, x: &Arr) -> Arr {
    let h = conv_named(store, &format!("{name}.conv1"), x).map(|v| v.max(0.0));
    conv_named(store, &format!("{name}.conv2"), &h)
}

/// `f_i + block_i(w * f_i)` for both streams.
pub fn csdw(store: &ParamStore<f64>, name_a: &str, name_b: &str, fa: &Arr, fb: &Arr) -> (Arr, Arr) {
    let wt = change_weight(fa, fb);
    let ya = conv_block(store, name_a, &wt.w.zip(fa, |w, f| w * f)).zip(fa, |c, f| c + f);
    let yb = conv_block(store, name_b, &wt.w.zip(fb, |w, f| w * f)).zip(fb, |c, f| c + f);
    (ya, yb)
}

/// Squeeze-excite: `x * sigmoid(W2 relu(W1 mean_hw(x) + b1) + b2)`.
pub fn squeeze_excite(store: &ParamStore<f64>, name: &str, x: &Arr) -> Arr {
    let [n, c, h, w] = x.dims;
    let w1 = param(store, &format!("{name}.squeeze.weight"));
    let b1 = param(store, &format!("{name}.squeeze.bias"));
    let w2 = param(store, &format!("{name}.excite.weight"));
    let b2 = param(store, &format!("{name}.excite.bias"));
    let hidden = w1.dims[0];
    let mut out = x.clone();
    for i in 0..n {
        let mean: Vec<f64> = (0..c)
            .map(|ch| (0..h * w).map(|p| x.get(i, ch, p / w, p % w)).sum::<f64>() / (h * w) as f64)
            .collect();
        let z: Vec<f64> = (0..hidden)
            .map(|j| (b1.data[j] + (0..c).map(|ch| w1.get(j, ch, 0, 0) * mean[ch]).sum::<f64>()).max(0.0))
            .collect();
        for ch in 0..c {
            let s = sigmoid(b2.data[ch] + (0..hidden).map(|j| w2.get(ch, j, 0, 0) * z[j]).sum::<f64>());
            for p in 0..h * w {
                let at = out.idx(i, ch, p / w, p % w);
                out.data[at] *= s;
            }
        }
    }
    out
}

/// One decoder level with untied streams: exchange, refine, residual cross fusion,
/// channel attention, difference weighting.
pub fn led_level(store: &ParamStore<f64>, level: &str, xa: &Arr, xb: &Arr, prev: Option<(&Arr, &Arr)>) -> (Arr, Arr) {
    let sa = format!("{level}.stream_a");
    let sb = format!("{level}.stream_b");
    let (xa, xb) = match prev {
        Some((pa, pb)) => (
            conv_named(store, &format!("{sa}.fuse"), &concat(xa, pb)),
            conv_named(store, &format!("{sb}.fuse"), &concat(xb, pa)),
        ),
        None => (xa.clone(), xb.clone()),
    };
    let ra = conv_block(store, &format!("{sa}.refine"), &xa).zip(&xa, |h, x| h + x);
    let rb = conv_block(store, &format!("{sb}.refine"), &xb).zip(&xb, |h, x| h + x);
    let fa = ra.zip(&conv_named(store, &format!("{sa}.cross"), &rb), |r, c| r + c);
    let fb = rb.zip(&conv_named(store, &format!("{sb}.cross"), &ra), |r, c| r + c);
    let fa = squeeze_excite(store, &format!("{sa}.attn"), &fa);
    let fb = squeeze_excite(store, &format!("{sb}.attn"), &fb);
    csdw(store, &format!("{level}.csdw.conv_a"), &format!("{level}.csdw.conv_b"), &fa, &fb)
}

/// Deterministic pseudo-random array in `[-1, 1)`.
pub fn rand_arr(dims: [usize; 4], seed: u64) -> Arr {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..dims.iter().product::<usize>())
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Arr { dims, data }
}

pub fn max_diff(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.dims, b.dims);
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
