//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op in evaluation order, so node indices are already a
//! topological order and the backward pass is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{inverse_permutation, is_permutation, permute_data, Scalar, Shape, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    PermuteReshape { x: Var, perm: [usize; 4], permuted: Shape },
    Gather { x: Var, index: Vec<u32> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Sigmoid { x: Var },
    Relu { x: Var },
    Affine { x: Var, scale: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Concat { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var },
    CrossEntropy { x: Var, target: Vec<u8> },
    RowCosine { x: Var, y: Var, eps: T },
    Sum { x: Var },
    MatMul { a: Var, b: Var },
    ChannelNorm { x: Var, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Values are immutable once recorded.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    params: Vec<(Var, ParamId)>,
}

/// Result of [`Graph::backward`]: one gradient slot per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter bound into the graph, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.params.iter().map(|&(v, id)| (id, self.get(v)))
    }

    /// Gradient buffers aligned with `store`'s parameter order; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        for (id, g) in self.params() {
            if let Some(g) = g {
                out[id.index()] = g.clone();
            }
        }
        out
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for (o, (&x, &y)) in out.iter_mut().zip(a.0.iter().zip(&b.0)) {
        *o = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return None;
        };
    }
    Some(Shape(out))
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if s.0[i] == 1 && out.0[i] != 1 { 0 } else { st[i] };
    }
    r
}

/// Visit `(out_index, a_index, b_index)` for a broadcast binary op.
fn for_each_broadcast(a: Shape, b: Shape, out: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let [n, c, h, w] = out.0;
    let mut o = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..cin {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-output-coordinate `(i0, i1, l0, l1)` for align-corners=false bilinear scaling.
fn bilinear_taps<T: Scalar>(len_in: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    let f = T::lit(factor as f64);
    let half = T::lit(0.5);
    (0..len_in * factor)
        .map(|o| {
            let mut src = (T::lit(o as f64) + half) / f - half;
            if src < T::zero() {
                src = T::zero();
            }
            let i0 = src.floor().to_usize().unwrap().min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            let l1 = src - T::lit(i0 as f64);
            (i0, i1, T::one() - l1, l1)
        })
        .collect()
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bound: HashMap::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that collects a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter. Binding the same id twice returns the same node, so tied
    /// weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.bound.insert(id, v);
        self.params.push((v, id));
        v
    }

    /// Axis permutation followed by a row-major reshape.
    pub fn permute_reshape(&mut self, x: Var, perm: [usize; 4], new_shape: Shape) -> Result<Var> {
        if !is_permutation(perm) {
            return Err(Error::InvalidArgument(format!("{perm:?} is not a permutation of 4 axes")));
        }
        let xs = self.shape(x);
        if new_shape.numel() != xs.numel() || !new_shape.is_valid() {
            return Err(Error::ShapeMismatch { op: "permute_reshape", left: xs, right: new_shape });
        }
        let (data, permuted) = if perm == [0, 1, 2, 3] {
            (self.value(x).data().to_vec(), xs)
        } else {
            permute_data(self.value(x).data(), xs, perm)
        };
        let out = Tensor::new(new_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::PermuteReshape { x, perm, permuted }, rg))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Shape) -> Result<Var> {
        self.permute_reshape(x, [0, 1, 2, 3], new_shape)
    }

    /// `out[i] = x[index[i]]`, laid out in `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: Shape) -> Result<Var> {
        let n = self.value(x).numel();
        if index.len() != shape.numel() || index.iter().any(|&i| i as usize >= n) {
            return Err(Error::InvalidArgument("gather index does not fit the shapes".into()));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    /// Cross-correlation with a `(Cout, Cin, k, k)` kernel and optional `Cout`-element bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, cin, h, wd] = xs.0;
        let [cout, wcin, k, k2] = ws.0;
        if wcin != cin || k != k2 {
            return Err(Error::ShapeMismatch { op: "conv2d", left: xs, right: ws });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::ShapeMismatch { op: "conv2d bias", left: ws, right: self.shape(b) });
            }
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {k} with padding {pad} leaves no output for input {xs}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let kk = cin * k * k;
        let plane = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * plane];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
        for i in 0..n {
            let xi = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let oi = &mut out[i * cout * plane..(i + 1) * cout * plane];
            let src: &[T] = if direct {
                xi
            } else {
                im2col(xi, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            T::gemm(cout, kk, plane, wv, false, src, false, oi, false);
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, row) in oi.chunks_mut(plane).enumerate() {
                    let bias = bv[co];
                    row.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(Shape::new(n, cout, ho, wo), out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or(Error::ShapeMismatch { op: name, left: sa, right: sb })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); out_shape.numel()];
            for_each_broadcast(sa, sb, out_shape, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
            data
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum, broadcasting size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product, broadcasting size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let [n, ca, h, w] = sa.0;
        if sb.n() != n || sb.h() != h || sb.w() != w {
            return Err(Error::ShapeMismatch { op: "concat_channels", left: sa, right: sb });
        }
        let cb = sb.c();
        let plane = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(Shape::new(n, ca + cb, h, w), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Spatial mean per channel, `(N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let plane = xs.h() * xs.w();
        let inv = T::one() / T::lit(plane as f64);
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(Shape::new(xs.n(), xs.c(), 1, 1), data).expect("pooled shape");
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool { x }, rg)
    }

    /// Bilinear upsampling by an integer factor, align-corners=false.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be a positive integer".into()));
        }
        if factor == 1 {
            return self.reshape(x, self.shape(x));
        }
        let xs = self.shape(x);
        let [n, c, h, w] = xs.0;
        let (ho, wo) = (h * factor, w * factor);
        let ty = bilinear_taps::<T>(h, factor);
        let tx = bilinear_taps::<T>(w, factor);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); n * c * ho * wo];
        for (src, dst) in xv.chunks(h * w).zip(data.chunks_mut(ho * wo)) {
            for (oy, &(y0, y1, ly0, ly1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx0, lx1)) in tx.iter().enumerate() {
                    dst[oy * wo + ox] = ly0 * (lx0 * src[y0 * w + x0] + lx1 * src[y0 * w + x1])
                        + ly1 * (lx0 * src[y1 * w + x0] + lx1 * src[y1 * w + x1]);
                }
            }
        }
        let out = Tensor::new(Shape::new(n, c, ho, wo), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// Softmax over the channel axis at every `(n, h, w)`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let out = Tensor::new(xs, softmax_channels_data(self.value(x).data(), xs)).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x }, rg)
    }

    /// Mean over pixels of `-log softmax(logits)[target]`. `target` is `(N, H, W)` row-major.
    pub fn cross_entropy(&mut self, logits: Var, target: &[u8]) -> Result<Var> {
        let xs = self.shape(logits);
        let [n, c, h, w] = xs.0;
        if target.len() != n * h * w {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy target has {} values, logits {xs} need {}",
                target.len(),
                n * h * w
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c || t > 1) {
            return Err(Error::InvalidTarget { value: bad });
        }
        let xv = self.value(logits).data();
        let plane = h * w;
        let mut total = 0.0f64;
        for i in 0..n {
            for p in 0..plane {
                let at = |ch: usize| xv[(i * c + ch) * plane + p];
                let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = m + (0..c).map(|ch| (at(ch) - m).exp()).sum::<T>().ln();
                let t = target[i * plane + p] as usize;
                total += (lse - at(t)).to_f64().unwrap();
            }
        }
        let loss = T::lit(total / (n * plane) as f64);
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { x: logits, target: target.to_vec() }, rg))
    }

    /// Cosine similarity between matching rows. Rows run along axis 0; each row is the
    /// flattened `(C, H, W)` remainder. Norms are clamped below by `eps`, so a zero row
    /// has similarity 0 with anything. Output `(R, 1, 1, 1)`.
    pub fn row_cosine(&mut self, x: Var, y: Var, eps: T) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sx != sy {
            return Err(Error::ShapeMismatch { op: "row_cosine", left: sx, right: sy });
        }
        if eps <= T::zero() {
            return Err(Error::InvalidArgument("row_cosine eps must be positive".into()));
        }
        let r = sx.n();
        let d = sx.numel() / r;
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let data = (0..r)
            .map(|i| {
                let (a, b) = (&xv[i * d..(i + 1) * d], &yv[i * d..(i + 1) * d]);
                let (dot, na, nb) = row_stats(a, b);
                dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
            })
            .collect();
        let out = Tensor::new(Shape::new(r, 1, 1, 1), data)?;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(out, Op::RowCosine { x, y, eps }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Batched matrix product over the last two axes: `(B0,B1,M,K)·(B0,B1,K,N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let [b0, b1, m, k] = sa.0;
        if sb.n() != b0 || sb.c() != b1 || sb.h() != k {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        let nn = sb.w();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); b0 * b1 * m * nn];
        for bi in 0..b0 * b1 {
            T::gemm(
                m,
                k,
                nn,
                &av[bi * m * k..(bi + 1) * m * k],
                false,
                &bv[bi * k * nn..(bi + 1) * k * nn],
                false,
                &mut data[bi * m * nn..(bi + 1) * m * nn],
                false,
            );
        }
        let out = Tensor::new(Shape::new(b0, b1, m, nn), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// Zero-mean, unit-variance normalization over channels at every pixel (no affine).
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Var {
        let xs = self.shape(x);
        let [n, c, h, w] = xs.0;
        let plane = h * w;
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        let cinv = T::one() / T::lit(c as f64);
        for i in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (i * c + ch) * plane + p;
                let mean = (0..c).map(|ch| xv[idx(ch)]).sum::<T>() * cinv;
                let var = (0..c).map(|ch| (xv[idx(ch)] - mean).powi(2)).sum::<T>() * cinv;
                let inv = T::one() / (var + eps).sqrt();
                for ch in 0..c {
                    data[idx(ch)] = (xv[idx(ch)] - mean) * inv;
                }
            }
        }
        let out = Tensor::new(xs, data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::ChannelNorm { x, eps }, rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(Error::NotScalar(ls));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::PermuteReshape { x, perm, permuted } => acc(*x, &mut |dx| {
                if *perm == [0, 1, 2, 3] {
                    dx.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                } else {
                    let (back, _) = permute_data(g, *permuted, inverse_permutation(*perm));
                    dx.iter_mut().zip(back).for_each(|(d, v)| *d += v);
                }
            }),
            Op::Gather { x, index } => acc(*x, &mut |dx| {
                for (&j, &v) in index.iter().zip(g) {
                    dx[j as usize] += v;
                }
            }),
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, node, g, &mut acc),
            Op::Sigmoid { x } => acc(*x, &mut |dx| {
                for ((d, &y), &gv) in dx.iter_mut().zip(out).zip(g) {
                    *d += gv * y * (T::one() - y);
                }
            }),
            Op::Relu { x } => acc(*x, &mut |dx| {
                for ((d, &y), &gv) in dx.iter_mut().zip(out).zip(g) {
                    if y > T::zero() {
                        *d += gv;
                    }
                }
            }),
            Op::Affine { x, scale } => acc(*x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, &v)| *d += *scale * v);
            }),
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                let (sa, sb, so) = (self.shape(*a), self.shape(*b), node.value.shape());
                acc(*a, &mut |da| for_each_broadcast(sa, sb, so, |o, ia, _| da[ia] += g[o]));
                acc(*b, &mut |db| for_each_broadcast(sa, sb, so, |o, _, ib| db[ib] += sign * g[o]));
            }
            Op::Mul { a, b } => {
                let (sa, sb, so) = (self.shape(*a), self.shape(*b), node.value.shape());
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| for_each_broadcast(sa, sb, so, |o, ia, ib| da[ia] += g[o] * bv[ib]));
                acc(*b, &mut |db| for_each_broadcast(sa, sb, so, |o, ia, ib| db[ib] += g[o] * av[ia]));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let plane = sa.h() * sa.w();
                let (ca, cb) = (sa.c() * plane, sb.c() * plane);
                acc(*a, &mut |da| {
                    for i in 0..sa.n() {
                        let src = &g[i * (ca + cb)..i * (ca + cb) + ca];
                        da[i * ca..(i + 1) * ca].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..sa.n() {
                        let src = &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)];
                        db[i * cb..(i + 1) * cb].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let plane = xs.h() * xs.w();
                let inv = T::one() / T::lit(plane as f64);
                acc(*x, &mut |dx| {
                    for (p, &gv) in dx.chunks_mut(plane).zip(g) {
                        p.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let [_, _, h, w] = self.shape(*x).0;
                let (ho, wo) = (h * factor, w * factor);
                let ty = bilinear_taps::<T>(h, *factor);
                let tx = bilinear_taps::<T>(w, *factor);
                acc(*x, &mut |dx| {
                    for (dst, src) in dx.chunks_mut(h * w).zip(g.chunks(ho * wo)) {
                        for (oy, &(y0, y1, ly0, ly1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, lx0, lx1)) in tx.iter().enumerate() {
                                let gv = src[oy * wo + ox];
                                dst[y0 * w + x0] += gv * ly0 * lx0;
                                dst[y0 * w + x1] += gv * ly0 * lx1;
                                dst[y1 * w + x0] += gv * ly1 * lx0;
                                dst[y1 * w + x1] += gv * ly1 * lx1;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let [n, c, h, w] = node.value.shape().0;
                let plane = h * w;
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (i * c + ch) * plane + p;
                            let dot: T = (0..c).map(|ch| g[idx(ch)] * out[idx(ch)]).sum();
                            for ch in 0..c {
                                dx[idx(ch)] += out[idx(ch)] * (g[idx(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { x, target } => {
                let xs = self.shape(*x);
                let [n, c, h, w] = xs.0;
                let plane = h * w;
                let probs = softmax_channels_data(self.value(*x).data(), xs);
                let scale = g[0] / T::lit((n * plane) as f64);
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for p in 0..plane {
                            let t = target[i * plane + p] as usize;
                            for ch in 0..c {
                                let idx = (i * c + ch) * plane + p;
                                let onehot = if ch == t { T::one() } else { T::zero() };
                                dx[idx] += scale * (probs[idx] - onehot);
                            }
                        }
                    }
                });
            }
            Op::RowCosine { x, y, eps } => {
                let sx = self.shape(*x);
                let r = sx.n();
                let d = sx.numel() / r;
                let (xv, yv) = (self.value(*x).data(), self.value(*y).data());
                let stats: Vec<_> = (0..r)
                    .map(|i| {
                        let (dot, na, nb) = row_stats(&xv[i * d..(i + 1) * d], &yv[i * d..(i + 1) * d]);
                        let (na, nb) = (na.sqrt(), nb.sqrt());
                        (dot, na, nb, na.max(*eps), nb.max(*eps))
                    })
                    .collect();
                // d cos / d x = y / (|x| |y|) - cos x / |x|^2, the second term only while |x| > eps.
                let side = |own: &[T], other: &[T], own_is_x: bool, dx: &mut [T]| {
                    for (i, &(dot, na, nb, ca, cb)) in stats.iter().enumerate() {
                        let (n_own, c_own, c_other) = if own_is_x { (na, ca, cb) } else { (nb, cb, ca) };
                        let denom = ca * cb;
                        let cos = dot / denom;
                        let gv = g[i];
                        let clamped = n_own <= *eps;
                        for j in i * d..(i + 1) * d {
                            let mut v = other[j] / (c_own * c_other);
                            if !clamped {
                                v -= cos * own[j] / (c_own * c_own);
                            }
                            dx[j] += gv * v;
                        }
                    }
                };
                acc(*x, &mut |dx| side(xv, yv, true, dx));
                acc(*y, &mut |dy| side(yv, xv, false, dy));
            }
            Op::Sum { x } => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::MatMul { a, b } => {
                let [b0, b1, m, k] = self.shape(*a).0;
                let nn = self.shape(*b).w();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for bi in 0..b0 * b1 {
                        T::gemm(
                            m,
                            nn,
                            k,
                            &g[bi * m * nn..(bi + 1) * m * nn],
                            false,
                            &bv[bi * k * nn..(bi + 1) * k * nn],
                            true,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for bi in 0..b0 * b1 {
                        T::gemm(
                            k,
                            m,
                            nn,
                            &av[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * nn..(bi + 1) * m * nn],
                            false,
                            &mut db[bi * k * nn..(bi + 1) * k * nn],
                            true,
                        );
                    }
                });
            }
            Op::ChannelNorm { x, eps } => {
                let xs = self.shape(*x);
                let [n, c, h, w] = xs.0;
                let plane = h * w;
                let xv = self.value(*x).data();
                let cinv = T::one() / T::lit(c as f64);
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (i * c + ch) * plane + p;
                            let mean = (0..c).map(|ch| xv[idx(ch)]).sum::<T>() * cinv;
                            let var = (0..c).map(|ch| (xv[idx(ch)] - mean).powi(2)).sum::<T>() * cinv;
                            let inv = T::one() / (var + *eps).sqrt();
                            let gm = (0..c).map(|ch| g[idx(ch)]).sum::<T>() * cinv;
                            let gy = (0..c).map(|ch| g[idx(ch)] * out[idx(ch)]).sum::<T>() * cinv;
                            for ch in 0..c {
                                dx[idx(ch)] += inv * (g[idx(ch)] - gm - out[idx(ch)] * gy);
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        node: &Node<T>,
        g: &[T],
        acc: &mut impl FnMut(Var, &mut dyn FnMut(&mut [T])),
    ) {
        let [n, cin, h, wd] = self.shape(x).0;
        let [cout, _, k, _] = self.shape(w).0;
        let [_, _, ho, wo] = node.value.shape().0;
        let plane = ho * wo;
        let kk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b {
            acc(b, &mut |db| {
                for i in 0..n {
                    for co in 0..cout {
                        let s: T = g[(i * cout + co) * plane..(i * cout + co + 1) * plane].iter().copied().sum();
                        db[co] += s;
                    }
                }
            });
        }
        let x_in = |i: usize| &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
        let gi = |i: usize| &g[i * cout * plane..(i + 1) * cout * plane];
        acc(w, &mut |dw| {
            let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * plane] };
            for i in 0..n {
                let src: &[T] = if direct {
                    x_in(i)
                } else {
                    im2col(x_in(i), cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                T::gemm(cout, plane, kk, gi(i), false, src, true, dw, true);
            }
        });
        acc(x, &mut |dx| {
            let mut dcols = vec![T::zero(); kk * plane];
            for i in 0..n {
                let dxi = &mut dx[i * cin * h * wd..(i + 1) * cin * h * wd];
                if direct {
                    T::gemm(kk, cout, plane, wv, true, gi(i), false, dxi, true);
                } else {
                    T::gemm(kk, cout, plane, wv, true, gi(i), false, &mut dcols, false);
                    col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dxi);
                }
            }
        });
    }
}

fn row_stats<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

pub(crate) fn softmax_channels_data<T: Scalar>(x: &[T], shape: Shape) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (i * c + ch) * plane + p;
            let m = (0..c).map(|ch| x[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / z;
            }
        }
    }
    out
}
