//! A small tape-based reverse-mode differentiator covering exactly the
//! operators the masking network and its losses need.
//!
//! Every op records its inputs on the tape; [`Graph::backward`] walks the
//! tape in reverse. Batch-parallel kernels reduce per-sample partials in
//! sample order, so gradients do not depend on the thread count.

use crate::error::{Error, Result};
use crate::loss::{margin_row, softmax_ce_row, MarginSpec};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum BnStats<'a, T> {
    /// Normalize with the batch's own statistics.
    Batch { eps: T },
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

/// Batch mean and unbiased variance per channel, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    PRelu {
        x: Var,
        slope: Var,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Upsample {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulSpatial {
        x: Var,
        m: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    RowLoss {
        x: Var,
        row_grads: Vec<T>,
    },
    Weighted {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(format!("{what}: expected NCHW, got {shape:?}"))),
    }
}

/// Output spatial size of a square-kernel convolution.
pub fn conv_out(size: usize, kernel: usize, geom: ConvGeom) -> usize {
    (size + 2 * geom.pad - kernel) / geom.stride + 1
}

struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeom,
}

impl ConvDims {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    let (hw_out, k, s, p) = (d.col_cols(), d.k, d.geom.stride, d.geom.pad as isize);
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let (hw_out, k, s, p) = (d.col_cols(), d.k, d.geom.stride, d.geom.pad as isize);
    for ci in 0..d.c {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..d.oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let base = iy as usize * d.w;
                    for ox in 0..d.ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            plane[base + ix as usize] =
                                plane[base + ix as usize] + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Square-kernel 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x).shape(), "conv2d input")?;
        let (o, wc, kh, kw) = dims4(self.value(w).shape(), "conv2d weight")?;
        if wc != c || kh != kw {
            return Err(shape_err(format!(
                "conv2d: weight {:?} vs input channels {c}",
                self.value(w).shape()
            )));
        }
        if h + 2 * geom.pad < kh || wd + 2 * geom.pad < kw || geom.stride == 0 {
            return Err(shape_err(format!("conv2d: input {h}x{wd} too small for kernel {kh}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(shape_err("conv2d: bias shape".into()));
            }
        }
        let d = ConvDims {
            c,
            h,
            w: wd,
            k: kh,
            oh: conv_out(h, kh, geom),
            ow: conv_out(wd, kw, geom),
            geom,
        };
        let xin = self.value(x).data();
        let weight = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let out_per = o * d.col_cols();
        let mut out = vec![T::zero(); n * out_per];
        let in_per = c * h * wd;
        par::for_each_chunk_mut(&mut out, out_per, |i, dst| {
            let xs = &xin[i * in_per..(i + 1) * in_per];
            let owned;
            let col: &[T] = if d.is_pointwise() {
                xs
            } else {
                let mut buf = vec![T::zero(); d.col_rows() * d.col_cols()];
                im2col(xs, &d, &mut buf);
                owned = buf;
                &owned
            };
            let (kk, hw) = (d.col_rows(), d.col_cols());
            T::gemm(
                o,
                kk,
                hw,
                T::one(),
                weight,
                kk as isize,
                1,
                col,
                hw as isize,
                1,
                T::zero(),
                dst,
                hw as isize,
                1,
            );
            if let Some(bias) = bias {
                for (oc, plane) in dst.chunks_mut(hw).enumerate() {
                    for v in plane {
                        *v = *v + bias[oc];
                    }
                }
            }
        });
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_vec(&[n, o, d.oh, d.ow], out),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Fully connected layer on the flattened per-sample input:
    /// `x: [N, ...]`, `w: [O, F]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let (n, f) = (xv.batch(), xv.per_item());
        let (o, wf) = match *self.value(w).shape() {
            [o, wf] => (o, wf),
            ref s => return Err(shape_err(format!("linear weight {s:?}"))),
        };
        if wf != f {
            return Err(shape_err(format!("linear: input features {f} vs weight {wf}")));
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            f as isize,
            1,
            self.value(w).data(),
            1,
            f as isize,
            T::zero(),
            &mut out,
            o as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return Err(shape_err("linear: bias shape".into()));
            }
            for row in out.chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v = *v + bb;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_vec(&[n, o], out), Op::Linear { x, w, b }, rg))
    }

    /// Per-channel batch normalization over `[N, C, ...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(shape_err(format!("batch_norm input {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        if g.len() != c || bt.len() != c {
            return Err(shape_err("batch_norm: affine parameter shape".into()));
        }
        let data = xv.data();
        let count = n * s;
        let at = |ni: usize, ci: usize| &data[(ni * c + ci) * s..(ni * c + ci + 1) * s];
        let (mean, inv_std, moments, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batch_norm: batch statistics need at least two values per channel",
                    ));
                }
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let m = (0..n).map(|ni| at(ni, ci).iter().copied().sum::<T>()).sum::<T>()
                        / cnt;
                    let v = (0..n)
                        .map(|ni| at(ni, ci).iter().map(|&x| (x - m) * (x - m)).sum::<T>())
                        .sum::<T>();
                    mean[ci] = m;
                    var[ci] = v;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / cnt + eps).sqrt()).collect();
                let unbiased = var
                    .iter()
                    .map(|&v| v / T::from_usize(count - 1).unwrap())
                    .collect();
                (
                    mean.clone(),
                    inv_std,
                    Some(BatchMoments {
                        mean,
                        var: unbiased,
                    }),
                    true,
                )
            }
            BnStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm: running stat shape".into()));
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None, false)
            }
        };
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for k in base..base + s {
                    let h = (data[k] - mean[ci]) * inv_std[ci];
                    xhat[k] = h;
                    out[k] = g[ci] * h + bt[ci];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::from_vec(&shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok((v, moments))
    }

    /// Parametric ReLU with one slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.get(1).ok_or_else(|| shape_err("prelu input rank".into()))?;
        let a = self.value(slope).data();
        if a.len() != c {
            return Err(shape_err("prelu: slope shape".into()));
        }
        let s: usize = shape[2..].iter().product();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { a[(i / s) % c] * v })
            .collect();
        let rg = self.rg(&[x, slope]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::PRelu { x, slope }, rg))
    }

    /// Logistic function held inside `[eps, 1 - eps]` so the output never
    /// rounds to exactly 0 or 1.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let eps = T::epsilon();
        let hi = T::one() - eps;
        let out = self
            .value(x)
            .map(|v| (T::one() / (T::one() + (-v).exp())).max(eps).min(hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Multiply by a precomputed keep mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(shape_err("dropout mask length".into()));
        }
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&shape, out), Op::Dropout { x, mask }, rg))
    }

    /// Nearest-neighbour x2 upsampling cropped to `out_h x out_w`
    /// (`out[i][j] = in[i/2][j/2]`).
    pub fn upsample2x(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "upsample input")?;
        if out_h > 2 * h || out_w > 2 * w || out_h + 1 < 2 * h || out_w + 1 < 2 * w {
            return Err(shape_err(format!(
                "upsample: {h}x{w} cannot be doubled to {out_h}x{out_w}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (p, dst) in out.chunks_mut(out_h * out_w).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..out_h {
                for j in 0..out_w {
                    dst[i * out_w + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[n, c, out_h, out_w], out),
            Op::Upsample { x },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, "add")
            .map(|out| {
                let rg = self.rg(&[a, b]);
                self.push(out, Op::Add { a, b }, rg)
            })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, "mul").map(|out| {
            let rg = self.rg(&[a, b]);
            self.push(out, Op::Mul { a, b }, rg)
        })
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, what: &str) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_vec(av.shape(), data))
    }

    /// `x: [N,C,H,W]` times `m: [N,1,H,W]`, broadcasting over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "mul_spatial input")?;
        if self.value(m).shape() != [n, 1, h, w] {
            return Err(shape_err(format!(
                "mul_spatial: mask {:?} for input {:?}",
                self.value(m).shape(),
                self.value(x).shape()
            )));
        }
        let hw = h * w;
        let (xd, md) = (self.value(x).data(), self.value(m).data());
        let out = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ni = i / (c * hw);
                v * md[ni * hw + i % hw]
            })
            .collect();
        let rg = self.rg(&[x, m]);
        Ok(self.push(Tensor::from_vec(&[n, c, h, w], out), Op::MulSpatial { x, m }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "global_avg_pool")?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(&[n, c], out), Op::GlobalAvgPool { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err(format!("reshape {:?} to {shape:?}", t.shape())));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(t.reshaped(shape), Op::Reshape { x }, rg))
    }

    /// Flatten to `[N, F]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let (n, f) = (self.value(x).batch(), self.value(x).per_item());
        self.reshape(x, &[n, f])
    }

    /// Scale each row of a `[N, F]` matrix to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, f) = (xv.batch(), xv.per_item());
        let tiny = T::from_f64_lossy(1e-12);
        let norms: Vec<T> = xv
            .data()
            .chunks(f)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny))
            .collect();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v / norms[i / f])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[n, f], out),
            Op::L2NormalizeRows { x, norms },
            rg,
        ))
    }

    /// `a: [N,F]`, `b: [M,F]` to `a * b^T: [N,M]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, f) = (av.batch(), av.per_item());
        let (m, bf) = (bv.batch(), bv.per_item());
        if f != bf {
            return Err(shape_err(format!("matmul_nt: {f} vs {bf} features")));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            f,
            m,
            T::one(),
            av.data(),
            f as isize,
            1,
            bv.data(),
            1,
            f as isize,
            T::zero(),
            &mut out,
            m as isize,
            1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[n, m], out), Op::MatMulNt { a, b }, rg))
    }

    fn row_loss(
        &mut self,
        x: Var,
        labels: &[usize],
        f: impl Fn(&[T], usize) -> (T, Vec<T>),
        what: &str,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = match *xv.shape() {
            [n, m] => (n, m),
            ref s => return Err(Error::invalid(format!("{what}: expected matrix, got {s:?}"))),
        };
        if n == 0 {
            return Err(Error::invalid(format!("{what}: empty batch")));
        }
        if labels.len() != n || labels.iter().any(|&l| l >= m) {
            return Err(Error::invalid(format!("{what}: labels out of range")));
        }
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut total = T::zero();
        let mut row_grads = Vec::with_capacity(n * m);
        for (row, &y) in xv.data().chunks(m).zip(labels) {
            let (l, g) = f(row, y);
            total = total + l;
            row_grads.extend(g.into_iter().map(|v| v * inv_n));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total * inv_n), Op::RowLoss { x, row_grads }, rg))
    }

    /// Mean unified margin loss on a cosine matrix.
    pub fn margin_loss(&mut self, cos: Var, labels: &[usize], spec: &MarginSpec) -> Result<Var> {
        spec.validate()?;
        self.row_loss(cos, labels, |r, y| margin_row(r, y, spec), "margin_loss")
    }

    /// Mean softmax cross-entropy on logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.row_loss(logits, labels, softmax_ce_row, "softmax_ce")
    }

    /// Mean row-wise Euclidean distance to a constant target.
    pub fn row_distance(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.shape().len() != 2 {
            return Err(Error::invalid(format!(
                "row_distance: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let (n, w) = (pv.batch(), pv.per_item());
        if n == 0 {
            return Err(Error::invalid("row_distance: empty batch"));
        }
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut total = T::zero();
        let mut row_grads = Vec::with_capacity(n * w);
        for (p, t) in pv.data().chunks(w).zip(target.data().chunks(w)) {
            let norm = p
                .iter()
                .zip(t)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            total = total + norm;
            for (&a, &b) in p.iter().zip(t) {
                row_grads.push(if norm > T::zero() {
                    (a - b) / norm * inv_n
                } else {
                    T::zero()
                });
            }
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total * inv_n),
            Op::RowLoss { x: pred, row_grads },
            rg,
        ))
    }

    /// `sum_i w_i * x_i` over same-shaped inputs. Zero weights are dropped
    /// from the tape so their inputs receive no gradient.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::invalid("weighted_sum: no terms"))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        let kept: Vec<(Var, T)> = terms.iter().copied().filter(|&(_, w)| w != T::zero()).collect();
        for &(v, w) in &kept {
            let val = self.value(v);
            if val.shape() != shape.as_slice() {
                return Err(shape_err("weighted_sum: shape mismatch".into()));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o = *o + w * x;
            }
        }
        let vars: Vec<Var> = kept.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(out, Op::Weighted { terms: kept }, rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), T::one()));
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, c, h, wd) = dims4(xv.shape(), "").unwrap();
                let (o, _, k, _) = dims4(wv.shape(), "").unwrap();
                let d = ConvDims {
                    c,
                    h,
                    w: wd,
                    k,
                    oh: conv_out(h, k, *geom),
                    ow: conv_out(wd, k, *geom),
                    geom: *geom,
                };
                let (kk, hw) = (d.col_rows(), d.col_cols());
                let need_x = self.want(*x);
                let need_w = self.want(*w);
                let in_per = c * h * wd;
                let xdata = xv.data();
                let wdata = wv.data();
                let parts = par::map_indexed(n, |i| {
                    let xs = &xdata[i * in_per..(i + 1) * in_per];
                    let gs = &go[i * o * hw..(i + 1) * o * hw];
                    let dw = need_w.then(|| {
                        let owned;
                        let col: &[T] = if d.is_pointwise() {
                            xs
                        } else {
                            let mut buf = vec![T::zero(); kk * hw];
                            im2col(xs, &d, &mut buf);
                            owned = buf;
                            &owned
                        };
                        let mut dw = vec![T::zero(); o * kk];
                        T::gemm(
                            o, hw, kk, T::one(), gs, hw as isize, 1, col, 1, hw as isize,
                            T::zero(), &mut dw, kk as isize, 1,
                        );
                        dw
                    });
                    let dx = need_x.then(|| {
                        let mut dcol = vec![T::zero(); kk * hw];
                        T::gemm(
                            kk, o, hw, T::one(), wdata, 1, kk as isize, gs, hw as isize, 1,
                            T::zero(), &mut dcol, hw as isize, 1,
                        );
                        if d.is_pointwise() {
                            dcol
                        } else {
                            let mut dx = vec![T::zero(); in_per];
                            col2im(&dcol, &d, &mut dx);
                            dx
                        }
                    });
                    (dw, dx)
                });
                let mut dw_total = need_w.then(|| vec![T::zero(); o * kk]);
                let mut dx_total = need_x.then(|| Vec::with_capacity(n * in_per));
                for (dw, dx) in parts {
                    if let (Some(t), Some(p)) = (dw_total.as_mut(), dw) {
                        for (a, b) in t.iter_mut().zip(p) {
                            *a = *a + b;
                        }
                    }
                    if let (Some(t), Some(p)) = (dx_total.as_mut(), dx) {
                        t.extend(p);
                    }
                }
                if let Some(dw) = dw_total {
                    acc(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if let Some(dx) = dx_total {
                    acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if let Some(b) = b.filter(|b| self.want(*b)) {
                    let mut db = vec![T::zero(); o];
                    for (p, plane) in go.chunks(hw).enumerate() {
                        db[p % o] = db[p % o] + plane.iter().copied().sum::<T>();
                    }
                    acc(grads, b, Tensor::from_vec(&[o], db));
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, f) = (xv.batch(), xv.per_item());
                let o = wv.shape()[0];
                if self.want(*x) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(
                        n, o, f, T::one(), go, o as isize, 1, wv.data(), f as isize, 1, T::zero(),
                        &mut dx, f as isize, 1,
                    );
                    acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
                if self.want(*w) {
                    let mut dw = vec![T::zero(); o * f];
                    T::gemm(
                        o, n, f, T::one(), go, 1, o as isize, xv.data(), f as isize, 1, T::zero(),
                        &mut dw, f as isize, 1,
                    );
                    acc(grads, *w, Tensor::from_vec(&[o, f], dw));
                }
                if let Some(b) = b.filter(|b| self.want(*b)) {
                    let mut db = vec![T::zero(); o];
                    for row in go.chunks(o) {
                        for (a, &g) in db.iter_mut().zip(row) {
                            *a = *a + g;
                        }
                    }
                    acc(grads, b, Tensor::from_vec(&[o], db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for k in base..base + s {
                            dgamma[ci] = dgamma[ci] + go[k] * xhat[k];
                            dbeta[ci] = dbeta[ci] + go[k];
                        }
                    }
                }
                if self.want(*x) {
                    let mut dx = vec![T::zero(); go.len()];
                    let cnt = T::from_usize(n * s).unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * s;
                            let scale = g[ci] * inv_std[ci];
                            for k in base..base + s {
                                dx[k] = if *batch_stats {
                                    scale / cnt * (cnt * go[k] - dbeta[ci] - xhat[k] * dgamma[ci])
                                } else {
                                    scale * go[k]
                                };
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(shape, dx));
                }
                if self.want(*gamma) {
                    acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                }
                if self.want(*beta) {
                    acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
                }
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x);
                let shape = xv.shape();
                let c = shape[1];
                let s: usize = shape[2..].iter().product();
                let a = self.value(*slope).data();
                let mut dx = vec![T::zero(); go.len()];
                let mut da = vec![T::zero(); c];
                for (i, (&v, &g)) in xv.data().iter().zip(go).enumerate() {
                    let ci = (i / s) % c;
                    if v > T::zero() {
                        dx[i] = g;
                    } else {
                        dx[i] = a[ci] * g;
                        da[ci] = da[ci] + v * g;
                    }
                }
                if self.want(*x) {
                    acc(grads, *x, Tensor::from_vec(shape, dx));
                }
                if self.want(*slope) {
                    acc(grads, *slope, Tensor::from_vec(&[c], da));
                }
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(go)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                acc(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::Dropout { x, mask } => {
                let dx = go.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                acc(grads, *x, Tensor::from_vec(node.value.shape(), dx));
            }
            Op::Upsample { x } => {
                let xv = self.value(*x);
                let (_, _, h, w) = dims4(xv.shape(), "").unwrap();
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let mut dx = vec![T::zero(); xv.len()];
                for (p, plane) in go.chunks(oh * ow).enumerate() {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let t = (i / 2) * w + j / 2;
                            dst[t] = dst[t] + plane[i * ow + j];
                        }
                    }
                }
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.want(v) {
                        acc(grads, v, gout.clone());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.want(*a) {
                    let d = go.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                    acc(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if self.want(*b) {
                    let d = go.iter().zip(av.data()).map(|(&g, &y)| g * y).collect();
                    acc(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::MulSpatial { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let (_, c, h, w) = dims4(xv.shape(), "").unwrap();
                let hw = h * w;
                let (xd, md) = (xv.data(), mv.data());
                if self.want(*x) {
                    let d = go
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * md[(i / (c * hw)) * hw + i % hw])
                        .collect();
                    acc(grads, *x, Tensor::from_vec(xv.shape(), d));
                }
                if self.want(*m) {
                    let mut dm = vec![T::zero(); mv.len()];
                    for (i, (&g, &v)) in go.iter().zip(xd).enumerate() {
                        let t = (i / (c * hw)) * hw + i % hw;
                        dm[t] = dm[t] + g * v;
                    }
                    acc(grads, *m, Tensor::from_vec(mv.shape(), dm));
                }
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let hw: usize = xv.shape()[2..].iter().product();
                let inv = T::one() / T::from_usize(hw).unwrap();
                let dx = (0..xv.len()).map(|i| go[i / hw] * inv).collect();
                acc(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape();
                acc(grads, *x, gout.clone().reshaped(shape));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let f = node.value.per_item();
                let mut dx = vec![T::zero(); y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let ys = &y[r * f..(r + 1) * f];
                    let gs = &go[r * f..(r + 1) * f];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for k in 0..f {
                        dx[r * f + k] = (gs[k] - ys[k] * dot) / *norm;
                    }
                }
                acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, f) = (av.batch(), av.per_item());
                let m = bv.batch();
                if self.want(*a) {
                    let mut da = vec![T::zero(); n * f];
                    T::gemm(
                        n, m, f, T::one(), go, m as isize, 1, bv.data(), f as isize, 1, T::zero(),
                        &mut da, f as isize, 1,
                    );
                    acc(grads, *a, Tensor::from_vec(av.shape(), da));
                }
                if self.want(*b) {
                    let mut db = vec![T::zero(); m * f];
                    T::gemm(
                        m, n, f, T::one(), go, 1, m as isize, av.data(), f as isize, 1, T::zero(),
                        &mut db, f as isize, 1,
                    );
                    acc(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::RowLoss { x, row_grads } => {
                let g = go[0];
                let d = row_grads.iter().map(|&v| v * g).collect();
                acc(grads, *x, Tensor::from_vec(self.value(*x).shape(), d));
            }
            Op::Weighted { terms } => {
                for &(v, w) in terms {
                    if self.want(v) {
                        acc(grads, v, gout.map(|g| g * w));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for im2col + GEMM.
    fn conv_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, wd) = dims4(x.shape(), "").unwrap();
        let (o, _, k, _) = dims4(w.shape(), "").unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()
                                            [((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (stride, pad, k, h, w) in [(1, 1, 3, 5, 4), (2, 1, 3, 7, 6), (1, 0, 1, 3, 3), (2, 0, 3, 8, 5)] {
            let x = Tensor::from_vec(&[2, 3, h, w], seq(2 * 3 * h * w, 1.0));
            let wt = Tensor::from_vec(&[4, 3, k, k], seq(4 * 3 * k * k, 0.5));
            let b = [0.1, -0.2, 0.3, 0.0];
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param(wt.clone());
            let bv = g.param(Tensor::from_vec(&[4], b.to_vec()));
            let y = g.conv2d(xv, wv, Some(bv), ConvGeom { stride, pad }).unwrap();
            let expected = conv_naive(&x, &wt, &b, stride, pad);
            assert_eq!(g.value(y).shape(), expected.shape());
            for (a, e) in g.value(y).data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_crops_to_target() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.upsample2x(x, 3, 4).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert!(g.upsample2x(x, 5, 4).is_err());
    }

    #[test]
    fn zero_weight_terms_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let s = g.weighted_sum(&[(a, 1.0), (b, 0.0)]).unwrap();
        assert_eq!(g.value(s).item(), 2.0);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().item(), 1.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn mul_spatial_broadcasts_over_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 3, 1, 2], 2.0));
        let m = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.25]));
        let y = g.mul_spatial(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.5, 1.0, 0.5, 1.0, 0.5]);
    }
}
