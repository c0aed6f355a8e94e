//! Differentiable operations on [`Var`].

use std::rc::Rc;

use crate::backend::graph::Var;
use crate::backend::kernels::{self, Geometry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pointwise operations accepted by [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Tanh,
    Sigmoid,
    Add,
    Mul,
}

/// Apply a pointwise op; unary ops take one argument, binary ops two.
pub fn elementwise<'g, T: Scalar>(op: Elementwise, args: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let arity = match op {
        Elementwise::Relu | Elementwise::Tanh | Elementwise::Sigmoid => 1,
        Elementwise::Add | Elementwise::Mul => 2,
    };
    if args.len() != arity {
        return Err(Error::Invalid(format!("{op:?} takes {arity} argument(s), got {}", args.len())));
    }
    match op {
        Elementwise::Relu => Ok(args[0].relu()),
        Elementwise::Tanh => Ok(args[0].tanh()),
        Elementwise::Sigmoid => Ok(args[0].sigmoid()),
        Elementwise::Add => args[0].add(&args[1]),
        Elementwise::Mul => args[0].mul(&args[1]),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("axis {i}"),
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Flat source offsets for every element of `out`.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let offsets = broadcast_offsets(shape, g.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    let data = out.data_mut();
    for (v, &o) in g.data().iter().zip(&offsets) {
        data[o] += *v;
    }
    out
}

fn binary<'g, T: Scalar>(
    op: &'static str,
    a: &Var<'g, T>,
    b: &Var<'g, T>,
    f: impl Fn(T, T) -> T,
    da: impl Fn(T, T, T) -> T + 'static,
    db: impl Fn(T, T, T) -> T + 'static,
) -> Result<Var<'g, T>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(op, av.shape(), bv.shape())?;
    let (oa, ob) = if av.shape() == bv.shape() {
        let idx: Vec<usize> = (0..av.numel()).collect();
        (idx.clone(), idx)
    } else {
        (broadcast_offsets(av.shape(), &out_shape), broadcast_offsets(bv.shape(), &out_shape))
    };
    let data: Vec<T> = oa.iter().zip(&ob).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect();
    let value = Tensor::from_vec(out_shape.clone(), data)?;
    let (oa, ob) = (Rc::new(oa), Rc::new(ob));
    Ok(a.graph().record(
        value,
        &[*a, *b],
        Box::new(move |g| {
            let ga: Vec<T> = g
                .data()
                .iter()
                .zip(oa.iter().zip(ob.iter()))
                .map(|(&gv, (&i, &j))| da(gv, av.data()[i], bv.data()[j]))
                .collect();
            let gb: Vec<T> = g
                .data()
                .iter()
                .zip(oa.iter().zip(ob.iter()))
                .map(|(&gv, (&i, &j))| db(gv, av.data()[i], bv.data()[j]))
                .collect();
            let ga = Tensor::from_vec(out_shape.clone(), ga).expect("shape");
            let gb = Tensor::from_vec(out_shape.clone(), gb).expect("shape");
            vec![Some(reduce_to(&ga, av.shape())), Some(reduce_to(&gb, bv.shape()))]
        }),
    ))
}

fn unary<'g, T: Scalar>(x: &Var<'g, T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
    let xv = x.value();
    let y = xv.map(&f);
    let yv = Rc::new(y.clone());
    x.graph().record(
        y,
        &[*x],
        Box::new(move |g| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gv, (&xi, &yi))| gv * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_vec(xv.shape().to_vec(), data).expect("shape"))]
        }),
    )
}

fn expect_rank<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("{what} rank"),
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        binary("add", self, other, |a, b| a + b, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        binary("sub", self, other, |a, b| a - b, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        binary("mul", self, other, |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a)
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        unary(self, move |x| x * c, move |_, _| c)
    }

    /// `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&self) -> Var<'g, T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn tanh(&self) -> Var<'g, T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let xv = self.value();
        let old = xv.shape().to_vec();
        let y = (*xv).clone().reshape(shape)?;
        Ok(self.graph().record(
            y,
            &[*self],
            Box::new(move |g| vec![Some(g.clone().reshape(old.clone()).expect("reshape back"))]),
        ))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.graph().record(
            Tensor::scalar(xv.sum()),
            &[*self],
            Box::new(move |g| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]),
        )
    }

    pub fn mean(&self) -> Var<'g, T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Cross-correlation with weight `[O, C, k, k]` (k odd) and optional bias `[O]`.
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, stride: usize, padding: usize) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let geom = conv_geometry(&xv, &wv, bias.map(|b| b.value()).as_deref(), stride, padding)?;
        let out_ch = wv.dim(0);
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), &geom, out_ch);
        let value = Tensor::from_vec([geom.batch, out_ch, geom.oh, geom.ow], out)?;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let need = (self.requires_grad(), weight.requires_grad(), bias.map(|b| b.requires_grad()).unwrap_or(false));
        let has_bias = bias.is_some();
        Ok(self.graph().record(
            value,
            &parents,
            Box::new(move |g| {
                let gr = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), &geom, out_ch, need);
                let mut res = vec![
                    gr.dx.map(|d| Tensor::from_vec(xv.shape().to_vec(), d).expect("dx")),
                    gr.dw.map(|d| Tensor::from_vec(wv.shape().to_vec(), d).expect("dw")),
                ];
                if has_bias {
                    res.push(gr.db.map(|d| Tensor::from_vec([out_ch], d).expect("db")));
                }
                res
            }),
        ))
    }

    /// Transposed convolution with weight `[C_in, O, k, k]`.
    ///
    /// Output extent is `(H − 1)·stride − 2·padding + k + output_padding`.
    pub fn deconv2d(
        &self,
        weight: &Var<'g, T>,
        bias: Option<&Var<'g, T>>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'g, T>> {
        let (xv, wv) = (self.value(), weight.value());
        let geom = deconv_geometry(&xv, &wv, bias.map(|b| b.value()).as_deref(), stride, padding, output_padding)?;
        let in_ch = xv.dim(1);
        let bv = bias.map(|b| b.value());
        let out = kernels::deconv2d_forward(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), &geom, in_ch);
        let value = Tensor::from_vec([geom.batch, geom.channels, geom.h, geom.w], out)?;
        let mut parents = vec![*self, *weight];
        parents.extend(bias.copied());
        let need = (self.requires_grad(), weight.requires_grad(), bias.map(|b| b.requires_grad()).unwrap_or(false));
        let has_bias = bias.is_some();
        Ok(self.graph().record(
            value,
            &parents,
            Box::new(move |g| {
                let gr = kernels::deconv2d_backward(xv.data(), wv.data(), g.data(), &geom, in_ch, need);
                let mut res = vec![
                    gr.dx.map(|d| Tensor::from_vec(xv.shape().to_vec(), d).expect("dx")),
                    gr.dw.map(|d| Tensor::from_vec(wv.shape().to_vec(), d).expect("dw")),
                ];
                if has_bias {
                    res.push(gr.db.map(|d| Tensor::from_vec([geom.channels], d).expect("db")));
                }
                res
            }),
        ))
    }

    /// Affine map `x · W + b` with `x: [N, D]`, `W: [D, M]`, `b: [M]`.
    pub fn linear(&self, weight: &Var<'g, T>, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (xv, wv, bv) = (self.value(), weight.value(), bias.value());
        expect_rank("linear", "input", &xv, 2)?;
        expect_rank("linear", "weight", &wv, 2)?;
        let (n, d, m) = (xv.dim(0), xv.dim(1), wv.dim(1));
        if wv.dim(0) != d {
            return Err(Error::shape("linear", "inner dim", format!("input has {d}, weight has {}", wv.dim(0))));
        }
        if bv.shape() != [m] {
            return Err(Error::shape("linear", "bias", format!("expected [{m}], got {:?}", bv.shape())));
        }
        let mut out = vec![T::zero(); n * m];
        for row in out.chunks_mut(m) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(n, d, m, T::one(), xv.data(), d as isize, 1, wv.data(), m as isize, 1, T::one(), &mut out, m as isize, 1);
        let value = Tensor::from_vec([n, m], out)?;
        Ok(self.graph().record(
            value,
            &[*self, *weight, *bias],
            Box::new(move |g| {
                let gd = g.data();
                let mut dx = vec![T::zero(); n * d];
                T::gemm(n, m, d, T::one(), gd, m as isize, 1, wv.data(), 1, m as isize, T::zero(), &mut dx, d as isize, 1);
                let mut dw = vec![T::zero(); d * m];
                T::gemm(d, n, m, T::one(), xv.data(), 1, d as isize, gd, m as isize, 1, T::zero(), &mut dw, m as isize, 1);
                let mut db = vec![T::zero(); m];
                for row in gd.chunks(m) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![
                    Some(Tensor::from_vec([n, d], dx).expect("dx")),
                    Some(Tensor::from_vec([d, m], dw).expect("dw")),
                    Some(Tensor::from_vec([m], db).expect("db")),
                ]
            }),
        ))
    }

    /// `out[p] = Σ_q A[p,q] · x[q]` over the leading (patch) axis; `A` is constant.
    pub fn graph_aggregate(&self, adjacency: &Tensor<T>) -> Result<Var<'g, T>> {
        let xv = self.value();
        check_aggregation_matrix(adjacency)?;
        let p = adjacency.dim(0);
        if xv.rank() == 0 || xv.dim(0) != p {
            return Err(Error::shape(
                "graph_aggregate",
                "patch axis",
                format!("adjacency is {p}x{p} but stack has shape {:?}", xv.shape()),
            ));
        }
        let inner = xv.numel() / p;
        let a = Rc::new(adjacency.clone());
        let mut out = vec![T::zero(); xv.numel()];
        T::gemm(p, p, inner, T::one(), a.data(), p as isize, 1, xv.data(), inner as isize, 1, T::zero(), &mut out, inner as isize, 1);
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let shape = xv.shape().to_vec();
        Ok(self.graph().record(
            value,
            &[*self],
            Box::new(move |g| {
                let mut dx = vec![T::zero(); g.numel()];
                // A^T · g
                T::gemm(p, p, inner, T::one(), a.data(), 1, p as isize, g.data(), inner as isize, 1, T::zero(), &mut dx, inner as isize, 1);
                vec![Some(Tensor::from_vec(shape.clone(), dx).expect("shape"))]
            }),
        ))
    }

    /// 2×2 max pooling with stride 2 on `[N, C, H, W]` (H, W even).
    pub fn max_pool2(&self) -> Result<Var<'g, T>> {
        let xv = self.value();
        expect_rank("max_pool2", "input", &xv, 4)?;
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", "H/W", format!("extents {h}x{w} must be even")));
        }
        let (out, arg) = kernels::max_pool2_forward(xv.data(), n, c, h, w);
        let value = Tensor::from_vec([n, c, h / 2, w / 2], out)?;
        let shape = xv.shape().to_vec();
        Ok(self.graph().record(
            value,
            &[*self],
            Box::new(move |g| {
                let mut dx = Tensor::zeros(shape.clone());
                let d = dx.data_mut();
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean squared error against `target` (same shape).
    pub fn mse(&self, target: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mse", "operands", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let n = T::lit(a.numel() as f64);
        let loss = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.graph().record(
            Tensor::scalar(loss),
            &[*self, *target],
            Box::new(move |g| {
                let k = g.data()[0] * T::lit(2.0) / n;
                let da: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| k * (x - y)).collect();
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                vec![
                    Some(Tensor::from_vec(a.shape().to_vec(), da).expect("shape")),
                    Some(Tensor::from_vec(a.shape().to_vec(), db).expect("shape")),
                ]
            }),
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against a constant label.
    pub fn bce_with_logits(&self, label: T) -> Result<Var<'g, T>> {
        let z = self.value();
        if !z.all_finite() {
            return Err(Error::NonFinite {
                what: "logits",
                name: "bce_with_logits".into(),
            });
        }
        let n = T::lit(z.numel() as f64);
        // softplus(z) - label*z, computed stably
        let loss = z.data().iter().map(|&v| softplus(v) - label * v).sum::<T>() / n;
        Ok(self.graph().record(
            Tensor::scalar(loss),
            &[*self],
            Box::new(move |g| {
                let k = g.data()[0] / n;
                let d = z.data().iter().map(|&v| k * (sigmoid(v) - label)).collect();
                vec![Some(Tensor::from_vec(z.shape().to_vec(), d).expect("shape"))]
            }),
        ))
    }
}

/// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let s0 = values[0].shape().to_vec();
    if s0.len() != 4 {
        return Err(Error::shape("concat", "rank", format!("expected rank 4, got {s0:?}")));
    }
    let (n, h, w) = (s0[0], s0[2], s0[3]);
    for (i, v) in values.iter().enumerate() {
        let s = v.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::shape("concat", format!("part {i}"), format!("{s:?} incompatible with {s0:?}")));
        }
    }
    let chans: Vec<usize> = values.iter().map(|v| v.dim(1)).collect();
    let total: usize = chans.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for (v, &c) in values.iter().zip(&chans) {
            out.extend_from_slice(&v.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let value = Tensor::from_vec([n, total, h, w], out)?;
    Ok(first.graph().record(
        value,
        parts,
        Box::new(move |g| {
            let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gv, &c) in grads.iter_mut().zip(&chans) {
                    gv.extend_from_slice(&g.data()[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::from_vec([n, c, h, w], d).expect("shape")))
                .collect()
        }),
    ))
}

/// Sum of equally shaped variables.
pub fn sum_all<'g, T: Scalar>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let (first, rest) = parts.split_first().ok_or_else(|| Error::Invalid("sum of zero tensors".into()))?;
    rest.iter().try_fold(*first, |acc, v| acc.add(v))
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn check_aggregation_matrix<T: Scalar>(a: &Tensor<T>) -> Result<()> {
    if a.rank() != 2 || a.dim(0) != a.dim(1) {
        return Err(Error::shape("graph_aggregate", "adjacency", format!("must be square, got {:?}", a.shape())));
    }
    let p = a.dim(0);
    let d = a.data();
    for i in 0..p {
        for j in (i + 1)..p {
            if d[i * p + j] != d[j * p + i] {
                return Err(Error::Adjacency(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, out_ch: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(Error::shape(op, "bias", format!("expected [{out_ch}], got {:?}", b.shape())));
        }
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Result<Geometry> {
    expect_rank("conv2d", "input", x, 4)?;
    expect_rank("conv2d", "weight", w, 4)?;
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (o, wc, k, k2) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if k != k2 {
        return Err(Error::shape("conv2d", "kernel", format!("kernel must be square, got {k}x{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::shape("conv2d", "kernel", format!("kernel extent must be odd, got {k}")));
    }
    if wc != c {
        return Err(Error::shape("conv2d", "C (channels)", format!("input has {c}, weight expects {wc}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d: stride must be >= 1".into()));
    }
    if h + 2 * pad < k {
        return Err(Error::shape("conv2d", "H", format!("H + 2·padding = {} < kernel {k}", h + 2 * pad)));
    }
    if wd + 2 * pad < k {
        return Err(Error::shape("conv2d", "W", format!("W + 2·padding = {} < kernel {k}", wd + 2 * pad)));
    }
    check_bias("conv2d", bias, o)?;
    Ok(Geometry {
        batch: n,
        channels: c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh: (h + 2 * pad - k) / stride + 1,
        ow: (wd + 2 * pad - k) / stride + 1,
    })
}

fn deconv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Geometry> {
    expect_rank("deconv2d", "input", x, 4)?;
    expect_rank("deconv2d", "weight", w, 4)?;
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (wc, o, k, k2) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if k != k2 {
        return Err(Error::shape("deconv2d", "kernel", format!("kernel must be square, got {k}x{k2}")));
    }
    if wc != c {
        return Err(Error::shape("deconv2d", "C (channels)", format!("input has {c}, weight expects {wc}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("deconv2d: stride must be >= 1".into()));
    }
    if output_padding >= stride && output_padding > 0 {
        return Err(Error::Invalid(format!("deconv2d: output_padding {output_padding} must be < stride {stride}")));
    }
    let full_h = (h - 1) * stride + k + output_padding;
    let full_w = (wd - 1) * stride + k + output_padding;
    if full_h <= 2 * pad || full_w <= 2 * pad {
        return Err(Error::shape("deconv2d", "H/W", format!("padding {pad} leaves an empty output")));
    }
    check_bias("deconv2d", bias, o)?;
    Ok(Geometry {
        batch: n,
        channels: o,
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
        k,
        stride,
        pad,
        oh: h,
        ow: wd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::graph::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.5, 2.0, 0.0]), true);
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 2.0, 0.0]);
        let grads = g.backward(y.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[0.5]), true);
        assert!(elementwise(Elementwise::Add, &[x]).is_err());
        let y = elementwise(Elementwise::Sigmoid, &[x]).unwrap();
        assert!((y.item() - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_add_and_reduction() {
        let g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = g.leaf(t(&[3], &[10., 20., 30.]), true);
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let grads = g.backward(c.sum()).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2., 2., 2.]);
        let bad = g.leaf(t(&[2], &[0., 0.]), false);
        let err = a.add(&bad).unwrap_err();
        assert!(err.to_string().contains("axis 1"), "{err}");
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_axis() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 2, 5, 5]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = x.conv2d(&w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("C (channels)"), "{err}");
        let w_even = g.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(x.conv2d(&w_even, None, 1, 0).is_err());
    }

    #[test]
    fn aggregation_rejects_asymmetric() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros([2, 1]));
        let a = t(&[2, 2], &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(x.graph_aggregate(&a), Err(Error::Adjacency(_))));
        let sq = t(&[2, 1], &[1.0, 1.0]);
        assert!(x.graph_aggregate(&sq).is_err());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([4, 1]));
        let l = z.bce_with_logits(1.0).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let inf = g.constant(t(&[1], &[f64::INFINITY]));
        assert!(inf.bce_with_logits(1.0).is_err());
    }

    #[test]
    fn concat_splits_gradient_back() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let b = g.leaf(Tensor::full([1, 2, 2, 2], 2.0), true);
        let c = concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2, 2]);
        let w = g.constant(Tensor::from_vec([1, 3, 2, 2], (0..12).map(|v| v as f64).collect()).unwrap());
        let grads = g.backward(c.mul(&w).unwrap().sum()).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0., 1., 2., 3.]);
        assert_eq!(grads.get(b).unwrap().data(), &[4., 5., 6., 7., 8., 9., 10., 11.]);
    }
}
