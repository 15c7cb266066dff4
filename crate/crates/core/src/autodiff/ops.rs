use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{some_if, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::real::{c, Real};
use crate::tensor::{split_at_axis, Tensor};

/// How the operands of a binary elementwise op line up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Left operand is a single value applied to every element of the right.
    LeftScalar,
    RightScalar,
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_kind<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.len() == 1 {
        Ok(Broadcast::LeftScalar)
    } else if b.len() == 1 {
        Ok(Broadcast::RightScalar)
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

/// Reduces a full-shape gradient to the shape of a (possibly scalar) operand.
fn collapse<T: Real>(full: Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    if full.shape() == target.shape() {
        full
    } else {
        let s = full.sum();
        Tensor::full(target.shape(), s)
    }
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, op: BinOp, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av, bv, name)?;
        let f = move |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let out = match kind {
            Broadcast::Same => av.zip_map(bv, f)?,
            Broadcast::LeftScalar => {
                let s = av.item();
                bv.map(|y| f(s, y))
            }
            Broadcast::RightScalar => {
                let s = bv.item();
                av.map(|x| f(x, s))
            }
        };
        let backward = move |ctx: &super::BackwardCtx<'_, T>| {
            let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
            let g = ctx.grad_out;
            let at = |t: &Tensor<T>, i: usize| if t.len() == 1 { t.data()[0] } else { t.data()[i] };
            let full = |h: &dyn Fn(usize, T) -> T| Tensor::from_fn(g.shape(), |i| h(i, g.data()[i]));
            let ga = some_if(ctx.needs[0], || {
                let t = match op {
                    BinOp::Add | BinOp::Sub => g.clone(),
                    BinOp::Mul => full(&|i, gv| gv * at(y, i)),
                    BinOp::Div => full(&|i, gv| gv / at(y, i)),
                };
                collapse(t, x)
            });
            let gb = some_if(ctx.needs[1], || {
                let t = match op {
                    BinOp::Add => g.clone(),
                    BinOp::Sub => g.map(|v| -v),
                    BinOp::Mul => full(&|i, gv| gv * at(x, i)),
                    BinOp::Div => full(&|i, gv| {
                        let yv = at(y, i);
                        -gv * at(x, i) / (yv * yv)
                    }),
                };
                collapse(t, y)
            });
            vec![ga, gb]
        };
        self.push(name, &[a, b], out, Box::new(backward))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Div, "div")
    }

    /// Elementwise `f(x)` with derivative `df(x, f(x))`.
    fn unary(
        &mut self,
        x: Var,
        name: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(
            name,
            &[x],
            out,
            Box::new(move |ctx| {
                let (xv, yv, g) = (ctx.inputs[0].data(), ctx.output.data(), ctx.grad_out);
                vec![Some(Tensor::from_fn(g.shape(), |i| g.data()[i] * df(xv[i], yv[i])))]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "neg", |v| -v, |_, _| -T::one())
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary(x, "scale", move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Result<Var> {
        self.unary(x, "add_scalar", move |v| v + k, |_, _| T::one())
    }

    /// `k - x`
    pub fn rsub_scalar(&mut self, k: T, x: Var) -> Result<Var> {
        self.unary(x, "rsub_scalar", move |v| k - v, |_, _| -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", |v| v * v, |v, _| v + v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sqrt", |v| v.sqrt(), |_, y| c::<T>(0.5) / y)
    }

    /// Absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            "abs",
            |v| v.abs(),
            |v, _| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", gelu_value, |v, _| gelu_grad(v))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            &[x],
            out,
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad_out.item()))]),
        )
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = c::<T>(xv.len() as f64);
        let out = Tensor::scalar(xv.sum() / n);
        self.push(
            "mean",
            &[x],
            out,
            Box::new(move |ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad_out.item() / n))]),
        )
    }

    /// Mean over `axes`; reduced axes are removed from the shape.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let red = Reduction::new(xv.shape(), axes)?;
        let n = c::<T>(red.count as f64);
        let mut out = Tensor::zeros(&red.out_shape);
        for (i, &o) in red.map.iter().enumerate() {
            out.data_mut()[o] += xv.data()[i];
        }
        for v in out.data_mut() {
            *v /= n;
        }
        let map = red.map;
        self.push(
            "reduce_mean",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                vec![Some(Tensor::from_fn(ctx.inputs[0].shape(), |i| g[map[i]] / n))]
            }),
        )
    }

    /// Population variance (divide by N) over `axes`.
    pub fn reduce_var(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let red = Reduction::new(xv.shape(), axes)?;
        let n = c::<T>(red.count as f64);
        let mut mean = vec![T::zero(); red.out_len()];
        for (i, &o) in red.map.iter().enumerate() {
            mean[o] += xv.data()[i];
        }
        for v in &mut mean {
            *v /= n;
        }
        let mut out = Tensor::zeros(&red.out_shape);
        for (i, &o) in red.map.iter().enumerate() {
            let d = xv.data()[i] - mean[o];
            out.data_mut()[o] += d * d;
        }
        for v in out.data_mut() {
            *v /= n;
        }
        let map = red.map;
        self.push(
            "reduce_var",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let xd = ctx.inputs[0].data();
                let two = c::<T>(2.0);
                vec![Some(Tensor::from_fn(ctx.inputs[0].shape(), |i| {
                    g[map[i]] * two * (xd[i] - mean[map[i]]) / n
                }))]
            }),
        )
    }

    /// Matrix product `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (batch, m, k, n) = match (av.shape(), bv.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n),
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(shape_err("matmul", format!("{:?} · {:?}", sa, sb))),
        };
        let out_shape: Vec<usize> = if av.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let mut out = Tensor::zeros(&out_shape);
        for bi in 0..batch {
            gemm_nn(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "matmul",
            &[a, b],
            out,
            Box::new(move |ctx| {
                let (x, y, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                let ga = some_if(ctx.needs[0], || {
                    let mut t = Tensor::zeros(x.shape());
                    for bi in 0..batch {
                        gemm_nt(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &y.data()[bi * k * n..(bi + 1) * k * n],
                            &mut t.data_mut()[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    t
                });
                let gb = some_if(ctx.needs[1], || {
                    let mut t = Tensor::zeros(y.shape());
                    for bi in 0..batch {
                        gemm_tn(
                            &x.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut t.data_mut()[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    t
                });
                vec![ga, gb]
            }),
        )
    }

    /// Token-wise affine map `x[..., Cin] · w[Cin,Cout] + bias[Cout]`; all
    /// leading axes of `x` are treated as tokens.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, cin, cout) = match (xv.shape().split_last(), wv.shape()) {
            (Some((&ci, lead)), &[ci2, co]) if ci == ci2 && !lead.is_empty() => {
                (lead.iter().product::<usize>(), ci, co)
            }
            _ => return Err(shape_err("linear", format!("{:?} · {:?}", xv.shape(), wv.shape()))),
        };
        let mut oshape = xv.shape().to_vec();
        *oshape.last_mut().unwrap() = cout;
        let mut out = Tensor::zeros(&oshape);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {} outputs", bv.shape(), cout),
                ));
            }
            for row in out.data_mut().chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_nn(xv.data(), wv.data(), out.data_mut(), n, cin, cout);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            &inputs,
            out,
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                let gx = some_if(ctx.needs[0], || {
                    let mut t = Tensor::zeros(xv.shape());
                    gemm_nt(g.data(), wv.data(), t.data_mut(), n, cout, cin);
                    t
                });
                let gw = some_if(ctx.needs[1], || {
                    let mut t = Tensor::zeros(wv.shape());
                    gemm_tn(xv.data(), g.data(), t.data_mut(), n, cin, cout);
                    t
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    res.push(some_if(ctx.needs[2], || {
                        let mut t = Tensor::zeros(&[cout]);
                        for row in g.data().chunks(cout) {
                            for (a, &b) in t.data_mut().iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        t
                    }));
                }
                res
            }),
        )
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.check_axis(axis)?;
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        let mut out = xv.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let d = out.data_mut();
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(d[idx(j)]);
                }
                let mut s = T::zero();
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    d[idx(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    d[idx(j)] /= s;
                }
            }
        }
        self.push(
            "softmax",
            &[x],
            out,
            Box::new(move |ctx| {
                let (y, g) = (ctx.output.data(), ctx.grad_out.data());
                let mut gx = Tensor::zeros(ctx.output.shape());
                let d = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let mut dotp = T::zero();
                        for j in 0..len {
                            dotp += g[idx(j)] * y[idx(j)];
                        }
                        for j in 0..len {
                            d[idx(j)] = y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along `axis`; every other extent must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis { axis, rank: base.len() });
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &sz) in xs.iter().zip(&sizes) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.push(
            "concat",
            xs,
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut offsets = Vec::with_capacity(sizes.len());
                let mut acc = 0;
                for &s in &sizes {
                    offsets.push(acc);
                    acc += s;
                }
                ctx.inputs
                    .iter()
                    .enumerate()
                    .map(|(k, inp)| {
                        some_if(ctx.needs[k], || {
                            let sz = sizes[k];
                            let mut d = Vec::with_capacity(inp.len());
                            for o in 0..outer {
                                let start = (o * total + offsets[k]) * inner;
                                d.extend_from_slice(&g[start..start + sz * inner]);
                            }
                            Tensor::new(inp.shape(), d).expect("concat grad shape")
                        })
                    })
                    .collect()
            }),
        )
    }

    /// The sub-range `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.check_axis(axis)?;
        let full = xv.shape()[axis];
        if len == 0 || start + len > full {
            return Err(shape_err(
                "narrow",
                format!("range {}..{} on extent {}", start, start + len, full),
            ));
        }
        let (outer, _, inner) = split_at_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&xv.data()[s..s + len * inner]);
        }
        let out = Tensor::new(&shape, data)?;
        self.push(
            "narrow",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                for o in 0..outer {
                    let s = (o * full + start) * inner;
                    gx.data_mut()[s..s + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Layer normalisation over the last axis of `x[..., C]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let Some((&ch, lead)) = xv.shape().split_last() else {
            return Err(shape_err("layer_norm", "scalar input".into()));
        };
        let n: usize = lead.iter().product();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [ch] || bv.shape() != [ch] {
            return Err(shape_err(
                "layer_norm",
                format!("affine {:?}/{:?} for C={}", gv.shape(), bv.shape(), ch),
            ));
        }
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..n {
            let row = &xv.data()[r * ch..(r + 1) * ch];
            let (mu, inv) = row_stats(row, eps);
            let orow = &mut out.data_mut()[r * ch..(r + 1) * ch];
            for j in 0..ch {
                orow[j] = (row[j] - mu) * inv * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(
            "layer_norm",
            &[x, gamma, beta],
            out,
            Box::new(move |ctx| {
                let (xv, gv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad_out);
                let mut gx = Tensor::zeros(xv.shape());
                let mut gg = Tensor::zeros(&[ch]);
                let mut gb = Tensor::zeros(&[ch]);
                let nc = c::<T>(ch as f64);
                let mut xhat = vec![T::zero(); ch];
                let mut dxhat = vec![T::zero(); ch];
                for r in 0..n {
                    let row = &xv.data()[r * ch..(r + 1) * ch];
                    let grow = &g.data()[r * ch..(r + 1) * ch];
                    let (mu, inv) = row_stats(row, eps);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..ch {
                        xhat[j] = (row[j] - mu) * inv;
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                        gg.data_mut()[j] += grow[j] * xhat[j];
                        gb.data_mut()[j] += grow[j];
                    }
                    m1 /= nc;
                    m2 /= nc;
                    let out = &mut gx.data_mut()[r * ch..(r + 1) * ch];
                    for j in 0..ch {
                        out[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![
                    some_if(ctx.needs[0], || gx),
                    some_if(ctx.needs[1], || gg),
                    some_if(ctx.needs[2], || gb),
                ]
            }),
        )
    }
}

fn row_stats<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = c::<T>(row.len() as f64);
    let mu = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
    (mu, T::one() / (var + eps).sqrt())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_value<T: Real>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = c::<T>(GELU_K);
    let a = c::<T>(GELU_A);
    let t = (k * (x + a * x * x * x)).tanh();
    let half = c::<T>(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a * x * x)
}

/// Index bookkeeping for reductions over an arbitrary axis set.
struct Reduction {
    out_shape: Vec<usize>,
    /// input flat index -> output flat index
    map: Vec<usize>,
    count: usize,
}

impl Reduction {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::InvalidAxis {
                    axis: a,
                    rank: shape.len(),
                });
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&s, _)| s)
            .collect();
        let count = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&s, _)| s)
            .product();
        // output strides laid over the input axes (0 for reduced axes)
        let mut ostride = vec![0usize; shape.len()];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            if !reduced[i] {
                ostride[i] = acc;
                acc *= shape[i];
            }
        }
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(&ostride).map(|(a, b)| a * b).sum());
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self { out_shape, map, count })
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let s = tape.add(a, b).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let k = tape.constant(Tensor::scalar(2.0));
        let d = tape.div(b, k).unwrap();
        assert_eq!(tape.value(d).data(), &[1.5, 2.0]);
        let bad = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn mul_by_zero_gives_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 4.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[1], &[2.0]));
        let b = tape.param(t(&[1], &[5.0]));
        let y = tape.mul(a, b).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, 1.0, 2.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 1.0, 2.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
        assert!(tape.matmul(r, r).is_err());
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let big = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(big, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let l3 = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.softmax(l3, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert!(tape.softmax(l3, 1).is_err());
    }

    #[test]
    fn mean_and_population_variance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.reduce_mean(x, &[0]).unwrap();
        assert_eq!(tape.value(m).item(), 2.0);
        let v = tape.reduce_var(x, &[0]).unwrap();
        assert!((tape.value(v).item() - 2.0 / 3.0).abs() < 1e-15);
        let k = tape.constant(Tensor::full(&[2, 5], 0.75));
        let v = tape.reduce_var(k, &[0, 1]).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
        assert_eq!(tape.reduce_mean(x, &[]), Err(Error::EmptyReduction));
    }

    #[test]
    fn reduce_over_middle_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let m = tape.reduce_mean(x, &[1]).unwrap();
        assert_eq!(tape.shape(m), &[2, 2]);
        assert_eq!(tape.value(m).data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_shapes_and_split_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[1, 4, 8, 8, 8], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 4, 8, 8, 8], |i| -(i as f64)));
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cat), &[1, 8, 8, 8, 8]);
        let parts = tape.split(cat, 1, &[4, 4]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        let single = tape.concat(&[a], 1).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let odd = tape.constant(Tensor::zeros(&[1, 4, 8, 8, 7]));
        assert!(tape.concat(&[a, odd], 1).is_err());
    }

    #[test]
    fn layer_norm_normalises_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_known_points() {
        assert_eq!(gelu_value(0.0f64), 0.0);
        assert!((gelu_value(3.0f64) - 2.996_363).abs() < 1e-5);
        assert!((gelu_grad(0.0f64) - 0.5).abs() < 1e-15);
    }
}
