//! Multi-head attention restricted to non-overlapping windows.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;

use crate::autodiff::{some_if, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::dot;
use crate::real::{c, Real};
use crate::tensor::Tensor;

/// Geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
struct Dims {
    windows: usize,
    tokens: usize,
    channels: usize,
    heads: usize,
}

impl Dims {
    fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Offset of token `t` of window `w` in a `[nW, T, C]` buffer.
    fn row(&self, w: usize, t: usize) -> usize {
        (w * self.tokens + t) * self.channels
    }

    /// Offset of the `T×T` block for (window, head) in a `[nW, H, T, T]` buffer.
    fn block(&self, w: usize, h: usize) -> usize {
        (w * self.heads + h) * self.tokens * self.tokens
    }
}

fn check_inputs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: Option<&Tensor<T>>, heads: usize) -> Result<Dims> {
    let &[windows, tokens, channels] = q.shape() else {
        return Err(shape_err(
            "window_attention",
            format!("q must be [nW,T,C], got {:?}", q.shape()),
        ));
    };
    if k.shape() != q.shape() || v.is_some_and(|v| v.shape() != q.shape()) {
        return Err(shape_err(
            "window_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.map(|v| v.shape())),
        ));
    }
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Indivisible {
            what: "attention heads",
            extent: channels,
            divisor: heads,
        });
    }
    Ok(Dims {
        windows,
        tokens,
        channels,
        heads,
    })
}

fn gather_head<T: Real>(src: &[T], d: &Dims, w: usize, h: usize, dst: &mut [T]) {
    let hd = d.head_dim();
    for t in 0..d.tokens {
        let r = d.row(w, t) + h * hd;
        dst[t * hd..(t + 1) * hd].copy_from_slice(&src[r..r + hd]);
    }
}

fn scaled_logits<T: Real>(q: &[T], k: &[T], d: &Dims, out: &mut [T]) {
    let hd = d.head_dim();
    let scale = T::one() / c::<T>(hd as f64).sqrt();
    let (mut qh, mut kh) = (vec![T::zero(); d.tokens * hd], vec![T::zero(); d.tokens * hd]);
    for w in 0..d.windows {
        for h in 0..d.heads {
            gather_head(q, d, w, h, &mut qh);
            gather_head(k, d, w, h, &mut kh);
            let blk = &mut out[d.block(w, h)..d.block(w, h) + d.tokens * d.tokens];
            for i in 0..d.tokens {
                for j in 0..d.tokens {
                    blk[i * d.tokens + j] = dot(&qh[i * hd..(i + 1) * hd], &kh[j * hd..(j + 1) * hd]) * scale;
                }
            }
        }
    }
}

fn softmax_rows<T: Real>(x: &mut [T], n: usize) {
    for row in x.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Scaled dot-product logits `QKᵀ/√d` for every window and head: `[nW, H, T, T]`.
pub fn attention_logits<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let d = check_inputs(q, k, None, heads)?;
    let mut out = Tensor::zeros(&[d.windows, d.heads, d.tokens, d.tokens]);
    scaled_logits(q.data(), k.data(), &d, out.data_mut());
    Ok(out)
}

/// Attention weights (softmax of [`attention_logits`] over keys): `[nW, H, T, T]`.
pub fn attention_probs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let mut p = attention_logits(q, k, heads)?;
    let t = p.shape()[3];
    softmax_rows(p.data_mut(), t);
    Ok(p)
}

impl<T: Real> Tape<T> {
    /// `softmax(Q Kᵀ / √d) V` independently per window and head.
    ///
    /// `q`, `k`, `v` are `[numWindows, T, C]`; head `h` uses channels
    /// `h·C/H .. (h+1)·C/H`. The result has the same layout with heads
    /// concatenated along channels.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = check_inputs(qv, kv, Some(vv), heads)?;
        let hd = d.head_dim();
        let tt = d.tokens * d.tokens;
        let mut probs = vec![T::zero(); d.windows * d.heads * tt];
        scaled_logits(qv.data(), kv.data(), &d, &mut probs);
        softmax_rows(&mut probs, d.tokens);

        let mut out = Tensor::zeros(qv.shape());
        {
            let (od, vd) = (out.data_mut(), vv.data());
            for w in 0..d.windows {
                for h in 0..d.heads {
                    let p = &probs[d.block(w, h)..d.block(w, h) + tt];
                    for i in 0..d.tokens {
                        let orow = d.row(w, i) + h * hd;
                        for j in 0..d.tokens {
                            let pij = p[i * d.tokens + j];
                            let vrow = d.row(w, j) + h * hd;
                            for e in 0..hd {
                                od[orow + e] += pij * vd[vrow + e];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "window_attention",
            &[q, k, v],
            out,
            Box::new(move |ctx| {
                let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
                let g = ctx.grad_out.data();
                let shape = ctx.inputs[0].shape();
                let scale = T::one() / c::<T>(hd as f64).sqrt();
                let mut gq = Tensor::zeros(shape);
                let mut gk = Tensor::zeros(shape);
                let mut gv = Tensor::zeros(shape);
                let mut ds = vec![T::zero(); tt];
                let (mut gh, mut vh) = (vec![T::zero(); d.tokens * hd], vec![T::zero(); d.tokens * hd]);
                for w in 0..d.windows {
                    for h in 0..d.heads {
                        let p = &probs[d.block(w, h)..d.block(w, h) + tt];
                        gather_head(g, &d, w, h, &mut gh);
                        gather_head(vd, &d, w, h, &mut vh);
                        // dV = Pᵀ dO
                        let gvd = gv.data_mut();
                        for i in 0..d.tokens {
                            for j in 0..d.tokens {
                                let pij = p[i * d.tokens + j];
                                let r = d.row(w, j) + h * hd;
                                for e in 0..hd {
                                    gvd[r + e] += pij * gh[i * hd + e];
                                }
                            }
                        }
                        // dS = P ⊙ (dP − rowsum(dP ⊙ P)),  dP = dO Vᵀ
                        for i in 0..d.tokens {
                            let mut acc = T::zero();
                            for j in 0..d.tokens {
                                let dp = dot(&gh[i * hd..(i + 1) * hd], &vh[j * hd..(j + 1) * hd]);
                                ds[i * d.tokens + j] = dp;
                                acc += dp * p[i * d.tokens + j];
                            }
                            for j in 0..d.tokens {
                                let ij = i * d.tokens + j;
                                ds[ij] = p[ij] * (ds[ij] - acc) * scale;
                            }
                        }
                        // dQ = dS K,  dK = dSᵀ Q
                        let (gqd, gkd) = (gq.data_mut(), gk.data_mut());
                        for i in 0..d.tokens {
                            let ri = d.row(w, i) + h * hd;
                            for j in 0..d.tokens {
                                let s = ds[i * d.tokens + j];
                                let rj = d.row(w, j) + h * hd;
                                for e in 0..hd {
                                    gqd[ri + e] += s * kd[rj + e];
                                    gkd[rj + e] += s * qd[ri + e];
                                }
                            }
                        }
                    }
                }
                vec![
                    some_if(ctx.needs[0], || gq),
                    some_if(ctx.needs[1], || gk),
                    some_if(ctx.needs[2], || gv),
                ]
            }),
        )
    }
}
