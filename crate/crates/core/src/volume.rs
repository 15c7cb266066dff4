//! Differentiable 3D operators on `[C, X, Y, Z]` feature volumes.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{some_if, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{axpy, dot};
use crate::real::{c, Real};
use crate::tensor::{split_at_axis, Tensor};

/// Geometry of a (grouped) 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// Stride-1 convolution that preserves spatial extents (`kernel` must be odd).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [kernel; 3],
            stride: 1,
            padding: [kernel / 2; 3],
            groups,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    /// Non-overlapping `k³` kernel with stride `k`.
    pub fn patchify(in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: k,
            padding: [0; 3],
            groups: 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kx, ky, kz] = self.kernel;
        [self.out_channels, self.in_channels / self.groups, kx, ky, kz]
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || !self.in_channels.is_multiple_of(self.groups)
            || !self.out_channels.is_multiple_of(self.groups)
        {
            return Err(Error::GroupMismatch(format!(
                "in {} / out {} channels with {} groups",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if self.kernel.contains(&0) || self.stride == 0 {
            return Err(shape_err(
                "conv3d",
                format!("degenerate kernel {:?} stride {}", self.kernel, self.stride),
            ));
        }
        Ok(())
    }

    pub fn output_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = dims[a] + 2 * self.padding[a];
            if span < self.kernel[a] {
                return Err(shape_err(
                    "conv3d",
                    format!("extent {} too small for kernel {}", dims[a], self.kernel[a]),
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride + 1;
        }
        Ok(out)
    }
}

/// Output indices `o` in `[lo, hi)` for which `o*stride + off` lands in `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = in_len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Shared loop nest of the three convolution kernels.
///
/// Calls `visit(oc, ic, weight_index, out_offset, in_offset, oz_lo, oz_hi, iz_lo)`
/// for every (kernel tap, output row) pair.
#[allow(clippy::too_many_arguments)]
fn conv_rows(
    spec: &ConvSpec,
    dims: [usize; 3],
    odims: [usize; 3],
    mut visit: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize),
) {
    let [kx, ky, kz] = spec.kernel;
    let [_, ys, zs] = dims;
    let [oxs, oys, ozs] = odims;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let s = spec.stride;
    for g in 0..spec.groups {
        for ocg in 0..cout_g {
            let oc = g * cout_g + ocg;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                for a in 0..kx {
                    let offx = a as isize - spec.padding[0] as isize;
                    let (xlo, xhi) = valid_range(oxs, dims[0], s, offx);
                    for b in 0..ky {
                        let offy = b as isize - spec.padding[1] as isize;
                        let (ylo, yhi) = valid_range(oys, ys, s, offy);
                        for cz in 0..kz {
                            let offz = cz as isize - spec.padding[2] as isize;
                            let (zlo, zhi) = valid_range(ozs, zs, s, offz);
                            if zlo >= zhi {
                                continue;
                            }
                            let iz_lo = (zlo as isize * s as isize + offz) as usize;
                            let widx = (((oc * cin_g + icg) * kx + a) * ky + b) * kz + cz;
                            for ox in xlo..xhi {
                                let ix = (ox as isize * s as isize + offx) as usize;
                                for oy in ylo..yhi {
                                    let iy = (oy as isize * s as isize + offy) as usize;
                                    visit(
                                        oc,
                                        ic,
                                        widx,
                                        (ox * oys + oy) * ozs,
                                        (ix * ys + iy) * zs,
                                        zlo,
                                        zhi,
                                        iz_lo,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Direct cross-correlation with zero padding on a `[C_in, X, Y, Z]` input.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let xv = self.value(x);
        let &[cin, dx, dy, dz] = xv.shape() else {
            return Err(shape_err(
                "conv3d",
                format!("input must be [C,X,Y,Z], got {:?}", xv.shape()),
            ));
        };
        if cin != spec.in_channels {
            return Err(Error::GroupMismatch(format!(
                "input has {} channels, conv expects {}",
                cin, spec.in_channels
            )));
        }
        let wv = self.value(w);
        if wv.shape() != spec.weight_shape() {
            return Err(Error::GroupMismatch(format!(
                "weight shape {:?}, expected {:?}",
                wv.shape(),
                spec.weight_shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [spec.out_channels] {
                return Err(shape_err("conv3d", format!("bias shape {:?}", self.value(b).shape())));
            }
        }
        let dims = [dx, dy, dz];
        let odims = spec.output_dims(dims)?;
        let n_in = dx * dy * dz;
        let n_out: usize = odims.iter().product();
        let s = spec.stride;
        let mut out = Tensor::zeros(&[spec.out_channels, odims[0], odims[1], odims[2]]);
        {
            let od = out.data_mut();
            if let Some(b) = bias {
                for (oc, &bv) in self.value(b).data().iter().enumerate() {
                    od[oc * n_out..(oc + 1) * n_out].fill(bv);
                }
            }
            let (xd, wd) = (xv.data(), wv.data());
            conv_rows(&spec, dims, odims, |oc, ic, wi, oo, io, zlo, zhi, izlo| {
                let wt = wd[wi];
                let orow = &mut od[oc * n_out + oo..oc * n_out + oo + zhi];
                let xrow = &xd[ic * n_in + io..];
                if s == 1 {
                    axpy(wt, &xrow[izlo..izlo + (zhi - zlo)], &mut orow[zlo..zhi]);
                } else {
                    for (j, oz) in (zlo..zhi).enumerate() {
                        orow[oz] += wt * xrow[izlo + j * s];
                    }
                }
            });
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv3d",
            &inputs,
            out,
            Box::new(move |ctx| {
                let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad_out.data());
                let gx = some_if(ctx.needs[0], || {
                    let mut t = Tensor::zeros(ctx.inputs[0].shape());
                    let td = t.data_mut();
                    conv_rows(&spec, dims, odims, |oc, ic, wi, oo, io, zlo, zhi, izlo| {
                        let wt = wd[wi];
                        let grow = &g[oc * n_out + oo..oc * n_out + oo + zhi];
                        let trow = &mut td[ic * n_in + io..];
                        if s == 1 {
                            axpy(wt, &grow[zlo..zhi], &mut trow[izlo..izlo + (zhi - zlo)]);
                        } else {
                            for (j, oz) in (zlo..zhi).enumerate() {
                                trow[izlo + j * s] += wt * grow[oz];
                            }
                        }
                    });
                    t
                });
                let gw = some_if(ctx.needs[1], || {
                    let mut t = Tensor::zeros(ctx.inputs[1].shape());
                    let td = t.data_mut();
                    conv_rows(&spec, dims, odims, |oc, ic, wi, oo, io, zlo, zhi, izlo| {
                        let grow = &g[oc * n_out + oo..oc * n_out + oo + zhi];
                        let xrow = &xd[ic * n_in + io..];
                        if s == 1 {
                            td[wi] += dot(&grow[zlo..zhi], &xrow[izlo..izlo + (zhi - zlo)]);
                        } else {
                            let mut acc = T::zero();
                            for (j, oz) in (zlo..zhi).enumerate() {
                                acc += grow[oz] * xrow[izlo + j * s];
                            }
                            td[wi] += acc;
                        }
                    });
                    t
                });
                let mut res = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    res.push(some_if(ctx.needs[2], || {
                        Tensor::from_fn(&[spec.out_channels], |oc| {
                            g[oc * n_out..(oc + 1) * n_out].iter().fold(T::zero(), |a, &v| a + v)
                        })
                    }));
                }
                res
            }),
        )
    }

    /// Backward-warp trilinear resampling: `out(c, p) = volume(c, p + offset(p))`.
    ///
    /// Offsets are `[3, X, Y, Z]` in voxel units, channel order `(dx, dy, dz)`.
    /// Sample coordinates are clamped to `[0, extent-1]` (edge replication); the
    /// offset gradient is zero where the clamp is active.
    pub fn trilinear_sample(&mut self, volume: Var, offsets: Var) -> Result<Var> {
        let vv = self.value(volume);
        let ov = self.value(offsets);
        let &[ch, xs, ys, zs] = vv.shape() else {
            return Err(shape_err(
                "trilinear_sample",
                format!("volume must be [C,X,Y,Z], got {:?}", vv.shape()),
            ));
        };
        if ov.shape() != [3, xs, ys, zs] {
            return Err(shape_err(
                "trilinear_sample",
                format!("offsets {:?} for volume {:?}", ov.shape(), vv.shape()),
            ));
        }
        let dims = [xs, ys, zs];
        let taps = SampleTaps::new(ov.data(), dims);
        let n = xs * ys * zs;
        let mut out = Tensor::zeros(vv.shape());
        {
            let od = out.data_mut();
            let vd = vv.data();
            for ci in 0..ch {
                let src = &vd[ci * n..(ci + 1) * n];
                let dst = &mut od[ci * n..(ci + 1) * n];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d = taps.interpolate(p, src);
                }
            }
        }
        self.push(
            "trilinear_sample",
            &[volume, offsets],
            out,
            Box::new(move |ctx| {
                let vd = ctx.inputs[0].data();
                let g = ctx.grad_out.data();
                let gv = some_if(ctx.needs[0], || {
                    let mut t = Tensor::zeros(ctx.inputs[0].shape());
                    let td = t.data_mut();
                    for ci in 0..ch {
                        for p in 0..n {
                            taps.scatter(p, g[ci * n + p], &mut td[ci * n..(ci + 1) * n]);
                        }
                    }
                    t
                });
                let go = some_if(ctx.needs[1], || {
                    let mut t = Tensor::zeros(&[3, xs, ys, zs]);
                    let td = t.data_mut();
                    for ci in 0..ch {
                        let src = &vd[ci * n..(ci + 1) * n];
                        for p in 0..n {
                            let gp = g[ci * n + p];
                            let d = taps.coord_grad(p, src);
                            for a in 0..3 {
                                td[a * n + p] += gp * d[a];
                            }
                        }
                    }
                    t
                });
                vec![gv, go]
            }),
        )
    }

    /// Linear resize of one axis by an integer factor (half-pixel centres,
    /// edge clamped).
    pub fn upsample_axis(&mut self, x: Var, axis: usize, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.check_axis(axis)?;
        if factor == 0 {
            return Err(shape_err("upsample", "factor 0".into()));
        }
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        let olen = len * factor;
        let taps: Vec<(usize, usize, T)> = (0..olen)
            .map(|o| {
                let q = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = Float::floor(q) as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, c::<T>(q - i0 as f64))
            })
            .collect();
        let mut shape = xv.shape().to_vec();
        shape[axis] = olen;
        let mut out = Tensor::zeros(&shape);
        {
            let (xd, od) = (xv.data(), out.data_mut());
            for o in 0..outer {
                for (j, &(i0, i1, t)) in taps.iter().enumerate() {
                    let dst = &mut od[(o * olen + j) * inner..(o * olen + j + 1) * inner];
                    let a = &xd[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
                    let b = &xd[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
                    let u = T::one() - t;
                    for k in 0..inner {
                        dst[k] = u * a[k] + t * b[k];
                    }
                }
            }
        }
        self.push(
            "upsample_axis",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let gd = gx.data_mut();
                for o in 0..outer {
                    for (j, &(i0, i1, t)) in taps.iter().enumerate() {
                        let src = &g[(o * olen + j) * inner..(o * olen + j + 1) * inner];
                        axpy(
                            T::one() - t,
                            src,
                            &mut gd[(o * len + i0) * inner..(o * len + i0 + 1) * inner],
                        );
                        axpy(t, src, &mut gd[(o * len + i1) * inner..(o * len + i1 + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Trilinear upsampling of the three spatial axes of `[C, X, Y, Z]`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(shape_err(
                "upsample",
                format!("expected [C,X,Y,Z], got {:?}", self.shape(x)),
            ));
        }
        if factor == 1 {
            return Ok(x);
        }
        let a = self.upsample_axis(x, 1, factor)?;
        let b = self.upsample_axis(a, 2, factor)?;
        self.upsample_axis(b, 3, factor)
    }

    /// Mean over every length-`k` window along `axis` (valid positions only).
    pub fn box_mean_axis(&mut self, x: Var, axis: usize, k: usize) -> Result<Var> {
        let xv = self.value(x);
        xv.check_axis(axis)?;
        let (outer, len, inner) = split_at_axis(xv.shape(), axis);
        if k == 0 || len < k {
            return Err(Error::ExtentBelowWindow { extent: len, window: k });
        }
        let olen = len - k + 1;
        let inv = T::one() / c::<T>(k as f64);
        let mut shape = xv.shape().to_vec();
        shape[axis] = olen;
        let mut out = Tensor::zeros(&shape);
        {
            let (xd, od) = (xv.data(), out.data_mut());
            for o in 0..outer {
                for j in 0..olen {
                    let dst = &mut od[(o * olen + j) * inner..(o * olen + j + 1) * inner];
                    for m in 0..k {
                        let src = &xd[(o * len + j + m) * inner..(o * len + j + m + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    for d in dst.iter_mut() {
                        *d *= inv;
                    }
                }
            }
        }
        self.push(
            "box_mean_axis",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let gd = gx.data_mut();
                for o in 0..outer {
                    for j in 0..olen {
                        let src = &g[(o * olen + j) * inner..(o * olen + j + 1) * inner];
                        for m in 0..k {
                            axpy(
                                inv,
                                src,
                                &mut gd[(o * len + j + m) * inner..(o * len + j + m + 1) * inner],
                            );
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Splits `[C, X, Y, Z]` into non-overlapping windows, giving `[numWindows, T, C]`.
    pub fn window_partition(&mut self, x: Var, window: [usize; 3]) -> Result<WindowGrid> {
        let &[ch, xs, ys, zs] = self.shape(x) else {
            return Err(shape_err(
                "window_partition",
                format!("expected [C,X,Y,Z], got {:?}", self.shape(x)),
            ));
        };
        let layout = WindowLayout::new([xs, ys, zs], window)?;
        let perm = layout.permutation();
        let tokens = perm.len();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(tokens * ch);
        for &src in &perm {
            for ci in 0..ch {
                data.push(xd[ci * tokens + src]);
            }
        }
        let out = Tensor::new(&[layout.num_windows(), layout.tokens_per_window(), ch], data)?;
        let var = self.push(
            "window_partition",
            &[x],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut gx = Tensor::zeros(ctx.inputs[0].shape());
                let gd = gx.data_mut();
                for (tok, &dst) in perm.iter().enumerate() {
                    for ci in 0..ch {
                        gd[ci * tokens + dst] = g[tok * ch + ci];
                    }
                }
                vec![Some(gx)]
            }),
        )?;
        Ok(WindowGrid {
            windows: var,
            layout,
            channels: ch,
        })
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, grid: &WindowGrid) -> Result<Var> {
        let layout = grid.layout;
        let ch = grid.channels;
        let expect = [layout.num_windows(), layout.tokens_per_window(), ch];
        if self.shape(grid.windows) != expect {
            return Err(shape_err(
                "window_merge",
                format!("windows {:?}, expected {:?}", self.shape(grid.windows), expect),
            ));
        }
        let perm = layout.permutation();
        let tokens = perm.len();
        let [xs, ys, zs] = layout.dims;
        let wd = self.value(grid.windows).data();
        let mut out = Tensor::zeros(&[ch, xs, ys, zs]);
        {
            let od = out.data_mut();
            for (tok, &dst) in perm.iter().enumerate() {
                for ci in 0..ch {
                    od[ci * tokens + dst] = wd[tok * ch + ci];
                }
            }
        }
        self.push(
            "window_merge",
            &[grid.windows],
            out,
            Box::new(move |ctx| {
                let g = ctx.grad_out.data();
                let mut data = Vec::with_capacity(tokens * ch);
                for &src in &perm {
                    for ci in 0..ch {
                        data.push(g[ci * tokens + src]);
                    }
                }
                vec![Some(Tensor::new(&expect, data).expect("window grad shape"))]
            }),
        )
    }

    /// Non-overlapping patch embedding: kernel = stride = `patch`.
    pub fn patch_embed(&mut self, x: Var, w: Var, b: Var, patch: usize) -> Result<Var> {
        let &[cin, xs, ys, zs] = self.shape(x) else {
            return Err(shape_err(
                "patch_embed",
                format!("expected [C,X,Y,Z], got {:?}", self.shape(x)),
            ));
        };
        for e in [xs, ys, zs] {
            if e % patch != 0 {
                return Err(Error::Indivisible {
                    what: "patch embedding",
                    extent: e,
                    divisor: patch,
                });
            }
        }
        let cout = self.shape(w)[0];
        self.conv3d(x, w, Some(b), ConvSpec::patchify(cin, cout, patch))
    }

    /// Strided `2³` convolution halving every extent.
    pub fn downsample(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let &[cin, xs, ys, zs] = self.shape(x) else {
            return Err(shape_err(
                "downsample",
                format!("expected [C,X,Y,Z], got {:?}", self.shape(x)),
            ));
        };
        for e in [xs, ys, zs] {
            if e % 2 != 0 {
                return Err(Error::Indivisible {
                    what: "downsample",
                    extent: e,
                    divisor: 2,
                });
            }
        }
        let cout = self.shape(w)[0];
        self.conv3d(x, w, Some(b), ConvSpec::patchify(cin, cout, 2))
    }

    /// Trilinear `×2` upsampling followed by a pointwise projection.
    pub fn upsample_project(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let cin = self.shape(x)[0];
        let cout = self.shape(w)[0];
        let up = self.upsample(x, 2)?;
        self.conv3d(up, w, Some(b), ConvSpec::pointwise(cin, cout))
    }

    /// Positional relationship head: per-channel `k³` convolution over the
    /// concatenated features, then a pointwise map to a 3-channel offset field.
    /// Returns `(inner_offset, offset)`.
    #[allow(clippy::too_many_arguments)]
    pub fn depthwise_offset_head(
        &mut self,
        features: Var,
        dw_w: Var,
        dw_b: Var,
        pw_w: Var,
        pw_b: Var,
        k: usize,
    ) -> Result<(Var, Var)> {
        let ch = self.shape(features)[0];
        let inner = self.conv3d(features, dw_w, Some(dw_b), ConvSpec::same(ch, ch, k, ch))?;
        let offset = self.conv3d(inner, pw_w, Some(pw_b), ConvSpec::pointwise(ch, 3))?;
        Ok((inner, offset))
    }
}

/// Per-voxel interpolation taps of a trilinear resample.
struct SampleTaps<T> {
    dims: [usize; 3],
    /// (i0, i1, t, inside) per axis per voxel
    axes: [Vec<(u32, u32, T, bool)>; 3],
}

impl<T: Real> SampleTaps<T> {
    fn new(offsets: &[T], dims: [usize; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        let mut axes: [Vec<(u32, u32, T, bool)>; 3] =
            [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        for p in 0..n {
            let pos = [p / (dims[1] * dims[2]), (p / dims[2]) % dims[1], p % dims[2]];
            for a in 0..3 {
                let hi = c::<T>((dims[a] - 1) as f64);
                let raw = c::<T>(pos[a] as f64) + offsets[a * n + p];
                let inside = raw >= T::zero() && raw <= hi;
                let q = raw.max(T::zero()).min(hi);
                let f = q.floor();
                let i0 = f.as_f64() as usize;
                let i1 = (i0 + 1).min(dims[a] - 1);
                axes[a].push((i0 as u32, i1 as u32, q - f, inside));
            }
        }
        Self { dims, axes }
    }

    #[inline]
    fn corners(&self, p: usize) -> ([usize; 8], [T; 8]) {
        let (x0, x1, tx, _) = self.axes[0][p];
        let (y0, y1, ty, _) = self.axes[1][p];
        let (z0, z1, tz, _) = self.axes[2][p];
        let [_, ys, zs] = self.dims;
        let id = |x: u32, y: u32, z: u32| (x as usize * ys + y as usize) * zs + z as usize;
        let (ux, uy, uz) = (T::one() - tx, T::one() - ty, T::one() - tz);
        (
            [
                id(x0, y0, z0),
                id(x0, y0, z1),
                id(x0, y1, z0),
                id(x0, y1, z1),
                id(x1, y0, z0),
                id(x1, y0, z1),
                id(x1, y1, z0),
                id(x1, y1, z1),
            ],
            [
                ux * uy * uz,
                ux * uy * tz,
                ux * ty * uz,
                ux * ty * tz,
                tx * uy * uz,
                tx * uy * tz,
                tx * ty * uz,
                tx * ty * tz,
            ],
        )
    }

    #[inline]
    fn interpolate(&self, p: usize, src: &[T]) -> T {
        let (idx, w) = self.corners(p);
        let mut acc = T::zero();
        for k in 0..8 {
            acc += w[k] * src[idx[k]];
        }
        acc
    }

    #[inline]
    fn scatter(&self, p: usize, g: T, dst: &mut [T]) {
        let (idx, w) = self.corners(p);
        for k in 0..8 {
            dst[idx[k]] += w[k] * g;
        }
    }

    /// d(out)/d(offset) along each axis for one channel.
    fn coord_grad(&self, p: usize, src: &[T]) -> [T; 3] {
        let (idx, _) = self.corners(p);
        let v: [T; 8] = core::array::from_fn(|k| src[idx[k]]);
        let (_, _, tx, inx) = self.axes[0][p];
        let (_, _, ty, iny) = self.axes[1][p];
        let (_, _, tz, inz) = self.axes[2][p];
        let (ux, uy, uz) = (T::one() - tx, T::one() - ty, T::one() - tz);
        // corner order: bit2 = x, bit1 = y, bit0 = z
        let lerp_yz =
            |base: usize| uy * uz * v[base] + uy * tz * v[base + 1] + ty * uz * v[base + 2] + ty * tz * v[base + 3];
        let dx = lerp_yz(4) - lerp_yz(0);
        let lerp_xz = |yb: usize| ux * uz * v[yb] + ux * tz * v[yb + 1] + tx * uz * v[4 + yb] + tx * tz * v[4 + yb + 1];
        let dy = lerp_xz(2) - lerp_xz(0);
        let lerp_xy = |zb: usize| ux * uy * v[zb] + ux * ty * v[2 + zb] + tx * uy * v[4 + zb] + tx * ty * v[6 + zb];
        let dz = lerp_xy(1) - lerp_xy(0);
        let gate = |inside: bool, d: T| if inside { d } else { T::zero() };
        [gate(inx, dx), gate(iny, dy), gate(inz, dz)]
    }
}

/// Window geometry over a volume.
///
/// Windows are numbered x-fastest, then y, then z; tokens inside a window
/// are ordered the same way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub dims: [usize; 3],
    pub window: [usize; 3],
}

impl WindowLayout {
    pub fn new(dims: [usize; 3], window: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 || !dims[a].is_multiple_of(window[a]) {
                return Err(Error::Indivisible {
                    what: "window partition",
                    extent: dims[a],
                    divisor: window[a],
                });
            }
        }
        Ok(Self { dims, window })
    }

    pub fn counts(&self) -> [usize; 3] {
        core::array::from_fn(|a| self.dims[a] / self.window[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Spatial (row-major `[X,Y,Z]`) index of every partitioned token.
    pub fn permutation(&self) -> Vec<usize> {
        let [nx, ny, nz] = self.counts();
        let [wx, wy, wz] = self.window;
        let [_, ys, zs] = self.dims;
        let mut perm = Vec::with_capacity(self.dims.iter().product());
        for bz in 0..nz {
            for by in 0..ny {
                for bx in 0..nx {
                    for iz in 0..wz {
                        for iy in 0..wy {
                            for ix in 0..wx {
                                let (x, y, z) = (bx * wx + ix, by * wy + iy, bz * wz + iz);
                                perm.push((x * ys + y) * zs + z);
                            }
                        }
                    }
                }
            }
        }
        perm
    }

    /// Window number containing spatial voxel `(x, y, z)`.
    pub fn window_of(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.counts();
        let [wx, wy, wz] = self.window;
        x / wx + nx * (y / wy + ny * (z / wz))
    }
}

/// Partitioned features: `windows` has shape `[numWindows, T, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub windows: Var,
    pub layout: WindowLayout,
    pub channels: usize,
}
