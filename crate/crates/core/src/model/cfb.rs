use alloc::format;
use alloc::string::String;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::model::params::{Init, Registry};
use crate::real::{c, Real};
use crate::volume::WindowGrid;

const LN_EPS: f64 = 1e-5;

/// Per-call switches for one fusion block.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockOptions {
    /// Skip the offset head and feed the other stream to attention unwarped.
    pub bypass_resample: bool,
    /// Use this `[3, X, Y, Z]` field instead of the estimated offsets.
    pub offset_override: Option<Var>,
}

/// Intermediate handles produced by [`CfbBlock::forward`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    /// Updated own-stream features, same shape as the input.
    pub out: Var,
    /// Offset field that was applied (absent when resampling is bypassed).
    pub offset: Option<Var>,
    /// Projected queries and keys, `[numWindows, T, C]`.
    pub q: Var,
    pub k: Var,
}

#[derive(Clone, Copy, Debug)]
struct Affine {
    w: usize,
    b: usize,
}

impl Affine {
    fn linear(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: reg.add(format!("{name}.w"), &[cin, cout], Init::FanIn(cin)),
            b: reg.add(format!("{name}.b"), &[cout], Init::Zeros),
        }
    }

    fn norm(reg: &mut Registry, name: &str, ch: usize) -> Self {
        Self {
            w: reg.add(format!("{name}.g"), &[ch], Init::Ones),
            b: reg.add(format!("{name}.b"), &[ch], Init::Zeros),
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], Some(p[self.b]))
    }

    fn normalize<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.w], p[self.b], c(LN_EPS))
    }
}

/// Cross feature blend block: offset estimation, resampling of the other
/// stream, window cross-attention (queries and values from the own stream,
/// keys from the other) and a feed-forward sublayer, both with residuals.
#[derive(Clone, Debug)]
pub struct CfbBlock {
    pub channels: usize,
    pub heads: usize,
    pub window: [usize; 3],
    pub offset_kernel: usize,
    dw: Affine,
    pw: Affine,
    norm_q: Affine,
    norm_kv: Affine,
    q: Affine,
    k: Affine,
    v: Affine,
    proj: Affine,
    norm_ffn: Affine,
    ffn1: Affine,
    ffn2: Affine,
}

impl CfbBlock {
    pub(crate) fn register(
        reg: &mut Registry,
        prefix: &str,
        channels: usize,
        heads: usize,
        window: [usize; 3],
        offset_kernel: usize,
        mlp_ratio: usize,
    ) -> Self {
        let ch = channels;
        let two = 2 * ch;
        let k3 = offset_kernel.pow(3);
        let ok = offset_kernel;
        let n = |s: &str| -> String { format!("{prefix}.{s}") };
        let dw = Affine {
            w: reg.add(n("pre.dw.w"), &[two, 1, ok, ok, ok], Init::FanIn(k3)),
            b: reg.add(n("pre.dw.b"), &[two], Init::Zeros),
        };
        let pw = Affine {
            w: reg.add(n("pre.pw.w"), &[3, two, 1, 1, 1], Init::Zeros),
            b: reg.add(n("pre.pw.b"), &[3], Init::Zeros),
        };
        Self {
            channels,
            heads,
            window,
            offset_kernel,
            dw,
            pw,
            norm_q: Affine::norm(reg, &n("norm_q"), ch),
            norm_kv: Affine::norm(reg, &n("norm_kv"), ch),
            q: Affine::linear(reg, &n("q"), ch, ch),
            k: Affine::linear(reg, &n("k"), ch, ch),
            v: Affine::linear(reg, &n("v"), ch, ch),
            proj: Affine::linear(reg, &n("proj"), ch, ch),
            norm_ffn: Affine::norm(reg, &n("norm_ffn"), ch),
            ffn1: Affine::linear(reg, &n("ffn1"), ch, mlp_ratio * ch),
            ffn2: Affine::linear(reg, &n("ffn2"), mlp_ratio * ch, ch),
        }
    }

    /// A block with its own parameter layout, for use outside the full network.
    pub fn standalone(
        channels: usize,
        heads: usize,
        window: [usize; 3],
        offset_kernel: usize,
        mlp_ratio: usize,
    ) -> (Self, super::ParamLayout) {
        let mut reg = Registry::default();
        let block = Self::register(&mut reg, "block", channels, heads, window, offset_kernel, mlp_ratio);
        (block, super::ParamLayout(reg))
    }

    /// Offset field for aligning `other` to `own`: depth-wise convolution of
    /// their channel concatenation followed by a pointwise map to 3 channels.
    pub fn pre_estimate<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], own: Var, other: Var) -> Result<Var> {
        if tape.shape(own) != tape.shape(other) {
            return Err(shape_err(
                "pre_estimate",
                format!("{:?} vs {:?}", tape.shape(own), tape.shape(other)),
            ));
        }
        let cat = tape.concat(&[own, other], 0)?;
        let (_, offset) = tape.depthwise_offset_head(
            cat,
            p[self.dw.w],
            p[self.dw.b],
            p[self.pw.w],
            p[self.pw.b],
            self.offset_kernel,
        )?;
        Ok(offset)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        own: Var,
        other: Var,
        opts: &BlockOptions,
    ) -> Result<BlockOutput> {
        if tape.shape(own) != tape.shape(other) || tape.shape(own).first() != Some(&self.channels) {
            return Err(shape_err(
                "cfb",
                format!(
                    "own {:?}, other {:?}, block width {}",
                    tape.shape(own),
                    tape.shape(other),
                    self.channels
                ),
            ));
        }
        let (aligned, offset) = if opts.bypass_resample {
            (other, None)
        } else {
            let off = match opts.offset_override {
                Some(o) => o,
                None => self.pre_estimate(tape, p, own, other)?,
            };
            (tape.trilinear_sample(other, off)?, Some(off))
        };
        let ga = tape.window_partition(own, self.window)?;
        let gb = tape.window_partition(aligned, self.window)?;
        let xa = self.norm_q.normalize(tape, p, ga.windows)?;
        let xb = self.norm_kv.normalize(tape, p, gb.windows)?;
        let q = self.q.apply(tape, p, xa)?;
        let k = self.k.apply(tape, p, xb)?;
        let v = self.v.apply(tape, p, xa)?;
        let att = tape.window_attention(q, k, v, self.heads)?;
        let proj = self.proj.apply(tape, p, att)?;
        let h = tape.add(ga.windows, proj)?;
        let n = self.norm_ffn.normalize(tape, p, h)?;
        let f = self.ffn1.apply(tape, p, n)?;
        let f = tape.gelu(f)?;
        let f = self.ffn2.apply(tape, p, f)?;
        let y = tape.add(h, f)?;
        let out = tape.window_merge(&WindowGrid { windows: y, ..ga })?;
        Ok(BlockOutput { out, offset, q, k })
    }

    /// Parameter indices of the pointwise offset head `(weight, bias)`.
    pub fn offset_head_params(&self) -> (usize, usize) {
        (self.pw.w, self.pw.b)
    }
}
