//! Dual-branch U-shaped fusion network.
//!
//! Each modality has its own encoder/decoder branch. At every level both
//! branches are updated by cross feature blend blocks that read the same
//! snapshot of the two streams, so the network is mirror symmetric. The
//! decoder concatenates the upsampled features with the skip features of both
//! branches. A small convolutional head turns the two finest-level streams
//! into a single fused volume.

mod cfb;
mod config;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use cfb::{BlockOptions, BlockOutput, CfbBlock};
pub use config::{ModelConfig, LEVELS};
pub use params::{Init, ParamStore};

use crate::attention::{attention_logits, attention_probs};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::ConvSpec;
use params::Registry;

/// Names, shapes and initialisers of a set of parameters.
pub struct ParamLayout(Registry);

impl ParamLayout {
    pub fn names(&self) -> &[String] {
        &self.0.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.0.shapes
    }

    pub fn numel(&self) -> usize {
        self.0.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.0.materialize(seed)
    }
}

/// Switches for a whole-network forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Remove the resampling step from every block.
    pub bypass_resample: bool,
}

/// Which half of the U a block sits in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<T> {
    pub stage: Stage,
    pub level: usize,
    /// 0 for the first-modality branch, 1 for the second.
    pub branch: usize,
    pub heads: usize,
    /// `[numWindows, H, T, T]`
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Optional observer of intermediate results.
#[derive(Clone, Debug, Default)]
pub struct Probe<T> {
    /// Encoder feature shapes per level, `(branch A, branch B)`.
    pub levels: Vec<(Vec<usize>, Vec<usize>)>,
    /// Heads used at each encoder level.
    pub heads: Vec<usize>,
    /// Filled only when `record_attention` is set.
    pub attention: Vec<AttentionRecord<T>>,
    pub record_attention: bool,
    /// Final decoder features of both branches.
    pub branch_outputs: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Probe<T> {
    pub fn with_attention() -> Self {
        Self {
            levels: Vec::new(),
            heads: Vec::new(),
            attention: Vec::new(),
            record_attention: true,
            branch_outputs: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    spec: ConvSpec,
}

impl Conv {
    fn register(reg: &mut Registry, name: &str, spec: ConvSpec) -> Self {
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
        Self {
            w: reg.add(format!("{name}.w"), &shape, Init::FanIn(fan_in)),
            b: reg.add(format!("{name}.b"), &[spec.out_channels], Init::Zeros),
            spec,
        }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        tape.conv3d(x, p[self.w], Some(p[self.b]), self.spec)
    }
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    merge: Conv,
    blocks: Vec<CfbBlock>,
}

#[derive(Clone, Debug)]
struct Branch {
    embed: Conv,
    encoder: Vec<Vec<CfbBlock>>,
    down: Vec<Conv>,
    /// Indexed by level, `0..LEVELS-1`.
    decoder: Vec<DecoderLevel>,
}

#[derive(Clone, Debug)]
struct FusionHead {
    conv1: Conv,
    conv2: Conv,
    out: Conv,
}

/// The fusion network structure; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FusionNet {
    config: ModelConfig,
    branches: [Branch; 2],
    head: FusionHead,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl FusionNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::default();
        let ch = config.level_channels();
        let blocks = |reg: &mut Registry, prefix: &str, l: usize| -> Vec<CfbBlock> {
            (0..config.blocks_per_level)
                .map(|j| {
                    CfbBlock::register(
                        reg,
                        &format!("{prefix}.{j}"),
                        ch[l],
                        config.heads[l],
                        config.window,
                        config.offset_kernel,
                        config.mlp_ratio,
                    )
                })
                .collect()
        };
        let branches = ["a", "b"].map(|br| {
            let embed = Conv::register(
                &mut reg,
                &format!("{br}.embed"),
                ConvSpec::patchify(config.in_channels, ch[0], config.patch),
            );
            let mut encoder = Vec::new();
            let mut down = Vec::new();
            for l in 0..LEVELS {
                encoder.push(blocks(&mut reg, &format!("{br}.enc{l}"), l));
                if l + 1 < LEVELS {
                    down.push(Conv::register(
                        &mut reg,
                        &format!("{br}.down{l}"),
                        ConvSpec::patchify(ch[l], ch[l + 1], 2),
                    ));
                }
            }
            let mut decoder: Vec<DecoderLevel> = (0..LEVELS - 1)
                .rev()
                .map(|l| DecoderLevel {
                    up: Conv::register(
                        &mut reg,
                        &format!("{br}.dec{l}.up"),
                        ConvSpec::pointwise(ch[l + 1], ch[l]),
                    ),
                    merge: Conv::register(
                        &mut reg,
                        &format!("{br}.dec{l}.merge"),
                        ConvSpec::pointwise(3 * ch[l], ch[l]),
                    ),
                    blocks: blocks(&mut reg, &format!("{br}.dec{l}"), l),
                })
                .collect();
            decoder.reverse();
            Branch {
                embed,
                encoder,
                down,
                decoder,
            }
        });
        let hid = config.fusion_hidden;
        let head = FusionHead {
            conv1: Conv::register(&mut reg, "fusion.conv1", ConvSpec::same(2 * ch[0], hid, 3, 1)),
            conv2: Conv::register(&mut reg, "fusion.conv2", ConvSpec::same(hid, hid, 3, 1)),
            out: Conv::register(&mut reg, "fusion.out", ConvSpec::pointwise(hid, config.in_channels)),
        };
        Ok(Self {
            config,
            branches,
            head,
            names: reg.names,
            shapes: reg.shapes,
            inits: reg.inits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout(Registry {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            inits: self.inits.clone(),
        })
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.layout().init(seed)
    }

    /// Number of scalar parameters; depends only on the configuration.
    pub fn param_count(&self) -> usize {
        self.layout().numel()
    }

    /// Checks that a parameter store fits this network.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        if params.names() != self.names.as_slice() {
            return Err(shape_err(
                "params",
                "parameter names do not match the network layout".into(),
            ));
        }
        for (t, s) in params.tensors().iter().zip(&self.shapes) {
            if t.shape() != s.as_slice() {
                return Err(shape_err(
                    "params",
                    format!("tensor {:?} where {:?} expected", t.shape(), s),
                ));
            }
        }
        Ok(())
    }

    /// Every fusion block with its `(stage, level, branch)` position.
    pub fn blocks(&self) -> Vec<(Stage, usize, usize, &CfbBlock)> {
        let mut v = Vec::new();
        for (bi, br) in self.branches.iter().enumerate() {
            for (l, bl) in br.encoder.iter().enumerate() {
                v.extend(bl.iter().map(|b| (Stage::Encoder, l, bi, b)));
            }
            for (l, d) in br.decoder.iter().enumerate() {
                v.extend(d.blocks.iter().map(|b| (Stage::Decoder, l, bi, b)));
            }
        }
        v
    }

    /// Raw (unclamped) fused volume `[C, X, Y, Z]` from two `[C, X, Y, Z]` inputs.
    ///
    /// `p` are the parameters bound to `tape` with [`ParamStore::bind`].
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        mri: Var,
        pet: Var,
        opts: &ForwardOptions,
        mut probe: Option<&mut Probe<T>>,
    ) -> Result<Var> {
        if p.len() != self.names.len() {
            return Err(shape_err(
                "forward",
                format!("{} parameters bound, {} expected", p.len(), self.names.len()),
            ));
        }
        let (sa, sb) = (tape.shape(mri).to_vec(), tape.shape(pet).to_vec());
        if sa != sb {
            return Err(shape_err("forward", format!("MRI {:?} vs PET {:?}", sa, sb)));
        }
        let &[cin, x, y, z] = sa.as_slice() else {
            return Err(shape_err("forward", format!("expected [C,X,Y,Z], got {:?}", sa)));
        };
        if cin != self.config.in_channels {
            return Err(shape_err(
                "forward",
                format!("{} input channels, model expects {}", cin, self.config.in_channels),
            ));
        }
        self.config.check_input([x, y, z])?;
        let block_opts = BlockOptions {
            bypass_resample: opts.bypass_resample,
            offset_override: None,
        };
        let [ba, bb] = &self.branches;

        let mut a = ba.embed.apply(tape, p, mri)?;
        let mut b = bb.embed.apply(tape, p, pet)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            if let Some(pr) = probe.as_deref_mut() {
                pr.levels.push((tape.shape(a).to_vec(), tape.shape(b).to_vec()));
                pr.heads.push(self.config.heads[l]);
            }
            for j in 0..self.config.blocks_per_level {
                let (na, nb) = self.blend_pair(
                    tape,
                    p,
                    (&ba.encoder[l][j], &bb.encoder[l][j]),
                    (a, b),
                    &block_opts,
                    (Stage::Encoder, l),
                    probe.as_deref_mut(),
                )?;
                a = na;
                b = nb;
            }
            skips.push((a, b));
            if l + 1 < LEVELS {
                a = ba.down[l].apply(tape, p, a)?;
                b = bb.down[l].apply(tape, p, b)?;
            }
        }
        for l in (0..LEVELS - 1).rev() {
            let (da, db) = (&ba.decoder[l], &bb.decoder[l]);
            let (sa, sb) = skips[l];
            let ua = tape.upsample(a, 2)?;
            let ua = da.up.apply(tape, p, ua)?;
            let ub = tape.upsample(b, 2)?;
            let ub = db.up.apply(tape, p, ub)?;
            let ca = tape.concat(&[ua, sa, sb], 0)?;
            let cb = tape.concat(&[ub, sb, sa], 0)?;
            a = da.merge.apply(tape, p, ca)?;
            b = db.merge.apply(tape, p, cb)?;
            for j in 0..self.config.blocks_per_level {
                let (na, nb) = self.blend_pair(
                    tape,
                    p,
                    (&da.blocks[j], &db.blocks[j]),
                    (a, b),
                    &block_opts,
                    (Stage::Decoder, l),
                    probe.as_deref_mut(),
                )?;
                a = na;
                b = nb;
            }
        }
        if let Some(pr) = probe {
            pr.branch_outputs = Some((tape.value(a).clone(), tape.value(b).clone()));
        }
        let cat = tape.concat(&[a, b], 0)?;
        let h = self.head.conv1.apply(tape, p, cat)?;
        let h = tape.gelu(h)?;
        let h = self.head.conv2.apply(tape, p, h)?;
        let h = tape.gelu(h)?;
        let o = self.head.out.apply(tape, p, h)?;
        tape.upsample(o, self.config.patch)
    }

    /// Both branches updated from the same `(a, b)` snapshot.
    #[allow(clippy::too_many_arguments)]
    fn blend_pair<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        blocks: (&CfbBlock, &CfbBlock),
        (a, b): (Var, Var),
        opts: &BlockOptions,
        (stage, level): (Stage, usize),
        probe: Option<&mut Probe<T>>,
    ) -> Result<(Var, Var)> {
        let oa = blocks.0.forward(tape, p, a, b, opts)?;
        let ob = blocks.1.forward(tape, p, b, a, opts)?;
        if let Some(pr) = probe {
            if pr.record_attention {
                for (branch, (o, blk)) in [(oa, blocks.0), (ob, blocks.1)].into_iter().enumerate() {
                    let (q, k) = (tape.value(o.q), tape.value(o.k));
                    pr.attention.push(AttentionRecord {
                        stage,
                        level,
                        branch,
                        heads: blk.heads,
                        logits: attention_logits(q, k, blk.heads)?,
                        probs: attention_probs(q, k, blk.heads)?,
                    });
                }
            }
        }
        Ok((oa.out, ob.out))
    }

    /// Fused volume clamped to `[0, 1]`, computed without recording gradients.
    pub fn infer<T: Real>(&self, params: &ParamStore<T>, mri: &Tensor<T>, pet: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_params(params)?;
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let a = tape.constant(mri.clone());
        let b = tape.constant(pet.clone());
        let out = self.forward(&mut tape, &p, a, b, &ForwardOptions::default(), None)?;
        Ok(tape.value(out).map(|v| v.max(T::zero()).min(T::one())))
    }

    /// Parameter store with the two branches' weights exchanged and the
    /// fusion head's input channels reordered to match.
    pub fn mirror_params<T: Real>(&self, params: &ParamStore<T>) -> Result<ParamStore<T>> {
        self.check_params(params)?;
        let mut values = params.tensors().to_vec();
        for (i, name) in self.names.iter().enumerate() {
            if let Some(rest) = name.strip_prefix("a.") {
                let j = self
                    .names
                    .iter()
                    .position(|n| n.strip_prefix("b.") == Some(rest))
                    .expect("mirrored name");
                values.swap(i, j);
            }
        }
        let w = self.head.conv1.w;
        let c0 = self.config.level_channels()[0];
        let shape = values[w].shape().to_vec();
        let per_in = shape[2] * shape[3] * shape[4];
        let old = values[w].clone();
        let swapped = Tensor::from_fn(&shape, |i| {
            let inner = i % per_in;
            let ic = (i / per_in) % shape[1];
            let oc = i / (per_in * shape[1]);
            let src_ic = if ic < c0 { ic + c0 } else { ic - c0 };
            old.data()[(oc * shape[1] + src_ic) * per_in + inner]
        });
        values[w] = swapped;
        Ok(ParamStore::from_parts(self.names.clone(), values))
    }
}
