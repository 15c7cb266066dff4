//! Named gradient and invariant checks shared by the command line tool and
//! the test harnesses.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check_many, rel_err, Coords, GradCheckConfig};
use crate::metrics;
use crate::model::{ForwardOptions, FusionNet, ModelConfig};
use crate::objectives::{l1, ncc, pair_loss, ssim, total_loss};
use crate::phantom::{generate_phantom_pair, CubeRotation, PhantomSpec};
use crate::tensor::Tensor;
use crate::volume::{ConvSpec, WindowLayout};

/// Tolerance on the relative error of every op-level gradient check.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the whole-network check.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst relative error for gradient checks, worst deviation otherwise.
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value.is_finite() && value < tolerance,
            detail,
        }
    }

    fn failed(name: &str, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value: f64::NAN,
            tolerance,
            passed: false,
            detail,
        }
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values of magnitude in `[lo, hi]` with a random sign.
fn signed(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ r` with a fixed random `r`, so every output element matters differently.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(uniform(tape.shape(y), seed, -1.0, 1.0));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: fn() -> Vec<Tensor<f64>>,
    f: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            inputs: || vec![uniform(&[3, 4], 1, -1.0, 1.0), uniform(&[3, 4], 2, -1.0, 1.0)],
            f: |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "mul",
            inputs: || vec![uniform(&[3, 4], 3, -1.0, 1.0), uniform(&[3, 4], 4, -1.0, 1.0)],
            f: |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "sub_div",
            inputs: || vec![uniform(&[5], 5, -1.0, 1.0), uniform(&[5], 6, 0.5, 2.0)],
            f: |t, v| {
                let d = t.div(v[0], v[1])?;
                let y = t.sub(d, v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "scalar_ops",
            inputs: || vec![uniform(&[6], 7, 0.2, 1.5)],
            f: |t, v| {
                let a = t.scale(v[0], 1.7)?;
                let b = t.add_scalar(a, 0.3)?;
                let c = t.rsub_scalar(2.0, b)?;
                let d = t.neg(c)?;
                let e = t.square(d)?;
                let s = t.sqrt(v[0])?;
                let y = t.add(e, s)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "abs_gelu",
            inputs: || vec![signed(&[8], 8, 0.1, 2.0)],
            f: |t, v| {
                let a = t.abs(v[0])?;
                let g = t.gelu(v[0])?;
                let y = t.mul(a, g)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "matmul",
            inputs: || vec![uniform(&[4, 5], 10, -1.0, 1.0), uniform(&[5, 3], 11, -1.0, 1.0)],
            f: |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "matmul_batched",
            inputs: || vec![uniform(&[2, 3, 4], 12, -1.0, 1.0), uniform(&[2, 4, 5], 13, -1.0, 1.0)],
            f: |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "softmax",
            inputs: || vec![uniform(&[3, 4, 5], 14, -2.0, 2.0)],
            f: |t, v| {
                let y = t.softmax(v[0], 1)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "reductions",
            inputs: || vec![uniform(&[3, 4, 5], 15, -1.0, 1.0)],
            f: |t, v| {
                let m = t.reduce_mean(v[0], &[0, 2])?;
                let s = t.reduce_var(v[0], &[1])?;
                let a = project(t, m, 9)?;
                let b = project(t, s, 10)?;
                let c = t.mean(v[0])?;
                let ab = t.add(a, b)?;
                let sq = t.square(c)?;
                t.add(ab, sq)
            },
        },
        OpCase {
            name: "concat_narrow",
            inputs: || vec![uniform(&[2, 3], 16, -1.0, 1.0), uniform(&[4, 3], 17, -1.0, 1.0)],
            f: |t, v| {
                let c = t.concat(&[v[0], v[1]], 0)?;
                let n = t.narrow(c, 0, 1, 4)?;
                let parts = t.split(c, 1, &[1, 2])?;
                let a = project(t, n, 9)?;
                let sq = t.square(parts[1])?;
                let b = project(t, sq, 10)?;
                t.add(a, b)
            },
        },
        OpCase {
            name: "linear",
            inputs: || {
                vec![
                    uniform(&[2, 3, 4], 18, -1.0, 1.0),
                    uniform(&[4, 5], 19, -1.0, 1.0),
                    uniform(&[5], 20, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "layer_norm",
            inputs: || {
                vec![
                    uniform(&[5, 6], 21, -1.0, 1.0),
                    uniform(&[6], 22, 0.5, 1.5),
                    uniform(&[6], 23, -0.5, 0.5),
                ]
            },
            f: |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "conv3d_k1",
            inputs: || {
                vec![
                    uniform(&[3, 4, 4, 4], 24, -1.0, 1.0),
                    uniform(&[4, 3, 1, 1, 1], 25, -1.0, 1.0),
                    uniform(&[4], 26, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), ConvSpec::pointwise(3, 4))?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "conv3d_k3",
            inputs: || {
                vec![
                    uniform(&[2, 5, 4, 5], 27, -1.0, 1.0),
                    uniform(&[3, 2, 3, 3, 3], 28, -1.0, 1.0),
                    uniform(&[3], 29, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.conv3d(v[0], v[1], Some(v[2]), ConvSpec::same(2, 3, 3, 1))?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "conv3d_grouped",
            inputs: || {
                vec![
                    uniform(&[4, 4, 4, 4], 30, -1.0, 1.0),
                    uniform(&[4, 2, 3, 3, 3], 31, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.conv3d(v[0], v[1], None, ConvSpec::same(4, 4, 3, 2))?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "conv3d_strided",
            inputs: || {
                vec![
                    uniform(&[2, 4, 6, 4], 32, -1.0, 1.0),
                    uniform(&[3, 2, 2, 2, 2], 33, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.conv3d(v[0], v[1], None, ConvSpec::patchify(2, 3, 2))?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "trilinear_sample",
            inputs: || vec![uniform(&[2, 4, 5, 3], 34, -1.0, 1.0), interior_offsets([4, 5, 3], 35)],
            f: |t, v| {
                let y = t.trilinear_sample(v[0], v[1])?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "upsample",
            inputs: || vec![uniform(&[2, 3, 2, 3], 36, -1.0, 1.0)],
            f: |t, v| {
                let a = t.upsample_axis(v[0], 2, 3)?;
                let b = t.upsample(v[0], 2)?;
                let pa = project(t, a, 9)?;
                let pb = project(t, b, 10)?;
                t.add(pa, pb)
            },
        },
        OpCase {
            name: "box_mean",
            inputs: || vec![uniform(&[2, 9, 8], 37, -1.0, 1.0)],
            f: |t, v| {
                let y = t.box_mean_axis(v[0], 1, 7)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "window_partition_merge",
            inputs: || vec![uniform(&[3, 4, 4, 2], 38, -1.0, 1.0)],
            f: |t, v| {
                let g = t.window_partition(v[0], [2, 2, 2])?;
                let sq = t.square(g.windows)?;
                let m = t.window_merge(&crate::volume::WindowGrid { windows: sq, ..g })?;
                let a = project(t, g.windows, 9)?;
                let b = project(t, m, 10)?;
                t.add(a, b)
            },
        },
        OpCase {
            name: "window_attention",
            inputs: || {
                vec![
                    uniform(&[3, 8, 6], 39, -1.0, 1.0),
                    uniform(&[3, 8, 6], 40, -1.0, 1.0),
                    uniform(&[3, 8, 6], 41, -1.0, 1.0),
                ]
            },
            f: |t, v| {
                let y = t.window_attention(v[0], v[1], v[2], 2)?;
                project(t, y, 9)
            },
        },
        OpCase {
            name: "ssim_loss",
            inputs: || {
                vec![
                    uniform(&[1, 8, 8, 8], 42, 0.0, 1.0),
                    uniform(&[1, 8, 8, 8], 43, 0.0, 1.0),
                ]
            },
            f: |t, v| ssim(t, v[0], v[1]),
        },
        OpCase {
            name: "ncc_loss",
            inputs: || {
                vec![
                    uniform(&[1, 8, 8, 8], 44, 0.0, 1.0),
                    uniform(&[1, 8, 8, 8], 45, 0.0, 1.0),
                ]
            },
            f: |t, v| ncc(t, v[0], v[1]),
        },
        OpCase {
            name: "l1_loss",
            inputs: || {
                let a = uniform(&[1, 8, 8, 8], 46, 0.3, 0.7);
                let b = shifted(&a, 47);
                vec![a, b]
            },
            f: |t, v| l1(t, v[0], v[1]),
        },
        OpCase {
            name: "pair_loss",
            inputs: || {
                vec![
                    uniform(&[1, 8, 8, 8], 48, 0.0, 1.0),
                    uniform(&[1, 8, 8, 8], 49, 0.0, 1.0),
                    uniform(&[1, 8, 8, 8], 50, 0.0, 1.0),
                ]
            },
            f: |t, v| pair_loss(t, v[0], v[1], v[2]),
        },
        OpCase {
            name: "total_loss",
            inputs: || {
                let f = uniform(&[1, 10, 10, 10], 51, 0.35, 0.65);
                let m = shifted(&f, 52);
                let p = shifted(&f, 53);
                vec![f, m, p]
            },
            f: |t, v| Ok(total_loss(t, v[0], v[1], v[2])?.total),
        },
    ]
}

/// `a ± U(0.05, 0.3)` elementwise, keeping `|a - b|` away from the kink of `|·|`.
fn shifted(a: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let s = signed(a.shape(), seed, 0.05, 0.3);
    a.zip_map(&s, |x, d| x + d).expect("same shape")
}

/// Offsets whose sample positions stay strictly inside the grid and away
/// from integer coordinates, where trilinear interpolation is smooth.
fn interior_offsets(dims: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims[0] * dims[1] * dims[2];
    let mut t = Tensor::zeros(&[3, dims[0], dims[1], dims[2]]);
    let d = t.data_mut();
    for a in 0..3 {
        for i in 0..n {
            let coord = match a {
                0 => i / (dims[1] * dims[2]),
                1 => (i / dims[2]) % dims[1],
                _ => i % dims[2],
            };
            let m = rng.gen_range(0.15..0.85);
            d[a * n + i] = if coord + 1 < dims[a] { m } else { -m };
        }
    }
    t
}

/// Runs every op-level gradient check.
pub fn op_gradient_checks() -> Vec<CheckOutcome> {
    let cfg = GradCheckConfig {
        eps: FD_EPS,
        floor: 1e-6,
        coords: Coords::Sample { count: 400, seed: 7 },
    };
    op_cases()
        .into_iter()
        .map(|case| match grad_check_many(case.f, &(case.inputs)(), &cfg) {
            Ok(r) => CheckOutcome::new(
                case.name,
                r.max_rel_err,
                OP_TOLERANCE,
                format!(
                    "{} coords, worst input {} index {}: analytic {:.6e} numeric {:.6e}",
                    r.checked, r.worst.0, r.worst.1, r.analytic, r.numeric
                ),
            ),
            Err(e) => CheckOutcome::failed(case.name, OP_TOLERANCE, format!("{e}")),
        })
        .collect()
}

/// A square op whose backward rule is deliberately wrong, used to confirm
/// that the checker notices bad rules.
pub fn corrupted_rule_check() -> CheckOutcome {
    let x = uniform(&[6], 99, 0.5, 2.0);
    let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let val = t.value(v[0]).map(|a| a * a);
        let y = t.custom("corrupted_square", &[v[0]], val, |ctx| {
            vec![Some(
                ctx.grad_out.zip_map(ctx.inputs[0], |g, a| g * a).expect("same shape"),
            )]
        })?;
        project(t, y, 9)
    };
    match grad_check_many(f, &[x], &GradCheckConfig::default()) {
        Ok(r) => CheckOutcome::new(
            "corrupted_square",
            r.max_rel_err,
            OP_TOLERANCE,
            String::from("negative control"),
        ),
        Err(e) => CheckOutcome::failed("corrupted_square", OP_TOLERANCE, format!("{e}")),
    }
}

/// Whole-network check on the reduced configuration at 16³: gradients of the
/// total loss against central differences on 20 parameter coordinates, with
/// the offset heads moved away from zero so the resampling path is active.
pub fn model_gradient_check() -> CheckOutcome {
    const NAME: &str = "fusion_model_16";
    match model_check_inner() {
        Ok((err, detail)) => CheckOutcome::new(NAME, err, MODEL_TOLERANCE, detail),
        Err(e) => CheckOutcome::failed(NAME, MODEL_TOLERANCE, format!("{e}")),
    }
}

fn model_check_inner() -> Result<(f64, String)> {
    let net = FusionNet::new(ModelConfig::tiny())?;
    let mut params = net.init_params::<f64>(3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut head_tensors = Vec::new();
    for (_, _, _, block) in net.blocks() {
        let (w, b) = block.offset_head_params();
        for v in params.tensors_mut()[w].data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in params.tensors_mut()[b].data_mut() {
            *v = rng.gen_range(0.1..0.4);
        }
        head_tensors.push(w);
    }
    let pair = generate_phantom_pair(&PhantomSpec::new(5, 16))?;
    let (mri, pet) = (pair.mri.cast::<f64>(), pair.pet.cast::<f64>());

    let loss = |values: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let p: Vec<Var> = values
            .iter()
            .map(|v| {
                if grads {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        let a = tape.constant(mri.clone());
        let b = tape.constant(pet.clone());
        let fused = net.forward(&mut tape, &p, a, b, &ForwardOptions::default(), None)?;
        let total = total_loss(&mut tape, fused, a, b)?.total;
        let value = tape.value(total).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        tape.backward(total)?;
        Ok((value, p.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    };

    let (_, analytic) = loss(params.tensors(), true)?;
    let numel = params.numel();
    let mut coords: Vec<(usize, usize)> = head_tensors
        .iter()
        .take(4)
        .map(|&k| (k, rng.gen_range(0..params.tensors()[k].len())))
        .collect();
    while coords.len() < 20 {
        let mut flat = rng.gen_range(0..numel);
        let mut k = 0;
        while flat >= params.tensors()[k].len() {
            flat -= params.tensors()[k].len();
            k += 1;
        }
        coords.push((k, flat));
    }

    let mut work = params.tensors().to_vec();
    let (mut worst, mut detail) = (0.0f64, String::new());
    for &(k, i) in &coords {
        let x0 = work[k].data()[i];
        work[k].data_mut()[i] = x0 + FD_EPS;
        let (fp, _) = loss(&work, false)?;
        work[k].data_mut()[i] = x0 - FD_EPS;
        let (fm, _) = loss(&work, false)?;
        work[k].data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * FD_EPS);
        let a = analytic[k].data()[i];
        let e = rel_err(a, numeric, 1e-6);
        if e >= worst {
            worst = e;
            detail = format!(
                "20 coords, worst {}[{}]: analytic {:.6e} numeric {:.6e}",
                params.names()[k],
                i,
                a,
                numeric
            );
        }
    }
    Ok((worst, detail))
}

/// The op checks followed by the whole-network check; optionally appends
/// the corrupted-rule negative control, which is expected to fail.
pub fn gradient_suite(include_corrupted: bool) -> Vec<CheckOutcome> {
    let mut out = op_gradient_checks();
    out.push(model_gradient_check());
    if include_corrupted {
        out.push(corrupted_rule_check());
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check(name: &str, tol: f64, f: impl FnOnce() -> Result<(f64, String)>) -> CheckOutcome {
    match f() {
        Ok((v, d)) => CheckOutcome::new(name, v, tol, d),
        Err(e) => CheckOutcome::failed(name, tol, format!("{e}")),
    }
}

/// Fast structural and numerical invariants.
pub fn invariant_suite() -> Vec<CheckOutcome> {
    let vol = uniform(&[2, 8, 4, 6], 60, 0.0, 1.0);
    let mut out = Vec::new();

    out.push(check("partition_roundtrip", f64::MIN_POSITIVE, || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vol.clone());
        let g = t.window_partition(x, [2, 2, 2])?;
        let m = t.window_merge(&g)?;
        Ok((max_abs_diff(t.value(m), &vol), String::from("exact equality")))
    }));

    out.push(check("zero_offset_identity", f64::MIN_POSITIVE, || {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vol.clone());
        let o = t.constant(Tensor::zeros(&[3, 8, 4, 6]));
        let s = t.trilinear_sample(x, o)?;
        Ok((max_abs_diff(t.value(s), &vol), String::from("exact equality")))
    }));

    out.push(check("window_layout_permutation", 0.5, || {
        let layout = WindowLayout::new([8, 4, 6], [2, 2, 2])?;
        let mut perm = layout.permutation();
        perm.sort_unstable();
        let ok = perm.iter().enumerate().all(|(i, &p)| i == p);
        Ok((if ok { 0.0 } else { 1.0 }, String::from("token order is a permutation")))
    }));

    out.push(check("attention_rows_sum_to_one", 1e-12, || {
        let q = uniform(&[4, 8, 6], 61, -2.0, 2.0);
        let k = uniform(&[4, 8, 6], 62, -2.0, 2.0);
        let p = crate::attention::attention_probs(&q, &k, 3)?;
        let dev = p
            .data()
            .chunks(8)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((dev, String::from("max |row sum - 1|")))
    }));

    let img = uniform(&[1, 8, 8, 8], 63, 0.0, 1.0);
    out.push(check("ssim_self_is_one", 1e-12, || {
        let s = metrics::ssim(&img, &img)?;
        Ok(((s - 1.0).abs(), format!("ssim(I,I) = {s}")))
    }));
    out.push(check("nmi_self_is_two", 1e-9, || {
        let v = metrics::nmi(&img, &img, metrics::HIST_BINS)?;
        Ok(((v - 2.0).abs(), format!("nmi(I,I) = {v}")))
    }));
    out.push(check("fmi_self_is_one", 1e-9, || {
        let v = metrics::fmi(&img, &img, metrics::HIST_BINS)?;
        Ok(((v - 1.0).abs(), format!("fmi(I,I) = {v}")))
    }));
    out.push(check("psnr_known_value", 1e-9, || {
        let a = Tensor::full(&[1, 4, 4, 4], 0.5);
        let b = Tensor::full(&[1, 4, 4, 4], 0.6);
        let v = metrics::psnr(&a, &b)?;
        Ok(((v - 20.0).abs(), format!("psnr = {v} dB for a uniform error of 0.1")))
    }));
    out.push(check("total_loss_of_identical_inputs", 1e-12, || {
        let v = crate::objectives::loss_values(&img, &img, &img)?;
        Ok((v.total.abs(), format!("total = {}", v.total)))
    }));
    out.push(check("rotation_group", 0.5, || {
        let all = CubeRotation::all();
        let cube = Tensor::from_fn(&[1, 3, 3, 3], |i| i as f64);
        let mut images: Vec<Vec<u64>> = Vec::new();
        for r in &all {
            let rotated = r.apply(&cube)?;
            images.push(rotated.data().iter().map(|v| v.to_bits()).collect());
        }
        images.sort();
        images.dedup();
        let distinct = images.len() == 24 && all.len() == 24;
        Ok((
            if distinct { 0.0 } else { 1.0 },
            format!("{} distinct rotations", images.len()),
        ))
    }));
    out
}
