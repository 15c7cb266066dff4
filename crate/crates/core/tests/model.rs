use dc2fusion_core::attention::attention_logits;
use dc2fusion_core::model::{BlockOptions, CfbBlock, ForwardOptions, Probe};
use dc2fusion_core::optim::{Adam, AdamConfig};
use dc2fusion_core::phantom::{generate_phantom_pair, PhantomSpec};
use dc2fusion_core::training::{loss_and_grads, train_step};
use dc2fusion_core::{FusionNet, ModelConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume<T: dc2fusion_core::Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of_f64(rng.gen::<f64>()))
}

fn perturb_offset_heads<T: dc2fusion_core::Real>(net: &FusionNet, params: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, _, _, block) in net.blocks() {
        let (w, b) = block.offset_head_params();
        for v in params.tensors_mut()[w].data_mut() {
            *v = T::of_f64(rng.gen_range(-0.3..0.3));
        }
        for v in params.tensors_mut()[b].data_mut() {
            *v = T::of_f64(rng.gen_range(-0.6..0.6));
        }
    }
}

fn run<T: dc2fusion_core::Real>(
    net: &FusionNet,
    params: &ParamStore<T>,
    mri: &Tensor<T>,
    pet: &Tensor<T>,
    bypass_resample: bool,
    probe: Option<&mut Probe<T>>,
) -> Tensor<T> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let a = tape.constant(mri.clone());
    let b = tape.constant(pet.clone());
    let out = net
        .forward(&mut tape, &p, a, b, &ForwardOptions { bypass_resample }, probe)
        .unwrap();
    tape.value(out).clone()
}

fn max_abs_diff<T: dc2fusion_core::Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fresh_model_matches_resample_free_path() {
    let net = FusionNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params::<f32>(1);
    for seed in [2, 3] {
        let mri = random_volume::<f32>(&[1, 32, 32, 32], seed);
        let pet = random_volume::<f32>(&[1, 32, 32, 32], seed + 100);
        let with = run(&net, &params, &mri, &pet, false, None);
        let without = run(&net, &params, &mri, &pet, true, None);
        assert_eq!(with.shape(), &[1, 32, 32, 32]);
        assert!(max_abs_diff(&with, &without) <= 1e-6);
    }
}

#[test]
fn offsets_change_the_output_once_heads_are_nonzero() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params::<f64>(1);
    perturb_offset_heads(&net, &mut params, 9);
    let mri = random_volume::<f64>(&[1, 16, 16, 16], 4);
    let pet = random_volume::<f64>(&[1, 16, 16, 16], 5);
    let with = run(&net, &params, &mri, &pet, false, None);
    let without = run(&net, &params, &mri, &pet, true, None);
    assert!(max_abs_diff(&with, &without) > 1e-6);
}

#[test]
fn unit_offset_compensates_a_one_voxel_shift() {
    let (ch, heads, window) = (8, 2, [2, 2, 2]);
    let (block, layout) = CfbBlock::standalone(ch, heads, window, 3, 4);
    let params = layout.init::<f64>(21);
    let dims = [8, 6, 4];
    let fa = random_volume::<f64>(&[ch, dims[0], dims[1], dims[2]], 22);
    // fb(x) = fa(x - 1); the plane at x = 0 is filled with unrelated values.
    let filler = random_volume::<f64>(&[ch, 1, dims[1], dims[2]], 23);
    let yz = dims[1] * dims[2];
    let fb = Tensor::from_fn(fa.shape(), |i| {
        let (c, rest) = (i / (dims[0] * yz), i % (dims[0] * yz));
        let x = rest / yz;
        if x == 0 {
            filler.data()[c * yz + rest % yz]
        } else {
            fa.data()[i - yz]
        }
    });

    let logits = |other: &Tensor<f64>, shift: f64| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let own = tape.constant(fa.clone());
        let other = tape.constant(other.clone());
        let field = Tensor::from_fn(&[3, dims[0], dims[1], dims[2]], |i| {
            if i < dims[0] * yz {
                shift
            } else {
                0.0
            }
        });
        let field = tape.constant(field);
        let opts = BlockOptions {
            bypass_resample: false,
            offset_override: Some(field),
        };
        let o = block.forward(&mut tape, &p, own, other, &opts).unwrap();
        attention_logits(tape.value(o.q), tape.value(o.k), heads).unwrap()
    };
    let reference = logits(&fa, 0.0);
    let compensated = logits(&fb, 1.0);
    let uncompensated = logits(&fb, 0.0);

    // Windows are x-fastest; those in the last x column read the clamped edge.
    let nwx = dims[0] / window[0];
    let per_window = reference.len() / reference.shape()[0];
    let mut worst = 0.0f64;
    let mut drift = 0.0f64;
    for w in 0..reference.shape()[0] {
        if w % nwx == nwx - 1 {
            continue;
        }
        let r = w * per_window..(w + 1) * per_window;
        for i in r {
            worst = worst.max((reference.data()[i] - compensated.data()[i]).abs());
            drift = drift.max((reference.data()[i] - uncompensated.data()[i]).abs());
        }
    }
    assert!(worst < 1e-5, "interior logits differ by {worst}");
    assert!(drift > 1e-3, "the shift should be visible without compensation");
}

#[test]
fn level_shapes_follow_the_ladder() {
    let net = FusionNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params::<f32>(0);
    let v = random_volume::<f32>(&[1, 32, 32, 32], 1);
    let mut probe = Probe::default();
    let out = run(&net, &params, &v, &v, false, Some(&mut probe));
    assert_eq!(out.shape(), &[1, 32, 32, 32]);
    let want = [[24, 16], [48, 8], [96, 4], [192, 2]];
    assert_eq!(probe.levels.len(), 4);
    for (l, [c, n]) in want.into_iter().enumerate() {
        assert_eq!(probe.levels[l].0, vec![c, n, n, n]);
        assert_eq!(probe.levels[l].1, vec![c, n, n, n]);
    }
    assert_eq!(probe.heads, vec![3, 6, 12, 24]);
}

#[test]
fn ladder_holds_for_non_cubic_input() {
    let net = FusionNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params::<f32>(0);
    let v = random_volume::<f32>(&[1, 64, 32, 32], 1);
    let mut probe = Probe::default();
    let out = run(&net, &params, &v, &v, false, Some(&mut probe));
    assert_eq!(out.shape(), &[1, 64, 32, 32]);
    for (l, c) in [24, 48, 96, 192].into_iter().enumerate() {
        let s = 16 >> l;
        assert_eq!(probe.levels[l].0, vec![c, 2 * s, s, s]);
    }
}

#[test]
fn swapped_inputs_with_mirrored_weights_swap_the_branches() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params::<f64>(4);
    perturb_offset_heads(&net, &mut params, 13);
    let mirrored = net.mirror_params(&params).unwrap();
    let mri = random_volume::<f64>(&[1, 16, 16, 16], 31);
    let pet = random_volume::<f64>(&[1, 16, 16, 16], 32);

    let mut p1 = Probe::default();
    let f1 = run(&net, &params, &mri, &pet, false, Some(&mut p1));
    let mut p2 = Probe::default();
    let f2 = run(&net, &mirrored, &pet, &mri, false, Some(&mut p2));
    let (a1, b1) = p1.branch_outputs.unwrap();
    let (a2, b2) = p2.branch_outputs.unwrap();
    assert_eq!(a1, b2);
    assert_eq!(b1, a2);
    assert!(max_abs_diff(&f1, &f2) < 1e-12);
}

#[test]
fn attention_rows_are_distributions_everywhere() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params::<f64>(6);
    perturb_offset_heads(&net, &mut params, 2);
    let v = random_volume::<f64>(&[1, 16, 16, 16], 8);
    let w = random_volume::<f64>(&[1, 16, 16, 16], 9);
    let mut probe = Probe::with_attention();
    run(&net, &params, &v, &w, false, Some(&mut probe));
    // 4 encoder + 3 decoder levels, two branches each.
    assert_eq!(probe.attention.len(), 14);
    for rec in &probe.attention {
        let t = rec.probs.shape()[3];
        assert_eq!(rec.probs.shape()[1], rec.heads);
        for row in rec.probs.data().chunks(t) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let params = net.init_params::<f32>(2);
    let v = random_volume::<f32>(&[1, 16, 16, 16], 3);
    let w = random_volume::<f32>(&[1, 16, 16, 16], 4);
    assert_eq!(
        run(&net, &params, &v, &w, false, None),
        run(&net, &params, &v, &w, false, None)
    );
}

#[test]
fn every_parameter_receives_a_finite_gradient() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let pair = generate_phantom_pair(&PhantomSpec::new(3, 16)).unwrap();
    let (mri, pet) = (pair.mri.cast::<f64>(), pair.pet.cast::<f64>());

    // Fresh weights: the offset heads are zero, so the depth-wise stage ahead of
    // them sees no gradient yet. Everything else must.
    let params = net.init_params::<f64>(7);
    let g = loss_and_grads(&net, &params, &mri, &pet).unwrap().grads;
    for (name, t) in params.names().iter().zip(&g) {
        assert!(t.all_finite(), "{name}");
        if !name.contains(".pre.") {
            assert!(t.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
        }
    }

    let mut params = params;
    perturb_offset_heads(&net, &mut params, 17);
    let g = loss_and_grads(&net, &params, &mri, &pet).unwrap().grads;
    for (name, t) in params.names().iter().zip(&g) {
        assert!(t.all_finite(), "{name}");
        assert!(t.data().iter().any(|&v| v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn offset_heads_leave_zero_within_five_steps() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params::<f32>(1);
    let mut opt = Adam::new(AdamConfig::default(), &params);
    let pair = generate_phantom_pair(&PhantomSpec::new(8, 16)).unwrap();
    for _ in 0..5 {
        train_step(&net, &mut params, &mut opt, &pair.mri, &pair.pet).unwrap();
    }
    for (_, _, _, block) in net.blocks() {
        let (w, _) = block.offset_head_params();
        assert!(params.tensors()[w].data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn illegal_inputs_are_rejected() {
    let net = FusionNet::new(ModelConfig::default()).unwrap();
    let params = net.init_params::<f32>(0);
    let a = random_volume::<f32>(&[1, 32, 32, 32], 1);
    let b = random_volume::<f32>(&[1, 32, 32, 16], 1);
    assert!(net.infer(&params, &a, &b).is_err());
    for n in [24, 48] {
        let c = random_volume::<f32>(&[1, n, n, n], 1);
        assert!(net.infer(&params, &c, &c).is_err());
    }
    let small = FusionNet::new(ModelConfig::tiny()).unwrap().init_params::<f32>(0);
    assert!(net.infer(&small, &a, &a).is_err());
}

#[test]
fn inference_output_is_clamped() {
    let net = FusionNet::new(ModelConfig::tiny()).unwrap();
    let mut params = net.init_params::<f32>(5);
    // Push the output bias far outside [0, 1].
    let last = params.names().iter().rposition(|n| n.ends_with(".b")).unwrap();
    for v in params.tensors_mut()[last].data_mut() {
        *v = 3.0;
    }
    let v = random_volume::<f32>(&[1, 16, 16, 16], 1);
    let out = net.infer(&params, &v, &v).unwrap();
    assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(out.data().contains(&1.0));
}
