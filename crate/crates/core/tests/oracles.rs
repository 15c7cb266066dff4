use dc2fusion_core::metrics::{self, HIST_BINS};
use dc2fusion_core::objectives;
use dc2fusion_core::phantom::CubeRotation;
use dc2fusion_core::volume::ConvSpec;
use dc2fusion_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod brute;
use brute::{brute_bin, brute_entropies, brute_fmi, brute_nmi, brute_psnr, brute_ssim};

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn at(t: &Tensor<f64>, idx: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv3d(xv, wv, bv, spec).unwrap();
    tape.value(y).clone()
}

/// Direct definition of a grouped, strided, zero-padded 3-D correlation.
fn brute_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Tensor<f64> {
    let [cin, xs, ys, zs] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let k = spec.kernel;
    let pad = spec.padding;
    let out_dim = |n: usize, a: usize| (n + 2 * pad[a] - k[a]) / spec.stride + 1;
    let (ox, oy, oz) = (out_dim(xs, 0), out_dim(ys, 1), out_dim(zs, 2));
    let cpg_in = cin / spec.groups;
    let cpg_out = spec.out_channels / spec.groups;
    let ws = w.shape();
    let mut out = Tensor::zeros(&[spec.out_channels, ox, oy, oz]);
    let mut i = 0;
    for co in 0..spec.out_channels {
        let g = co / cpg_out;
        for px in 0..ox {
            for py in 0..oy {
                for pz in 0..oz {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cpg_in {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for c in 0..k[2] {
                                    let sx = (px * spec.stride + a) as isize - pad[0] as isize;
                                    let sy = (py * spec.stride + bb) as isize - pad[1] as isize;
                                    let sz = (pz * spec.stride + c) as isize - pad[2] as isize;
                                    if sx < 0 || sy < 0 || sz < 0 {
                                        continue;
                                    }
                                    let (sx, sy, sz) = (sx as usize, sy as usize, sz as usize);
                                    if sx >= xs || sy >= ys || sz >= zs {
                                        continue;
                                    }
                                    let wi = (((co * ws[1] + ci) * ws[2] + a) * ws[3] + bb) * ws[4] + c;
                                    acc += w.data()[wi] * at(x, [g * cpg_in + ci, sx, sy, sz]);
                                }
                            }
                        }
                    }
                    out.data_mut()[i] = acc;
                    i += 1;
                }
            }
        }
    }
    out
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv_matches_quadruple_loop() {
    let cases = [
        (ConvSpec::same(3, 4, 3, 1), [3, 6, 5, 7]),
        (ConvSpec::pointwise(3, 2), [3, 4, 4, 4]),
        (ConvSpec::patchify(2, 3, 2), [2, 6, 4, 8]),
        (ConvSpec::same(4, 6, 3, 2), [4, 5, 5, 5]),
    ];
    for (n, (spec, shape)) in cases.into_iter().enumerate() {
        let x = uniform(&shape, n as u64, -1.0, 1.0);
        let w = uniform(&spec.weight_shape(), 100 + n as u64, -1.0, 1.0);
        let b = uniform(&[spec.out_channels], 200 + n as u64, -1.0, 1.0);
        let fast = run_conv(&x, &w, Some(&b), spec);
        let slow = brute_conv(&x, &w, Some(&b), spec);
        assert!(max_diff(&fast, &slow) < 1e-5, "case {n}");
    }
}

#[test]
fn grouped_conv_is_independent_per_channel() {
    let x = uniform(&[2, 5, 5, 5], 7, -1.0, 1.0);
    let w = uniform(&[2, 1, 3, 3, 3], 8, -1.0, 1.0);
    let grouped = run_conv(&x, &w, None, ConvSpec::same(2, 2, 3, 2));
    for c in 0..2 {
        let xc = Tensor::new(&[1, 5, 5, 5], x.data()[c * 125..(c + 1) * 125].to_vec()).unwrap();
        let wc = Tensor::new(&[1, 1, 3, 3, 3], w.data()[c * 27..(c + 1) * 27].to_vec()).unwrap();
        let single = run_conv(&xc, &wc, None, ConvSpec::same(1, 1, 3, 1));
        for (a, b) in single.data().iter().zip(&grouped.data()[c * 125..(c + 1) * 125]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn sample(volume: &Tensor<f64>, offsets: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(volume.clone());
    let o = tape.constant(offsets.clone());
    let s = tape.trilinear_sample(v, o).unwrap();
    tape.value(s).clone()
}

#[test]
fn trilinear_output_stays_in_channel_range() {
    let v = uniform(&[3, 6, 5, 4], 11, -2.0, 3.0);
    let o = uniform(&[3, 6, 5, 4], 12, -4.0, 4.0);
    let s = sample(&v, &o);
    let n = 6 * 5 * 4;
    for c in 0..3 {
        let src = &v.data()[c * n..(c + 1) * n];
        let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(s.data()[c * n..(c + 1) * n]
            .iter()
            .all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }
}

#[test]
fn unit_shift_reads_next_voxel() {
    let v = uniform(&[2, 5, 4, 3], 13, 0.0, 1.0);
    let mut o = Tensor::zeros(&[3, 5, 4, 3]);
    o.data_mut()[..60].iter_mut().for_each(|d| *d = 1.0);
    let s = sample(&v, &o);
    for c in 0..2 {
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..3 {
                    assert_eq!(at(&s, [c, x, y, z]), at(&v, [c, x + 1, y, z]));
                }
            }
        }
    }
}

#[test]
fn metrics_match_scalar_implementations() {
    let a = uniform(&[1, 8, 8, 8], 21, 0.0, 1.0);
    let b = uniform(&[1, 8, 8, 8], 22, 0.0, 1.0);
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / 512.0;
    assert!((metrics::psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-6);
    assert!((metrics::psnr(&a, &b).unwrap() - brute_psnr(a.data(), b.data())).abs() < 1e-9);
    assert!((metrics::ssim(&a, &b).unwrap() - brute_ssim(a.data(), b.data(), &[1, 8, 8, 8])).abs() < 1e-6);
    assert!((metrics::nmi(&a, &b, HIST_BINS).unwrap() - brute_nmi(a.data(), b.data())).abs() < 1e-6);
    assert!((metrics::fmi(&a, &b, HIST_BINS).unwrap() - brute_fmi(a.data(), b.data(), 8)).abs() < 1e-6);
}

#[test]
fn ssim_matches_sliding_window_on_12_cube() {
    let a = uniform(&[1, 12, 12, 12], 23, 0.0, 1.0);
    let b = a
        .zip_map(&uniform(&[1, 12, 12, 12], 24, -0.2, 0.2), |x, d| x + d)
        .unwrap();
    let got = metrics::ssim(&a, &b).unwrap();
    assert!((got - brute_ssim(a.data(), b.data(), &[1, 12, 12, 12])).abs() < 1e-6);
}

#[test]
fn metric_identities() {
    let a = uniform(&[1, 8, 8, 8], 25, 0.0, 1.0);
    assert_eq!(metrics::nmi(&a, &a, HIST_BINS).unwrap(), 2.0);
    assert_eq!(metrics::fmi(&a, &a, HIST_BINS).unwrap(), 1.0);
    assert_eq!(metrics::ssim(&a, &a).unwrap(), 1.0);
    assert_eq!(metrics::psnr(&a, &a).unwrap(), metrics::PSNR_CAP_DB);
    let p = metrics::psnr(&Tensor::full(&[1, 8, 8, 8], 0.3), &Tensor::full(&[1, 8, 8, 8], 0.4)).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "{p}");
}

#[test]
fn histogram_metrics_ignore_joint_permutation() {
    use rand::seq::SliceRandom;
    let a = uniform(&[1, 8, 8, 8], 26, 0.0, 1.0);
    let b = a
        .zip_map(&uniform(&[1, 8, 8, 8], 27, -0.3, 0.3), |x, d| (x + d).clamp(0.0, 1.0))
        .unwrap();
    let mut perm: Vec<usize> = (0..512).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(28));
    let shuffle = |t: &Tensor<f64>| Tensor::new(&[1, 8, 8, 8], perm.iter().map(|&p| t.data()[p]).collect()).unwrap();
    let (pa, pb) = (shuffle(&a), shuffle(&b));
    assert!((metrics::nmi(&a, &b, HIST_BINS).unwrap() - metrics::nmi(&pa, &pb, HIST_BINS).unwrap()).abs() < 1e-12);

    // FMI histograms the gradient maps, so it is the feature voxels that get permuted.
    let fa = metrics::gradient_magnitude(a.data(), a.shape());
    let fb = metrics::gradient_magnitude(b.data(), b.shape());
    let direct = brute_fmi(a.data(), b.data(), 8);
    let via_features = {
        let bin = |f: &[f64]| -> Vec<usize> {
            let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            f.iter().map(|&v| brute_bin(v, lo, hi, HIST_BINS)).collect()
        };
        let pf = |f: &[f64]| -> Vec<f64> { perm.iter().map(|&p| f[p]).collect() };
        let (h1, h2, h12) = brute_entropies(&bin(&pf(&fa)), &bin(&pf(&fb)), HIST_BINS);
        2.0 * (h1 + h2 - h12) / (h1 + h2)
    };
    assert!((direct - via_features).abs() < 1e-12);
    assert!((metrics::fmi(&a, &b, HIST_BINS).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn independent_volumes_score_near_the_floor() {
    let a = uniform(&[1, 32, 32, 32], 29, 0.0, 1.0);
    let b = uniform(&[1, 32, 32, 32], 30, 0.0, 1.0);
    let nmi = metrics::nmi(&a, &b, HIST_BINS).unwrap();
    assert!((nmi - 1.0).abs() < 0.05, "{nmi}");
    let fmi = metrics::fmi(&a, &b, HIST_BINS).unwrap();
    assert!(fmi.abs() < 0.1, "{fmi}");
}

fn phantom_mri(seed: u64, n: usize) -> Tensor<f64> {
    let spec = dc2fusion_core::phantom::PhantomSpec::new(seed, n);
    dc2fusion_core::phantom::generate_phantom_pair(&spec)
        .unwrap()
        .mri
        .cast::<f64>()
}

#[test]
fn fmi_ignores_positive_affine_remap() {
    let v = phantom_mri(4, 24);
    let moved = v.map(|x| 0.5 * x + 0.25);
    let score = metrics::fmi(&v, &moved, HIST_BINS).unwrap();
    assert!((score - 1.0).abs() < 0.02, "{score}");
}

/// The gradient magnitude of `I²` is `2I·|∇I|`, a spatially varying rescale,
/// so a 64-bin MI on it drops to roughly 0.3 to 0.55 on both noise and
/// phantom volumes.
#[test]
#[ignore = "squared remap is not near-invariant under the gradient-magnitude FMI"]
fn fmi_tolerates_squared_remap() {
    let v = phantom_mri(4, 24);
    let sq = v.map(|x| x * x);
    let self_score = metrics::fmi(&v, &v, HIST_BINS).unwrap();
    let remapped = metrics::fmi(&v, &sq, HIST_BINS).unwrap();
    assert!((self_score - remapped).abs() < 0.2, "{self_score} vs {remapped}");
}

#[test]
fn loss_identities() {
    let v = uniform(&[1, 10, 10, 10], 31, 0.0, 1.0);
    assert_eq!(objectives::loss_values(&v, &v, &v).unwrap().total, 0.0);

    let w = uniform(&[1, 10, 10, 10], 32, 0.0, 1.0);
    let ncc = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut t = Tape::<f64>::new();
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let r = objectives::ncc(&mut t, x, y).unwrap();
        t.value(r).item()
    };
    let base = ncc(&v, &w);
    for (scale, shift) in [(2.5, -0.3), (0.01, 4.0), (7.0, 0.0)] {
        let moved = v.map(|x| scale * x + shift);
        assert!((ncc(&moved, &w) - base).abs() < 1e-9);
    }

    let f = uniform(&[1, 10, 10, 10], 33, 0.0, 1.0);
    let fwd = objectives::loss_values(&f, &v, &w).unwrap();
    let rev = objectives::loss_values(&f, &w, &v).unwrap();
    assert_eq!(fwd.pair, rev.pair);
    assert_eq!(fwd.total, rev.total);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn window_roundtrip_is_exact(
        c in 1usize..4, nx in 1usize..4, ny in 1usize..4, nz in 1usize..4,
        wx in 1usize..4, wy in 1usize..3, wz in 1usize..3, seed in 0u64..1000,
    ) {
        let shape = [c, nx * wx, ny * wy, nz * wz];
        let x = uniform(&shape, seed, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let g = tape.window_partition(v, [wx, wy, wz]).unwrap();
        prop_assert_eq!(tape.shape(g.windows), &[nx * ny * nz, wx * wy * wz, c][..]);
        let m = tape.window_merge(&g).unwrap();
        prop_assert_eq!(tape.value(m), &x);
    }

    #[test]
    fn rotation_preserves_voxel_multiset(r in 0usize..24, n in 2usize..6, seed in 0u64..1000) {
        let x = uniform(&[1, n, n, n], seed, 0.0, 1.0);
        let rotated = CubeRotation::all()[r].apply(&x).unwrap();
        let mut a: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u64> = rotated.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
