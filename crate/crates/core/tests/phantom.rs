use dc2fusion_core::phantom::{generate_phantom_pair, make_splits, rotate_pair, CubeRotation, PhantomSpec};
use dc2fusion_core::Tensor;

/// Fraction of interior voxels whose central-difference gradient magnitude exceeds 0.1.
fn edge_fraction(v: &Tensor<f32>) -> f64 {
    let [n, _, _] = v.spatial().unwrap();
    let d = v.data();
    let at = |x: usize, y: usize, z: usize| d[(x * n + y) * n + z] as f64;
    let mut edges = 0usize;
    let mut total = 0usize;
    for x in 1..n - 1 {
        for y in 1..n - 1 {
            for z in 1..n - 1 {
                let gx = (at(x + 1, y, z) - at(x - 1, y, z)) / 2.0;
                let gy = (at(x, y + 1, z) - at(x, y - 1, z)) / 2.0;
                let gz = (at(x, y, z + 1) - at(x, y, z - 1)) / 2.0;
                if (gx * gx + gy * gy + gz * gz).sqrt() > 0.1 {
                    edges += 1;
                }
                total += 1;
            }
        }
    }
    edges as f64 / total as f64
}

fn sorted(v: &Tensor<f32>) -> Vec<u32> {
    let mut s: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
    s.sort_unstable();
    s
}

#[test]
fn same_seed_same_pair() {
    let a = generate_phantom_pair(&PhantomSpec::new(42, 24)).unwrap();
    let b = generate_phantom_pair(&PhantomSpec::new(42, 24)).unwrap();
    assert_eq!(a, b);
    let c = generate_phantom_pair(&PhantomSpec::new(43, 24)).unwrap();
    assert_ne!(a.mri, c.mri);
}

#[test]
fn volumes_are_normalized_and_non_degenerate() {
    for seed in 0..20 {
        let p = generate_phantom_pair(&PhantomSpec::new(seed, 32)).unwrap();
        for v in [&p.mri, &p.pet] {
            assert_eq!(v.shape(), &[1, 32, 32, 32]);
            assert!(v.data().iter().all(|x| (0.0..=1.0).contains(x)));
            let bright = v.data().iter().filter(|&&x| x > 0.5).count();
            assert!(
                bright as f64 >= 0.01 * v.len() as f64,
                "seed {seed}: {bright} bright voxels"
            );
        }
    }
}

#[test]
fn mri_carries_at_least_twice_the_edges_of_pet() {
    for seed in 0..20 {
        let p = generate_phantom_pair(&PhantomSpec::new(seed, 32)).unwrap();
        let (a, b) = (edge_fraction(&p.mri), edge_fraction(&p.pet));
        assert!(a >= 2.0 * b, "seed {seed}: mri {a:.4} vs pet {b:.4}");
    }
}

#[test]
fn four_quarter_turns_are_the_identity() {
    let p = generate_phantom_pair(&PhantomSpec::new(5, 16)).unwrap();
    for axis in 0..3 {
        let r = CubeRotation::quarter_turn(axis);
        let mut v = p.mri.clone();
        for turn in 1..=4 {
            v = r.apply(&v).unwrap();
            if turn < 4 {
                assert_ne!(v, p.mri);
            }
        }
        assert_eq!(v, p.mri);
    }
    assert_eq!(rotate_pair(&p, CubeRotation::IDENTITY).unwrap(), p);
}

#[test]
fn rotations_keep_both_value_multisets() {
    let p = generate_phantom_pair(&PhantomSpec::new(6, 16)).unwrap();
    let (sm, sp) = (sorted(&p.mri), sorted(&p.pet));
    for r in CubeRotation::all() {
        let q = rotate_pair(&p, r).unwrap();
        assert_eq!(sorted(&q.mri), sm);
        assert_eq!(sorted(&q.pet), sp);
    }
}

#[test]
fn splits_partition_the_indices() {
    for n in [10, 37, 660] {
        let s = make_splits(n, 3).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert_eq!(s.val.len(), s.test.len());
        assert_eq!(make_splits(n, 3).unwrap(), s);
    }
    assert_ne!(make_splits(100, 1).unwrap(), make_splits(100, 2).unwrap());
}
