//! Synthetic registered MRI-like / PET-like volume pairs, cube rotations for
//! augmentation and dataset splitting.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest supported phantom edge length.
pub const MIN_SIZE: usize = 16;

/// Parameters of one synthetic pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Edge length of the cubic volumes.
    pub size: usize,
    pub min_ellipsoids: usize,
    pub max_ellipsoids: usize,
    /// Thickness in voxels of the bright tissue boundaries in the MRI-like volume.
    pub line_width: usize,
    /// Point-spread blur of the MRI-like volume (voxels).
    pub mri_blur: f64,
    /// Smoothing of the PET-like activity map (voxels).
    pub pet_blur: f64,
    /// Standard deviation of the additive Gaussian noise, before normalisation.
    pub noise: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed,
            size,
            min_ellipsoids: 3,
            max_ellipsoids: 8,
            line_width: 1,
            mri_blur: 0.7,
            pet_blur: 2.0,
            noise: 0.005,
        }
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::new(0, 32)
    }
}

/// One registered sample: both volumes are `[1, n, n, n]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePair {
    pub mri: Tensor<f32>,
    pub pet: Tensor<f32>,
}

impl VolumePair {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.mri.shape();
        [s[1], s[2], s[3]]
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    intensity: f64,
    activity: f64,
}

/// Deterministically generates a pair from `spec`.
///
/// A head-shaped ellipsoid holds 3 to 8 random tissue ellipsoids. The
/// MRI-like volume shows tissue intensities with bright boundaries; the
/// PET-like volume shows smooth activity concentrated in a random subset of
/// the tissues.
pub fn generate_phantom_pair(spec: &PhantomSpec) -> Result<VolumePair> {
    let n = spec.size;
    if n < MIN_SIZE {
        return Err(Error::SizeTooSmall(n));
    }
    if spec.min_ellipsoids == 0 || spec.min_ellipsoids > spec.max_ellipsoids {
        return Err(Error::InvalidConfig(alloc::format!(
            "ellipsoid count range {}..={}",
            spec.min_ellipsoids,
            spec.max_ellipsoids
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nf = n as f64;
    let mid = nf / 2.0;
    let count = rng.gen_range(spec.min_ellipsoids..=spec.max_ellipsoids);
    let mut hot: Vec<bool> = (0..count).map(|_| rng.gen_bool(0.5)).collect();
    hot[rng.gen_range(0..count)] = true;
    let tissues: Vec<Ellipsoid> = hot
        .iter()
        .map(|&h| {
            let center = core::array::from_fn(|_| mid + rng.gen_range(-1.0..1.0) * 0.2 * nf);
            let radii = core::array::from_fn(|_| (0.08 + rng.gen_range(0.0..0.12)) * nf);
            Ellipsoid {
                center,
                radii,
                intensity: 0.45 + 0.4 * rng.gen::<f64>(),
                activity: if h { 0.6 + 0.4 * rng.gen::<f64>() } else { 0.3 },
            }
        })
        .collect();

    // labels: 0 outside, 1 head background, k+2 tissue k (later ones on top)
    let head_r = 0.42 * nf;
    let inside = |p: [f64; 3], c: [f64; 3], r: [f64; 3]| {
        (0..3).map(|a| Float::powi((p[a] - c[a]) / r[a], 2)).sum::<f64>() <= 1.0
    };
    let mut label = vec![0usize; n * n * n];
    for (idx, l) in label.iter_mut().enumerate() {
        let p = [
            (idx / (n * n)) as f64 + 0.5,
            ((idx / n) % n) as f64 + 0.5,
            (idx % n) as f64 + 0.5,
        ];
        if !inside(p, [mid; 3], [head_r; 3]) {
            continue;
        }
        *l = 1;
        for (k, t) in tissues.iter().enumerate() {
            if inside(p, t.center, t.radii) {
                *l = k + 2;
            }
        }
    }
    let intensity = |l: usize| match l {
        0 => 0.0,
        1 => 0.35,
        k => tissues[k - 2].intensity,
    };
    let activity = |l: usize| match l {
        0 => 0.0,
        1 => 0.25,
        k => tissues[k - 2].activity,
    };

    let boundary = boundary_mask(&label, n, spec.line_width);
    let mut mri: Vec<f64> = label
        .iter()
        .zip(&boundary)
        .map(|(&l, &b)| if b && l > 0 { 1.0 } else { intensity(l) })
        .collect();
    let mut pet: Vec<f64> = label.iter().map(|&l| activity(l)).collect();
    gaussian_blur(&mut mri, n, spec.mri_blur);
    gaussian_blur(&mut pet, n, spec.pet_blur);
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).map_err(|_| Error::InvalidConfig("noise".into()))?;
        for v in mri.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        for v in pet.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(VolumePair {
        mri: normalized(&mri, n)?,
        pet: normalized(&pet, n)?,
    })
}

fn boundary_mask(label: &[usize], n: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; label.len()];
    let strides = [n * n, n, 1];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = [idx / (n * n), (idx / n) % n, idx % n];
        'axes: for a in 0..3 {
            for d in 1..=width.max(1) {
                if pos[a] >= d && label[idx - d * strides[a]] != label[idx] {
                    *o = true;
                    break 'axes;
                }
                if pos[a] + d < n && label[idx + d * strides[a]] != label[idx] {
                    *o = true;
                    break 'axes;
                }
            }
        }
    }
    out
}

/// Index into `[0, n)` with half-sample symmetric reflection.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian smoothing of a cubic volume with reflected borders.
fn gaussian_blur(v: &mut [f64], n: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = Float::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|d| Float::exp(-(d * d) as f64 / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    let strides = [n * n, n, 1];
    let mut tmp = vec![0.0; v.len()];
    for &stride in &strides {
        for (idx, t) in tmp.iter_mut().enumerate() {
            let pos = (idx / stride) % n;
            let base = idx - pos * stride;
            let mut acc = 0.0;
            for (j, &w) in k.iter().enumerate() {
                let q = reflect(pos as isize + j as isize - radius, n);
                acc += w * v[base + q * stride];
            }
            *t = acc;
        }
        v.copy_from_slice(&tmp);
    }
}

fn normalized(v: &[f64], n: usize) -> Result<Tensor<f32>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = v.iter().map(|&x| (((x - lo) / span) as f32).clamp(0.0, 1.0)).collect();
    Tensor::new(&[1, n, n, n], data)
}

/// A proper rotation of the cube: a signed axis permutation with determinant +1.
///
/// Applying it gives `out[o] = in[s]` where `s[perm[a]]` is `o[a]`, or
/// `n − 1 − o[a]` when `flip[a]` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CubeRotation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl CubeRotation {
    pub const IDENTITY: Self = Self {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    /// All 24 rotations in a fixed order, identity first.
    pub fn all() -> Vec<Self> {
        let mut v = Vec::with_capacity(24);
        for perm in PERMS {
            let odd = (perm[0] > perm[1]) ^ (perm[0] > perm[2]) ^ (perm[1] > perm[2]);
            for bits in 0..8u8 {
                let flip = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
                let flips = flip.iter().filter(|&&f| f).count();
                if (flips % 2 == 1) == odd {
                    v.push(Self { perm, flip });
                }
            }
        }
        v
    }

    /// 90° turn about `axis` (0 = x, 1 = y, 2 = z).
    pub fn quarter_turn(axis: usize) -> Self {
        let (u, w) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        let mut perm = [0, 1, 2];
        perm[u] = w;
        perm[w] = u;
        let mut flip = [false; 3];
        flip[u] = true;
        Self { perm, flip }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Self::all()[rng.gen_range(0..24)]
    }

    /// Rotates a `[C, n, n, n]` (or `[n, n, n]`) tensor, channel by channel.
    pub fn apply<T: crate::real::Real>(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let [x, y, z] = v.spatial()?;
        if x != y || y != z {
            return Err(Error::NonCubic(v.shape().to_vec()));
        }
        let n = x;
        let vox = n * n * n;
        let src = v.data();
        let mut out = Vec::with_capacity(src.len());
        for ch in 0..src.len() / vox {
            for o in 0..vox {
                let oc = [o / (n * n), (o / n) % n, o % n];
                let mut s = [0usize; 3];
                for a in 0..3 {
                    s[self.perm[a]] = if self.flip[a] { n - 1 - oc[a] } else { oc[a] };
                }
                out.push(src[ch * vox + (s[0] * n + s[1]) * n + s[2]]);
            }
        }
        Tensor::new(v.shape(), out)
    }
}

/// Rotates both volumes of a pair by the same random cube rotation.
pub fn augment_rotate(pair: &VolumePair, rng: &mut impl Rng) -> Result<VolumePair> {
    rotate_pair(pair, CubeRotation::random(rng))
}

pub fn rotate_pair(pair: &VolumePair, r: CubeRotation) -> Result<VolumePair> {
    Ok(VolumePair {
        mri: r.apply(&pair.mri)?,
        pet: r.apply(&pair.pet)?,
    })
}

/// Disjoint train / validation / test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffled 0.8 / 0.1 / 0.1 split of `0..n`.
pub fn make_splits(n: usize, seed: u64) -> Result<Splits> {
    if n < 10 {
        return Err(Error::TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = (n as f64 * 0.1).round() as usize;
    let test = idx.split_off(n - held);
    let val = idx.split_off(n - 2 * held);
    Ok(Splits { train: idx, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_table() {
        let all = CubeRotation::all();
        assert_eq!(all.len(), 24);
        assert_eq!(all[0], CubeRotation::IDENTITY);
        for r in &all {
            let mut seen = [false; 3];
            r.perm.iter().for_each(|&p| seen[p] = true);
            assert!(seen.iter().all(|&s| s));
        }
        for a in 0..3 {
            assert!(all.contains(&CubeRotation::quarter_turn(a)));
        }
    }

    #[test]
    fn splits_paper_counts() {
        let s = make_splits(660, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (528, 66, 66));
        assert!(matches!(make_splits(9, 1), Err(Error::TooFewSamples(9))));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
    }

    #[test]
    fn too_small_rejected() {
        assert_eq!(
            generate_phantom_pair(&PhantomSpec::new(0, 12)),
            Err(Error::SizeTooSmall(12))
        );
    }
}
