//! Fusion quality metrics: PSNR, SSIM, NMI and FMI.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::Tape;
use crate::error::{shape_err, Error, Result};
use crate::objectives;
use crate::real::Real;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Histogram bins for NMI and FMI.
pub const HIST_BINS: usize = 64;

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for peak value 1.
pub fn psnr<T: Real>(i: &Tensor<T>, j: &Tensor<T>) -> Result<f64> {
    check_same(i, j, "psnr")?;
    let mut acc = 0.0;
    for (&a, &b) in i.data().iter().zip(j.data()) {
        let d = a.as_f64() - b.as_f64();
        acc += d * d;
    }
    let mse = acc / i.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * Float::log10(1.0 / mse))
}

/// Mean local SSIM, the same definition as the training objective.
pub fn ssim<T: Real>(i: &Tensor<T>, j: &Tensor<T>) -> Result<f64> {
    check_same(i, j, "ssim")?;
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(i.cast());
    let b = tape.constant(j.cast());
    let s = objectives::ssim(&mut tape, a, b)?;
    Ok(tape.value(s).item())
}

fn entropy(counts: &[u64], total: f64) -> f64 {
    let mut h = 0.0;
    for &n in counts {
        if n > 0 {
            let p = n as f64 / total;
            h -= p * Float::ln(p);
        }
    }
    h
}

/// Bin index of `v` among `bins` equal-width bins over `[lo, hi]`.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = Float::floor((v - lo) / (hi - lo) * bins as f64);
    if t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

/// `(H(a), H(b), H(a,b))` of two already-binned sequences.
fn entropies(a: &[usize], b: &[usize], bins: usize) -> (f64, f64, f64) {
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    let mut hab = vec![0u64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        ha[x] += 1;
        hb[y] += 1;
        hab[x * bins + y] += 1;
    }
    let n = a.len() as f64;
    (entropy(&ha, n), entropy(&hb, n), entropy(&hab, n))
}

/// Studholme normalised mutual information `(H(I) + H(J)) / H(I, J)` over
/// `bins` bins on `[0, 1]`, natural log. Two constant images score 2.
pub fn nmi<T: Real>(i: &Tensor<T>, j: &Tensor<T>, bins: usize) -> Result<f64> {
    check_same(i, j, "nmi")?;
    let bi: Vec<usize> = i.data().iter().map(|v| bin_of(v.as_f64(), 0.0, 1.0, bins)).collect();
    let bj: Vec<usize> = j.data().iter().map(|v| bin_of(v.as_f64(), 0.0, 1.0, bins)).collect();
    let (h1, h2, h12) = entropies(&bi, &bj, bins);
    if h12 == 0.0 {
        return Ok(2.0);
    }
    Ok((h1 + h2) / h12)
}

/// Gradient magnitude: central differences along every axis of extent > 1,
/// one-sided at the borders.
pub fn gradient_magnitude(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let mut sq = vec![0.0; x.len()];
    for axis in 0..shape.len() {
        let len = shape[axis];
        if len < 2 {
            continue;
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for k in 0..len {
                for r in 0..inner {
                    let at = |m: usize| x[(o * len + m) * inner + r];
                    let d = if k == 0 {
                        at(1) - at(0)
                    } else if k == len - 1 {
                        at(len - 1) - at(len - 2)
                    } else {
                        (at(k + 1) - at(k - 1)) / 2.0
                    };
                    sq[(o * len + k) * inner + r] += d * d;
                }
            }
        }
    }
    sq.into_iter().map(Float::sqrt).collect()
}

/// Feature mutual information on gradient-magnitude maps, normalised as
/// `2·MI / (H1 + H2)`. Each map is binned over its own value range. Two
/// featureless images score 1.
pub fn fmi<T: Real>(i: &Tensor<T>, j: &Tensor<T>, bins: usize) -> Result<f64> {
    check_same(i, j, "fmi")?;
    let fi = gradient_magnitude(&i.cast::<f64>().into_data(), i.shape());
    let fj = gradient_magnitude(&j.cast::<f64>().into_data(), j.shape());
    let binned = |f: &[f64]| -> Vec<usize> {
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        f.iter().map(|&v| bin_of(v, lo, hi, bins)).collect()
    };
    let (h1, h2, h12) = entropies(&binned(&fi), &binned(&fj), bins);
    let hsum = h1 + h2;
    if hsum == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * (hsum - h12) / hsum)
}

/// Whether metrics are computed on one axial slice or on the whole volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Slice at this index along the last (axial) axis; `None` = middle.
    Slice2d(Option<usize>),
    Volume3d,
}

impl EvalMode {
    pub fn label(&self) -> &'static str {
        match self {
            EvalMode::Slice2d(_) => "slice2d",
            EvalMode::Volume3d => "volume3d",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Nmi,
    Fmi,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::Nmi, Metric::Fmi];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Nmi => "nmi",
            Metric::Fmi => "fmi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricScore {
    pub metric: Metric,
    pub vs_mri: f64,
    pub vs_pet: f64,
    pub mean: f64,
}

impl MetricScore {
    pub fn new(metric: Metric, vs_mri: f64, vs_pet: f64) -> Self {
        Self {
            metric,
            vs_mri,
            vs_pet,
            mean: (vs_mri + vs_pet) / 2.0,
        }
    }
}

/// Metrics of one fused sample against both sources.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionReport {
    pub sample: String,
    pub mode: EvalMode,
    /// Axial index actually used in slice mode.
    pub slice: Option<usize>,
    pub scores: Vec<MetricScore>,
}

impl FusionReport {
    pub fn score(&self, m: Metric) -> Option<&MetricScore> {
        self.scores.iter().find(|s| s.metric == m)
    }
}

/// Extracts axial slice `z` of a `[.., X, Y, Z]` volume as an `[X, Y]` image.
pub fn axial_slice<T: Real>(v: &Tensor<T>, z: usize) -> Result<Tensor<T>> {
    let [x, y, zs] = v.spatial()?;
    if v.len() != x * y * zs {
        return Err(shape_err(
            "axial_slice",
            format!("single-channel volume expected, got {:?}", v.shape()),
        ));
    }
    if z >= zs {
        return Err(Error::SliceOutOfRange { index: z, extent: zs });
    }
    let d = v.data();
    Tensor::new(&[x, y], (0..x * y).map(|p| d[p * zs + z]).collect())
}

fn all_metrics<T: Real>(f: &Tensor<T>, r: &Tensor<T>) -> Result<[f64; 4]> {
    Ok([psnr(f, r)?, ssim(f, r)?, nmi(f, r, HIST_BINS)?, fmi(f, r, HIST_BINS)?])
}

/// Scores `fused` against `mri` and `pet` under `mode`.
pub fn evaluate_sample<T: Real>(
    sample: &str,
    fused: &Tensor<T>,
    mri: &Tensor<T>,
    pet: &Tensor<T>,
    mode: EvalMode,
) -> Result<FusionReport> {
    check_same(fused, mri, "evaluate")?;
    check_same(fused, pet, "evaluate")?;
    let (slice, vm, vp) = match mode {
        EvalMode::Volume3d => {
            let vm = all_metrics(fused, mri)?;
            let vp = all_metrics(fused, pet)?;
            (None, vm, vp)
        }
        EvalMode::Slice2d(index) => {
            let zs = fused.spatial()?[2];
            let z = index.unwrap_or(zs / 2);
            let f = axial_slice(fused, z)?;
            let vm = all_metrics(&f, &axial_slice(mri, z)?)?;
            let vp = all_metrics(&f, &axial_slice(pet, z)?)?;
            (Some(z), vm, vp)
        }
    };
    let scores = Metric::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| MetricScore::new(m, vm[k], vp[k]))
        .collect();
    Ok(FusionReport {
        sample: sample.into(),
        mode,
        slice,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let h = (i as u64 + 17).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_mul(0x94D0_49BB_1331_11EB);
            let h = (h ^ (h >> 29)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            ((h >> 11) as f64) / ((1u64 << 53) as f64)
        })
    }

    #[test]
    fn psnr_cases() {
        let a = noise(&[8, 8, 8], 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let z = Tensor::<f64>::zeros(&[4, 4, 4]);
        let b = Tensor::full(&[4, 4, 4], 0.1);
        assert!((psnr(&z, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn self_information_is_exact() {
        let a = noise(&[8, 8, 8], 2);
        assert_eq!(nmi(&a, &a, HIST_BINS).unwrap(), 2.0);
        assert_eq!(fmi(&a, &a, HIST_BINS).unwrap(), 1.0);
    }

    #[test]
    fn independent_noise_scores_low() {
        let a = noise(&[32, 32, 32], 3);
        let b = noise(&[32, 32, 32], 4);
        assert!((nmi(&a, &b, HIST_BINS).unwrap() - 1.0).abs() < 0.05);
        assert!(fmi(&a, &b, HIST_BINS).unwrap() < 0.1);
    }

    #[test]
    fn slice_mode_picks_middle() {
        let a = noise(&[1, 8, 8, 8], 5);
        let r = evaluate_sample("s", &a, &a, &a, EvalMode::Slice2d(None)).unwrap();
        assert_eq!(r.slice, Some(4));
        assert!(matches!(
            evaluate_sample("s", &a, &a, &a, EvalMode::Slice2d(Some(8))),
            Err(Error::SliceOutOfRange { .. })
        ));
    }

    #[test]
    fn degenerate_report() {
        let a = noise(&[8, 8, 8], 6);
        let r = evaluate_sample("s", &a, &a, &a, EvalMode::Volume3d).unwrap();
        assert_eq!(r.score(Metric::Ssim).unwrap().mean, 1.0);
        assert_eq!(r.score(Metric::Nmi).unwrap().mean, 2.0);
        assert_eq!(r.score(Metric::Fmi).unwrap().mean, 1.0);
        assert_eq!(r.score(Metric::Psnr).unwrap().mean, 99.0);
    }
}
