//! Training objectives: SSIM, NCC, L1 and the modality balance term.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::real::{c, Real};
use crate::tensor::Tensor;

/// Side of the cubic SSIM window.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err(
            op,
            alloc::format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

/// Local box mean over every axis of extent > 1 (valid positions only).
fn local_mean<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let axes: Vec<usize> = (0..tape.shape(x).len()).filter(|&a| tape.shape(x)[a] > 1).collect();
    let mut y = x;
    for a in axes {
        y = tape.box_mean_axis(y, a, SSIM_WINDOW)?;
    }
    Ok(y)
}

/// Mean local SSIM with a uniform 7-wide window along every non-singleton
/// axis, population moments and constants for a dynamic range of 1.
pub fn ssim<T: Real>(tape: &mut Tape<T>, i: Var, j: Var) -> Result<Var> {
    same_shape(tape, i, j, "ssim")?;
    if let Some(&e) = tape.shape(i).iter().find(|&&e| e > 1 && e < SSIM_WINDOW) {
        return Err(Error::ExtentBelowWindow {
            extent: e,
            window: SSIM_WINDOW,
        });
    }
    let mu_i = local_mean(tape, i)?;
    let mu_j = local_mean(tape, j)?;
    let ii = tape.mul(i, i)?;
    let jj = tape.mul(j, j)?;
    let ij = tape.mul(i, j)?;
    let e_ii = local_mean(tape, ii)?;
    let e_jj = local_mean(tape, jj)?;
    let e_ij = local_mean(tape, ij)?;
    let mu_ii = tape.mul(mu_i, mu_i)?;
    let mu_jj = tape.mul(mu_j, mu_j)?;
    let mu_ij = tape.mul(mu_i, mu_j)?;
    let var_i = tape.sub(e_ii, mu_ii)?;
    let var_j = tape.sub(e_jj, mu_jj)?;
    let cov = tape.sub(e_ij, mu_ij)?;

    let num_l = tape.scale(mu_ij, c(2.0))?;
    let num_l = tape.add_scalar(num_l, c(SSIM_C1))?;
    let num_s = tape.scale(cov, c(2.0))?;
    let num_s = tape.add_scalar(num_s, c(SSIM_C2))?;
    let den_l = tape.add(mu_ii, mu_jj)?;
    let den_l = tape.add_scalar(den_l, c(SSIM_C1))?;
    let den_s = tape.add(var_i, var_j)?;
    let den_s = tape.add_scalar(den_s, c(SSIM_C2))?;
    let num = tape.mul(num_l, num_s)?;
    let den = tape.mul(den_l, den_s)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// Global zero-mean normalised cross-correlation.
///
/// A constant input has no defined correlation; the result is then a constant
/// 0 and a warning is logged.
pub fn ncc<T: Real>(tape: &mut Tape<T>, i: Var, j: Var) -> Result<Var> {
    same_shape(tape, i, j, "ncc")?;
    let flat = |t: &Tensor<T>| t.data().iter().all(|&v| v == t.data()[0]);
    if flat(tape.value(i)) || flat(tape.value(j)) {
        log::warn!("ncc: zero-variance input, correlation defined as 0");
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mi = tape.mean(i)?;
    let mj = tape.mean(j)?;
    let a = tape.sub(i, mi)?;
    let b = tape.sub(j, mj)?;
    let ab = tape.mul(a, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let sab = tape.sum(ab)?;
    let saa = tape.sum(aa)?;
    let sbb = tape.sum(bb)?;
    let den = tape.mul(saa, sbb)?;
    let den = tape.sqrt(den)?;
    tape.div(sab, den)
}

/// Mean absolute difference.
pub fn l1<T: Real>(tape: &mut Tape<T>, i: Var, j: Var) -> Result<Var> {
    same_shape(tape, i, j, "l1")?;
    let d = tape.sub(i, j)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `|ssim(f, mri) − ssim(f, pet)|` from already computed similarities.
pub fn pair_from_ssim<T: Real>(tape: &mut Tape<T>, s_mri: Var, s_pet: Var) -> Result<Var> {
    let d = tape.sub(s_mri, s_pet)?;
    tape.abs(d)
}

pub fn pair_loss<T: Real>(tape: &mut Tape<T>, fused: Var, mri: Var, pet: Var) -> Result<Var> {
    let sm = ssim(tape, fused, mri)?;
    let sp = ssim(tape, fused, pet)?;
    pair_from_ssim(tape, sm, sp)
}

/// Handles to every loss component on the tape. Similarities are raw; only
/// `total` applies the `1 − s` transform.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub ssim_mri: Var,
    pub ssim_pet: Var,
    pub ncc_mri: Var,
    pub ncc_pet: Var,
    pub l1_mri: Var,
    pub l1_pet: Var,
    pub pair: Var,
    pub total: Var,
}

/// Plain numbers of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub ssim_mri: f64,
    pub ssim_pet: f64,
    pub ncc_mri: f64,
    pub ncc_pet: f64,
    pub l1_mri: f64,
    pub l1_pet: f64,
    pub pair: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let g = |v: Var| tape.value(v).item().as_f64();
        LossValues {
            ssim_mri: g(self.ssim_mri),
            ssim_pet: g(self.ssim_pet),
            ncc_mri: g(self.ncc_mri),
            ncc_pet: g(self.ncc_pet),
            l1_mri: g(self.l1_mri),
            l1_pet: g(self.l1_pet),
            pair: g(self.pair),
            total: g(self.total),
        }
    }
}

impl LossValues {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.ssim_mri,
            self.ssim_pet,
            self.ncc_mri,
            self.ncc_pet,
            self.l1_mri,
            self.l1_pet,
            self.pair,
            self.total,
        ]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self {
            ssim_mri: a[0],
            ssim_pet: a[1],
            ncc_mri: a[2],
            ncc_pet: a[3],
            l1_mri: a[4],
            l1_pet: a[5],
            pair: a[6],
            total: a[7],
        }
    }

    /// Component-wise mean of several records.
    pub fn mean(records: &[LossValues]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in records {
            for (a, v) in acc.iter_mut().zip(r.as_array()) {
                *a += v;
            }
        }
        Some(Self::from_array(acc.map(|a| a / records.len() as f64)))
    }
}

/// Equally weighted sum
/// `(1−ssim_m) + (1−ssim_p) + (1−ncc_m) + (1−ncc_p) + l1_m + l1_p + pair`.
///
/// Terms are grouped pairwise per modality so that exchanging the two
/// modalities gives a bit-identical total.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, fused: Var, mri: Var, pet: Var) -> Result<LossBreakdown> {
    let ssim_mri = ssim(tape, fused, mri)?;
    let ssim_pet = ssim(tape, fused, pet)?;
    let ncc_mri = ncc(tape, fused, mri)?;
    let ncc_pet = ncc(tape, fused, pet)?;
    let l1_mri = l1(tape, fused, mri)?;
    let l1_pet = l1(tape, fused, pet)?;
    let pair = pair_from_ssim(tape, ssim_mri, ssim_pet)?;

    let one = T::one();
    let dsm = tape.rsub_scalar(one, ssim_mri)?;
    let dsp = tape.rsub_scalar(one, ssim_pet)?;
    let dnm = tape.rsub_scalar(one, ncc_mri)?;
    let dnp = tape.rsub_scalar(one, ncc_pet)?;
    let t_ssim = tape.add(dsm, dsp)?;
    let t_ncc = tape.add(dnm, dnp)?;
    let t_l1 = tape.add(l1_mri, l1_pet)?;
    let t = tape.add(t_ssim, t_ncc)?;
    let t = tape.add(t, t_l1)?;
    let total = tape.add(t, pair)?;
    Ok(LossBreakdown {
        ssim_mri,
        ssim_pet,
        ncc_mri,
        ncc_pet,
        l1_mri,
        l1_pet,
        pair,
        total,
    })
}

/// Evaluates [`total_loss`] on plain tensors.
pub fn loss_values<T: Real>(fused: &Tensor<T>, mri: &Tensor<T>, pet: &Tensor<T>) -> Result<LossValues> {
    let mut tape = Tape::new();
    let f = tape.constant(fused.clone());
    let m = tape.constant(mri.clone());
    let p = tape.constant(pet.clone());
    let lb = total_loss(&mut tape, f, m, p)?;
    Ok(lb.values(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(seed: u64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 8, 8, 8], |i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            ((h >> 11) % 10_000) as f64 / 10_000.0
        })
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn ssim_self_is_one() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(vol(1));
        let s = ssim(&mut tape, i, i).unwrap();
        assert_eq!(scalar(&tape, s), 1.0);
    }

    #[test]
    fn ssim_of_inverted_binary_is_negative() {
        let b = vol(2).map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(b.clone());
        let j = tape.constant(b.map(|v| 1.0 - v));
        let s = ssim(&mut tape, i, j).unwrap();
        assert!(scalar(&tape, s) < 0.0);
    }

    #[test]
    fn ssim_rejects_small_extent() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::zeros(&[1, 5, 8, 8]));
        assert!(matches!(ssim(&mut tape, i, i), Err(Error::ExtentBelowWindow { .. })));
    }

    #[test]
    fn ncc_identities() {
        let mut tape = Tape::<f64>::new();
        let x = vol(3);
        let i = tape.constant(x.clone());
        let neg = tape.constant(x.map(|v| -v));
        let aff = tape.constant(x.map(|v| 2.5 * v + 0.3));
        let s = ncc(&mut tape, i, i).unwrap();
        assert_eq!(scalar(&tape, s), 1.0);
        let s = ncc(&mut tape, i, neg).unwrap();
        assert_eq!(scalar(&tape, s), -1.0);
        let s = ncc(&mut tape, i, aff).unwrap();
        assert!((scalar(&tape, s) - 1.0).abs() < 1e-12);
        let flat = tape.constant(Tensor::full(&[1, 8, 8, 8], 0.5));
        let s = ncc(&mut tape, i, flat).unwrap();
        assert_eq!(scalar(&tape, s), 0.0);
    }

    #[test]
    fn l1_cases() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[4, 4, 4]));
        let o = tape.constant(Tensor::ones(&[4, 4, 4]));
        let s = l1(&mut tape, z, o).unwrap();
        assert_eq!(scalar(&tape, s), 1.0);
        let s = l1(&mut tape, o, o).unwrap();
        assert_eq!(scalar(&tape, s), 0.0);
    }

    #[test]
    fn pair_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(vol(4));
        let p = tape.constant(vol(5));
        let s = pair_loss(&mut tape, m, m, m).unwrap();
        assert_eq!(scalar(&tape, s), 0.0);
        let s = pair_loss(&mut tape, m, m, p).unwrap();
        let smp = ssim(&mut tape, m, p).unwrap();
        let expect = (1.0 - scalar(&tape, smp)).abs();
        assert!((scalar(&tape, s) - expect).abs() < 1e-15 && expect > 0.0);
        let ab = pair_loss(&mut tape, p, m, p).unwrap();
        let ba = pair_loss(&mut tape, p, p, m).unwrap();
        assert_eq!(scalar(&tape, ab), scalar(&tape, ba));
    }

    #[test]
    fn total_is_zero_for_identical_volumes_and_symmetric() {
        let v = vol(6);
        assert_eq!(loss_values(&v, &v, &v).unwrap().total, 0.0);
        let (f, a, b) = (vol(7), vol(8), vol(9));
        let x = loss_values(&f, &a, &b).unwrap();
        let y = loss_values(&f, &b, &a).unwrap();
        assert_eq!(x.total, y.total);
        assert!(x.total >= 0.0);
    }
}
