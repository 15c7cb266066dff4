//! Central-difference verification of tape gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which coordinates of each input get perturbed.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// A fixed-seed random subset of at most `count` coordinates per input.
    Sample {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Gradients smaller than this in magnitude are compared against it
    /// instead of against themselves.
    pub floor: f64,
    pub coords: Coords,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-6,
            coords: Coords::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, coordinate)` of the worst mismatch.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error used throughout the verification suite.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, coordinate by coordinate.
pub fn grad_check_many<F>(mut f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        let v = t.value(o);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let idx: Vec<usize> = match cfg.coords {
            Coords::All => (0..input.len()).collect(),
            Coords::Sample { count, seed } => {
                if count >= input.len() {
                    (0..input.len()).collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
                    let mut v = sample(&mut rng, input.len(), count).into_vec();
                    v.sort_unstable();
                    v
                }
            }
        };
        for i in idx {
            let x0 = input.data()[i];
            work[k].data_mut()[i] = x0 + cfg.eps;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - cfg.eps;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[k].data()[i];
            let e = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            if e > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = e;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input convenience wrapper; returns the worst relative error.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        eps,
        ..GradCheckConfig::default()
    };
    grad_check_many(|t, v| f(t, v[0]), core::slice::from_ref(x), &cfg).map(|r| r.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 7.0, 2.5]).unwrap();
        let e = grad_check(|t, v| t.sum(v), &x, 1e-4).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn detects_a_wrong_rule() {
        let x = Tensor::new(&[3], vec![0.5, 1.0, 2.0]).unwrap();
        let e = grad_check(
            |t, v| {
                let val = t.value(v).map(|a| a * a);
                // claims d(x²)/dx = x
                let y = t.custom("bad_square", &[v], val, |ctx| {
                    vec![Some(ctx.grad_out.zip_map(ctx.inputs[0], |g, a| g * a).unwrap())]
                })?;
                t.sum(y)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(e > 0.4, "{e}");
    }
}
