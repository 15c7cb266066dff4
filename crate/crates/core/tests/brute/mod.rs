//! Direct scalar re-implementations of the quality metrics, written
//! without any of the library's helpers except its constants.

use dc2fusion_core::metrics::HIST_BINS;
use dc2fusion_core::objectives;

/// PSNR in dB for unit peak.
pub fn brute_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut mse = 0.0;
    for i in 0..a.len() {
        mse += (a[i] - b[i]) * (a[i] - b[i]);
    }
    mse /= a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

/// Scalar sliding-window SSIM over all valid 7³ windows.
pub fn brute_ssim(a: &[f64], b: &[f64], dims: &[usize]) -> f64 {
    let w = 7;
    let spans: Vec<usize> = dims.iter().map(|&d| if d > 1 { d - w + 1 } else { 1 }).collect();
    let wins: Vec<usize> = dims.iter().map(|&d| if d > 1 { w } else { 1 }).collect();
    let idx = |p: &[usize]| p.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i);
    let total: usize = spans.iter().product();
    let mut sum = 0.0;
    for pos in 0..total {
        let mut start = vec![0; dims.len()];
        let mut r = pos;
        for k in (0..dims.len()).rev() {
            start[k] = r % spans[k];
            r /= spans[k];
        }
        let count: usize = wins.iter().product();
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for off in 0..count {
            let mut p = vec![0; dims.len()];
            let mut r = off;
            for k in (0..dims.len()).rev() {
                p[k] = start[k] + r % wins[k];
                r /= wins[k];
            }
            let (x, y) = (a[idx(&p)], b[idx(&p)]);
            ma += x;
            mb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let n = count as f64;
        let (ma, mb) = (ma / n, mb / n);
        let va = saa / n - ma * ma;
        let vb = sbb / n - mb * mb;
        let cov = sab / n - ma * mb;
        let (c1, c2) = (objectives::SSIM_C1, objectives::SSIM_C2);
        sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    sum / total as f64
}

pub fn brute_entropies(a: &[usize], b: &[usize], bins: usize) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let h = |counts: &[f64]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0.0)
            .map(|&c| -(c / n) * (c / n).ln())
            .sum()
    };
    let mut ca = vec![0.0; bins];
    let mut cb = vec![0.0; bins];
    let mut cab = vec![0.0; bins * bins];
    for i in 0..a.len() {
        ca[a[i]] += 1.0;
        cb[b[i]] += 1.0;
        cab[a[i] * bins + b[i]] += 1.0;
    }
    (h(&ca), h(&cb), h(&cab))
}

pub fn brute_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn brute_nmi(a: &[f64], b: &[f64]) -> f64 {
    let ba: Vec<usize> = a.iter().map(|&v| brute_bin(v, 0.0, 1.0, HIST_BINS)).collect();
    let bb: Vec<usize> = b.iter().map(|&v| brute_bin(v, 0.0, 1.0, HIST_BINS)).collect();
    let (h1, h2, h12) = brute_entropies(&ba, &bb, HIST_BINS);
    (h1 + h2) / h12
}

fn brute_grad(v: &[f64], n: usize) -> Vec<f64> {
    let id = |x: usize, y: usize, z: usize| (x * n + y) * n + z;
    let d = |p: usize, lo: f64, hi: f64, len: usize| -> f64 {
        if p == 0 || p == len - 1 {
            hi - lo
        } else {
            (hi - lo) / 2.0
        }
    };
    let mut out = vec![0.0; v.len()];
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let (xl, xh) = (x.saturating_sub(1), (x + 1).min(n - 1));
                let (yl, yh) = (y.saturating_sub(1), (y + 1).min(n - 1));
                let (zl, zh) = (z.saturating_sub(1), (z + 1).min(n - 1));
                let gx = d(x, v[id(xl, y, z)], v[id(xh, y, z)], n);
                let gy = d(y, v[id(x, yl, z)], v[id(x, yh, z)], n);
                let gz = d(z, v[id(x, y, zl)], v[id(x, y, zh)], n);
                out[id(x, y, z)] = (gx * gx + gy * gy + gz * gz).sqrt();
            }
        }
    }
    out
}

pub fn brute_fmi(a: &[f64], b: &[f64], n: usize) -> f64 {
    let bin = |f: &[f64]| -> Vec<usize> {
        let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        f.iter().map(|&v| brute_bin(v, lo, hi, HIST_BINS)).collect()
    };
    let (h1, h2, h12) = brute_entropies(&bin(&brute_grad(a, n)), &bin(&brute_grad(b, n)), HIST_BINS);
    2.0 * (h1 + h2 - h12) / (h1 + h2)
}
