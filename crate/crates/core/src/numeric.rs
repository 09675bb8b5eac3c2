//! Small numeric utilities shared by the kernels: compensated summation,
//! seed derivation, stable scalar functions and fixed-precision formatting.

use sha2::{Digest, Sha256};

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl Extend<f64> for KahanSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

/// Compensated sum of an iterator.
pub fn ksum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    let mut acc = KahanSum::new();
    acc.extend(iter);
    acc.value()
}

/// Derives an independent 64-bit seed from a root seed and a list of string
/// labels. Labels are length-prefixed so `("ab", "c")` and `("a", "bc")`
/// never collide.
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`, used as the L1 subgradient.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `log(sum(exp(z)))` computed with a max shift, plus the softmax weights.
pub fn log_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total = ksum(exps.iter().copied());
    let weights = exps.iter().map(|e| e / total).collect();
    (max + total.ln(), weights)
}

/// Denominator floor for [`relative_error`] in gradient checks. Central
/// differences carry roundoff of order `eps * |f| / h` (about 1e-10 for
/// step 1e-5), so gradient entries much smaller than this floor are judged
/// on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative error used by every gradient check in the crate:
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Formats `x` with `digits` significant digits, trimming trailing zeros
/// (the behaviour of C's `%.{digits}g`).
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -5 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        return format!("{mantissa}e{exp}");
    }
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut xs = vec![1e16, 1.0, -1e16];
        assert_eq!(ksum(xs.iter().copied()), 1.0);
        xs.reverse();
        assert_eq!(ksum(xs.iter().copied()), 1.0);
    }

    #[test]
    fn derived_seeds_are_label_sensitive() {
        let a = derive_seed(7, &["ab", "c"]);
        let b = derive_seed(7, &["a", "bc"]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(7, &["ab", "c"]));
        assert_ne!(a, derive_seed(8, &["ab", "c"]));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(std::f64::consts::LN_2, 15), "0.693147180559945");
        assert_eq!(fmt_sig(0.0, 15), "0");
        assert_eq!(fmt_sig(3.12, 15), "3.12");
        assert_eq!(fmt_sig(-14.0, 15), "-14");
        assert_eq!(fmt_sig(1.5e-9, 15), "1.5e-9");
    }

    #[test]
    fn log_sum_exp_matches_naive() {
        let z = [0.3, -1.2, 2.5];
        let naive: f64 = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
        let (lse, w) = log_sum_exp(&z);
        assert!((lse - naive).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
