//! Low-level numeric kernels shared by the likelihood and estimator code:
//! a branch-free `exp` suitable for autovectorized inner loops, stable
//! log-sum-exp reductions, and standard-normal helpers.

/// `-0.5 * ln(2π)`, the Gaussian log-density constant.
pub const NEG_HALF_LN_2PI: f64 = -0.918_938_533_204_672_7;

/// Branch-free `e^x` accurate to ~2e-13 relative over the clamped range.
///
/// Inputs are clamped to `[-708, 708]`; in this crate the argument is always
/// a log-density difference `x - max <= 0`, where anything below `-708`
/// contributes nothing to a sum of exponentials. The body is a Cody–Waite
/// range reduction plus an order-11 polynomial, written without branches so
/// the compiler can vectorize loops over slices.
#[inline]
pub fn fast_exp(x: f64) -> f64 {
    const LOG2_E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.clamp(-708.0, 708.0);
    let k = (x * LOG2_E).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Horner evaluation of sum r^n / n! for n = 0..=11; |r| <= ln(2)/2.
    let mut p: f64 = 1.0 / 39_916_800.0; // 1/11!
    p = p.mul_add(r, 1.0 / 3_628_800.0);
    p = p.mul_add(r, 1.0 / 362_880.0);
    p = p.mul_add(r, 1.0 / 40_320.0);
    p = p.mul_add(r, 1.0 / 5_040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    // Scale by 2^k through the exponent bits; k is within [-1075, 1075] so
    // the shifted exponent cannot overflow the 11-bit field by more than the
    // clamp already rules out.
    let bits = (((k as i64) + 1023) << 52) as u64;
    p * f64::from_bits(bits)
}

/// Log-sum-exp of a small slice; `-inf` entries are skipped. Returns `-inf`
/// for an empty slice or when every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &v in values {
        if v > f64::NEG_INFINITY {
            sum += (v - max).exp();
        }
    }
    max + sum.ln()
}

/// Running (max, Σ e^{v − max}) pair for streaming log-sum-exp over blocks.
#[derive(Debug, Clone, Copy)]
pub struct LseAccumulator {
    max: f64,
    sum: f64,
}

impl LseAccumulator {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    /// Merge a block that has local maximum `max` and `sum = Σ e^{v − max}`.
    #[inline]
    pub fn merge(&mut self, max: f64, sum: f64) {
        if sum == 0.0 || max == f64::NEG_INFINITY {
            return;
        }
        if max > self.max {
            self.sum = self.sum * fast_exp(self.max - max) + sum;
            self.max = max;
        } else {
            self.sum += sum * fast_exp(max - self.max);
        }
    }

    /// Final `log Σ e^{v}` over everything merged so far.
    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LseAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

/// Max and Σ e^{v − max} of a block, the per-block half of a streaming LSE.
#[inline]
pub fn block_max_exp_sum(block: &[f64]) -> (f64, f64) {
    let mut max = f64::NEG_INFINITY;
    for &v in block {
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return (max, 0.0);
    }
    let mut sum = 0.0;
    for &v in block {
        sum += fast_exp(v - max);
    }
    (max, sum)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (NEG_HALF_LN_2PI - 0.5 * x * x).exp()
}

/// Mean of a `Normal(mu, sd)` truncated to `[0, inf)`.
pub fn truncated_normal_mean(mu: f64, sd: f64) -> f64 {
    let alpha = -mu / sd;
    let z = 1.0 - normal_cdf(alpha);
    mu + sd * normal_pdf(alpha) / z
}

/// Sample mean and (n-1)-normalized standard deviation.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n >= 1);
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
