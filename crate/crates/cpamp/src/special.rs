//! Scalar normal-distribution helpers evaluated in a numerically stable way.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Probit scale used to approximate the logistic derivative: sqrt(pi/8).
pub const PROBIT_GAMMA: f64 = 0.626_657_068_657_750_1;

// Below this point the continued fraction is used for the lower tail.
const TAIL_SWITCH: f64 = -5.0;

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn log_norm_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * LN_2PI
}

/// Density of N(mean, var) at x.
pub fn log_normal_density(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * d * d / var - 0.5 * (LN_2PI + var.ln())
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

// Phi(-t) / phi(t) for t >= 5 via the Laplace continued fraction.
fn lower_tail_ratio(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=120).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

pub fn log_norm_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        log_norm_pdf(x) + lower_tail_ratio(-x).ln()
    } else if x > 5.0 {
        (-norm_cdf(-x)).ln_1p()
    } else {
        norm_cdf(x).ln()
    }
}

/// Inverse Mills ratio phi(x) / Phi(x).
pub fn mills(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        1.0 / lower_tail_ratio(-x)
    } else {
        norm_pdf(x) / norm_cdf(x)
    }
}

/// Logistic sigmoid, the derivative of log(1 + e^z).
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    if lse == f64::NEG_INFINITY {
        let u = 1.0 / xs.len() as f64;
        xs.iter_mut().for_each(|x| *x = u);
        return lse;
    }
    xs.iter_mut().for_each(|x| *x = (*x - lse).exp());
    lse
}

/// Mean of X conditioned on X >= 0 for X ~ N(mu, sd^2).
pub fn truncated_mean_upper(mu: f64, sd: f64) -> f64 {
    mu + sd * mills(mu / sd)
}

/// Mean of X conditioned on X < 0 for X ~ N(mu, sd^2).
pub fn truncated_mean_lower(mu: f64, sd: f64) -> f64 {
    mu - sd * mills(-mu / sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_values() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        let e = norm_cdf(1.0) - 0.841_344_746_068_542_9;
        assert!(e.abs() < 1e-14, "{e:e}");
        assert!((norm_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-16);
    }

    #[test]
    fn log_cdf_is_continuous_across_switches() {
        for &x in &[TAIL_SWITCH, 5.0] {
            let a = log_norm_cdf(x - 1e-9);
            let b = log_norm_cdf(x + 1e-9);
            assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()), "{a} {b}");
        }
        // Phi(-40) from the asymptotic series phi(40)/40 * (1 - 1/40^2 + 3/40^4).
        let t: f64 = 40.0;
        let expect = log_norm_pdf(t) - t.ln() + (1.0 - 1.0 / (t * t) + 3.0 / t.powi(4)).ln();
        assert!((log_norm_cdf(-t) - expect).abs() < 1e-8);
    }

    #[test]
    fn mills_limits() {
        assert!((mills(0.0) - (2.0 / PI).sqrt()).abs() < 1e-14);
        // Lower tail behaves like -x.
        assert!((mills(-30.0) / 30.0 - 1.0).abs() < 2e-3);
        assert!(mills(40.0) < 1e-300);
    }

    #[test]
    fn truncated_mean_half_normal() {
        assert!((truncated_mean_upper(0.0, 1.0) - 0.797_884_560_802_865_4).abs() < 1e-12);
        assert!((truncated_mean_lower(0.0, 1.0) + 0.797_884_560_802_865_4).abs() < 1e-12);
    }

    #[test]
    fn probit_constant() {
        assert!((PROBIT_GAMMA - (PI / 8.0).sqrt()).abs() < 1e-15);
        assert!((PROBIT_GAMMA - 0.626657).abs() < 1e-6);
    }

    #[test]
    fn softmax_handles_all_neg_inf() {
        let mut v = vec![f64::NEG_INFINITY; 3];
        softmax_in_place(&mut v);
        assert!(v.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }
}
