//! Numerically stable scalar special functions.
//!
//! Everything downstream (site log-likelihoods, tilted-moment quadrature,
//! rate scans pushing cavity precisions to 1e6) assumes these primitives do
//! not overflow, underflow, or cancel. Branch points are documented inline.

/// log(2π)/2, the Gaussian log-normalizer constant.
pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Stable `log(1 + e^x)`.
///
/// Branch at 0: for x > 0 compute `x + ln1p(e^{-x})`, else `ln1p(e^x)`, so the
/// exponential argument is never positive.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function σ(x) = 1/(1+e^{-x}), exponentiating only negative arguments.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable `log(e^a + e^b)`.
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Log-density of the standard normal at z.
pub fn ln_normal_pdf(z: f64) -> f64 {
    -0.5 * z * z - HALF_LN_2PI
}

/// Standard normal CDF via erfc; accurate down to Φ(z) ≈ 1e-300 but prefer
/// [`ln_normal_cdf`] below z ≈ -8 where the log is what matters.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Stable log of the standard normal CDF.
///
/// Branch point at z = -8: above it, `ln(erfc(-z/√2)/2)` (erfc takes a
/// positive argument there, so no cancellation); below it, the asymptotic
/// Mills-ratio series Φ(z) = φ(z)/(-z) · Σ_k (-1)^k (2k-1)!!/z^{2k}, summed
/// until the terms stop decreasing. At |z| = 8 the truncated series already
/// agrees with erfc to full double precision, so the branch is seamless.
pub fn ln_normal_cdf(z: f64) -> f64 {
    if z >= -8.0 {
        (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).ln()
    } else {
        let inv_z2 = 1.0 / (z * z);
        let mut series = 1.0;
        let mut term = 1.0;
        let mut k = 0u32;
        loop {
            let next = -term * (2.0 * f64::from(k) + 1.0) * inv_z2;
            if next.abs() >= term.abs() || next.abs() < 1e-18 {
                break;
            }
            series += next;
            term = next;
            k += 1;
        }
        ln_normal_pdf(z) - (-z).ln() + series.ln()
    }
}

/// Inverse Mills ratio λ(z) = φ(z)/Φ(z), computed in log space so it stays
/// finite for arbitrarily negative z (where λ(z) ≈ -z).
pub fn inverse_mills(z: f64) -> f64 {
    (ln_normal_pdf(z) - ln_normal_cdf(z)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with mpmath at 40 digits.

    #[test]
    fn softplus_matches_references() {
        assert!((softplus(40.0) - 40.00000000000000000424835).abs() < 1e-13);
        assert!((softplus(-3.0) - 0.04858735157374205875893).abs() < 1e-16);
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(-800.0), 0.0);
    }

    #[test]
    fn logistic_endpoints() {
        assert_eq!(logistic(0.0), 0.5);
        assert!((logistic(3.0) + logistic(-3.0) - 1.0).abs() < 1e-15);
        assert!(logistic(-745.0) >= 0.0);
        assert!(logistic(745.0) <= 1.0);
    }

    #[test]
    fn log_sum_exp_matches_references() {
        assert!((log_sum_exp(0.5, 2.0) - 2.201413277982752409499).abs() < 1e-15);
        assert!((log_sum_exp(1234.0, 1232.0) - 1234.126928011042972496444).abs() < 1e-12);
        // naive evaluation overflows here
        assert!((1234.0f64.exp() + 1232.0f64.exp()).ln().is_infinite());
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, 2.0), 2.0);
    }

    #[test]
    fn ln_normal_cdf_matches_references() {
        let cases = [
            (1.3, -0.1018118026676550389494),
            (0.0, -0.6931471805599453094172),
            (-1.0, -1.841021645009263505771),
            (-5.5, -17.77937635262526051059),
            (-7.9, -34.20622817098171312617),
            (-8.0, -35.0134371599145498955),
            (-8.1, -35.83050289080147474466),
            (-12.0, -75.41067300156879593884),
            (-20.0, -203.9171553710972639368),
            (-40.0, -804.6084420137537881666),
            (-200.0, -20006.21728089819040209),
        ];
        for (z, want) in cases {
            let got = ln_normal_cdf(z);
            let rel = ((got - want) / want).abs();
            assert!(rel < 1e-13, "lnPhi({z}) = {got}, want {want}, rel {rel:e}");
        }
    }

    #[test]
    fn ln_normal_cdf_branch_is_seamless() {
        // the erfc and series branches must agree where they meet
        for z in [-8.0 + 1e-9, -8.0, -8.0 - 1e-9] {
            let erfc_side = (0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)).ln();
            let got = ln_normal_cdf(z);
            assert!(((got - erfc_side) / erfc_side).abs() < 1e-13);
        }
    }

    #[test]
    fn inverse_mills_matches_references() {
        let cases = [
            (0.0, 0.7978845608028653558799),
            (-2.0, 2.373215532822840867299),
            (-10.0, 10.09809323396251196284),
            (-30.0, 30.03325966743367703707),
        ];
        for (z, want) in cases {
            let got = inverse_mills(z);
            assert!(((got - want) / want).abs() < 1e-13, "mills({z}) = {got}");
        }
    }
}
