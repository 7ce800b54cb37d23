//! Conditional value distributions and the normal-distribution special
//! functions they need. All laws live on a bounded support inside [0, 1]
//! and are sampled by inverse CDF, so a single uniform draw per value
//! keeps sampling deterministic under any seeding scheme.

use std::f64::consts::PI;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF (Wichura's PPND16 rational approximation,
/// relative error below 1e-15 over (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile requires p in (0,1), got {p}");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0)
            * q;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-6)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

pub fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Conditional value law for one bidder-item pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Law {
    /// Normal(mean, sd) truncated to [0, 1].
    TruncNormal { mean: f64, sd: f64 },
    /// Density proportional to rate * exp(-rate * t), truncated to [0, 1].
    TruncExp { rate: f64 },
    /// Uniform on [0, upper].
    Uniform { upper: f64 },
}

impl Law {
    /// Upper end of the support.
    pub fn upper(&self) -> f64 {
        match *self {
            Law::TruncNormal { .. } | Law::TruncExp { .. } => 1.0,
            Law::Uniform { upper } => upper,
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= self.upper() {
            return 1.0;
        }
        match *self {
            Law::TruncNormal { mean, sd } => {
                let lo = normal_cdf((0.0 - mean) / sd);
                let hi = normal_cdf((1.0 - mean) / sd);
                ((normal_cdf((t - mean) / sd) - lo) / (hi - lo)).clamp(0.0, 1.0)
            }
            Law::TruncExp { rate } => {
                let z = 1.0 - (-rate).exp();
                (1.0 - (-rate * t).exp()) / z
            }
            Law::Uniform { upper } => t / upper,
        }
    }

    pub fn pdf(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.upper() {
            return 0.0;
        }
        match *self {
            Law::TruncNormal { mean, sd } => {
                let lo = normal_cdf((0.0 - mean) / sd);
                let hi = normal_cdf((1.0 - mean) / sd);
                normal_pdf((t - mean) / sd) / (sd * (hi - lo))
            }
            Law::TruncExp { rate } => {
                let z = 1.0 - (-rate).exp();
                rate * (-rate * t).exp() / z
            }
            Law::Uniform { upper } => 1.0 / upper,
        }
    }

    /// Inverse CDF; `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0 - 1e-16);
        match *self {
            Law::TruncNormal { mean, sd } => {
                let lo = normal_cdf((0.0 - mean) / sd);
                let hi = normal_cdf((1.0 - mean) / sd);
                let p = lo + u * (hi - lo);
                (mean + sd * normal_quantile(p)).clamp(0.0, 1.0)
            }
            Law::TruncExp { rate } => {
                let z = 1.0 - (-rate).exp();
                (-(1.0 - u * z).ln() / rate).clamp(0.0, 1.0)
            }
            Law::Uniform { upper } => u * upper,
        }
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> f64 {
        self.quantile(rng.gen::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_inverts_cdf_to_high_accuracy() {
        for &p in &[
            1e-10, 1e-6, 1e-3, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999, 1.0 - 1e-6,
        ] {
            let z = normal_quantile(p);
            let back = normal_cdf(z);
            assert!(
                (back - p).abs() / p.min(1.0 - p).max(1e-300) < 1e-9,
                "p={p}, z={z}, back={back}"
            );
        }
    }

    #[test]
    fn truncated_normal_is_symmetric_at_half() {
        // mean 0.5 on [0,1]: truncation is symmetric, so CDF(0.5) = 0.5.
        let law = Law::TruncNormal { mean: 0.5, sd: 0.1 };
        assert!((law.cdf(0.5) - 0.5).abs() < 1e-12);
        assert!((law.quantile(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_cdf_is_linear() {
        let law = Law::Uniform { upper: 0.8 };
        assert!((law.cdf(0.4) - 0.5).abs() < 1e-12);
        assert_eq!(law.cdf(0.9), 1.0);
        assert_eq!(law.cdf(-0.1), 0.0);
    }

    #[test]
    fn quantile_and_cdf_round_trip() {
        let laws = [
            Law::TruncNormal { mean: 2.0 / 11.0, sd: 0.05 },
            Law::TruncNormal { mean: 5.0 / 6.0, sd: 0.1 },
            Law::TruncExp { rate: 0.5 },
            Law::Uniform { upper: 0.37 },
        ];
        for law in laws {
            for i in 1..40 {
                let u = i as f64 / 40.0;
                let t = law.quantile(u);
                assert!(
                    (law.cdf(t) - u).abs() < 1e-9,
                    "{law:?}: u={u}, t={t}, cdf={}",
                    law.cdf(t)
                );
            }
        }
    }

    #[test]
    fn pdf_integrates_to_one_by_simpson_quadrature() {
        let laws = [
            Law::TruncNormal { mean: 0.5, sd: 0.1 },
            Law::TruncNormal { mean: 2.0 / 11.0, sd: 0.05 },
            Law::TruncExp { rate: 1.0 / 6.0 },
            Law::TruncExp { rate: 0.5 },
            Law::Uniform { upper: 0.63 },
        ];
        for law in laws {
            let hi = law.upper();
            let steps = 4096;
            let h = hi / steps as f64;
            let mut acc = law.pdf(0.0) + law.pdf(hi);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * law.pdf(i as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-6, "{law:?}: integral {integral}");
        }
    }
}
