//! The marginal-likelihood generalization bound and the KL pushforward
//! inequality for parameter-function maps.
//!
//! The bound: with probability at least 1 - delta over the sample and
//! 1 - gamma over the posterior draw,
//!
//!   -ln(1 - eps(h)) < (-ln P(C(S)) + ln m + ln(1/delta) + ln(1/gamma)) / (m - 1)
//!
//! which inverts to eps(h) < 1 - exp(-rhs), always strictly inside (0, 1).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BoundError {
    #[error("m must be at least 2, got {0}")]
    SampleTooSmall(usize),
    #[error("log marginal likelihood must be <= 0, got {0}")]
    PositiveLogMl(f64),
    #[error("confidence parameter {name} must lie in (0, 1], got {value}")]
    BadConfidence { name: &'static str, value: f64 },
    #[error("distribution error: {0}")]
    Distribution(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundInputs {
    pub log_ml: f64,
    pub m: usize,
    pub delta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundResult {
    pub raw_rhs: f64,
    pub epsilon_bound: f64,
}

pub fn compute_bound(inputs: &BoundInputs) -> Result<BoundResult, BoundError> {
    if inputs.m < 2 {
        return Err(BoundError::SampleTooSmall(inputs.m));
    }
    if inputs.log_ml > 0.0 || !inputs.log_ml.is_finite() {
        return Err(BoundError::PositiveLogMl(inputs.log_ml));
    }
    for (name, value) in [("delta", inputs.delta), ("gamma", inputs.gamma)] {
        if !(value > 0.0 && value <= 1.0) {
            return Err(BoundError::BadConfidence { name, value });
        }
    }
    let m = inputs.m as f64;
    let raw_rhs = (-inputs.log_ml + m.ln() - inputs.delta.ln() - inputs.gamma.ln()) / (m - 1.0);
    // clamp below 1 so the open-interval contract survives the
    // underflow of exp(-raw_rhs) at very large right-hand sides
    let epsilon_bound = (-(-raw_rhs).exp_m1()).min(1.0 - f64::EPSILON / 2.0);
    Ok(BoundResult {
        raw_rhs,
        epsilon_bound,
    })
}

/// A finite parameter set, the map from parameters to function
/// identifiers, and a prior/posterior pair over the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamFunctionMap {
    /// function_of[theta] = function identifier realized by parameter theta.
    pub function_of: Vec<usize>,
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlComparison {
    pub kl_param: f64,
    pub kl_function: f64,
    pub holds: bool,
}

/// KL(Q || P) over parameters versus over the pushforward distributions
/// on functions. Data processing: the function-space KL never exceeds
/// the parameter-space KL.
pub fn verify_kl_inequality(map: &ParamFunctionMap) -> Result<KlComparison, BoundError> {
    let n = map.function_of.len();
    if map.prior.len() != n || map.posterior.len() != n {
        return Err(BoundError::Distribution(format!(
            "lengths disagree: {} parameters, prior {}, posterior {}",
            n,
            map.prior.len(),
            map.posterior.len()
        )));
    }
    for (name, dist) in [("prior", &map.prior), ("posterior", &map.posterior)] {
        if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(BoundError::Distribution(format!(
                "{name} has negative or non-finite mass"
            )));
        }
        let total: f64 = dist.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BoundError::Distribution(format!(
                "{name} sums to {total}, not 1"
            )));
        }
    }
    let kl_param = kl_divergence(&map.posterior, &map.prior).map_err(|i| {
        BoundError::Distribution(format!(
            "posterior puts mass on parameter {i} where the prior has none"
        ))
    })?;

    let nf = map.function_of.iter().copied().max().map_or(0, |f| f + 1);
    let mut p_fun = vec![0.0f64; nf];
    let mut q_fun = vec![0.0f64; nf];
    for (theta, &f) in map.function_of.iter().enumerate() {
        p_fun[f] += map.prior[theta];
        q_fun[f] += map.posterior[theta];
    }
    let kl_function = kl_divergence(&q_fun, &p_fun).map_err(|i| {
        BoundError::Distribution(format!("pushforward support violation at function {i}"))
    })?;

    Ok(KlComparison {
        kl_param,
        kl_function,
        holds: kl_function <= kl_param + 1e-10,
    })
}

/// KL(q || p) with the 0 ln(0/x) = 0 convention. Err(i) marks an index
/// with q > 0, p = 0.
fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64, usize> {
    let mut total = 0.0;
    for i in 0..q.len() {
        if q[i] == 0.0 {
            continue;
        }
        if p[i] == 0.0 {
            return Err(i);
        }
        total += q[i] * (q[i] / p[i]).ln();
    }
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bound(log_ml: f64, m: usize, delta: f64, gamma: f64) -> BoundResult {
        compute_bound(&BoundInputs {
            log_ml,
            m,
            delta,
            gamma,
        })
        .unwrap()
    }

    #[test]
    fn certain_evidence_leaves_only_the_union_terms() {
        let r = bound(0.0, 100, 1.0, 1.0);
        assert_abs_diff_eq!(r.raw_rhs, 100f64.ln() / 99.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            r.epsilon_bound,
            1.0 - 100f64.powf(-1.0 / 99.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(r.epsilon_bound, 0.04545, epsilon = 1e-5);
    }

    #[test]
    fn uninformative_prior_is_near_vacuous_but_below_one() {
        let m = 100usize;
        let r = bound(-(m as f64) * 2f64.ln(), m, 1.0, 1.0);
        assert_abs_diff_eq!(
            r.raw_rhs,
            (100.0 * 2f64.ln() + 100f64.ln()) / 99.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(r.raw_rhs, 0.7467, epsilon = 1e-4);
        assert_abs_diff_eq!(r.epsilon_bound, 0.526, epsilon = 1e-3);
        assert!(r.epsilon_bound < 1.0);
    }

    #[test]
    fn confidence_cost_is_logarithmic() {
        let a = bound(-50.0, 1000, 0.01, 0.02);
        let b = bound(-50.0, 1000, 0.01, 0.01);
        assert_abs_diff_eq!(b.raw_rhs - a.raw_rhs, 2f64.ln() / 999.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            compute_bound(&BoundInputs {
                log_ml: -1.0,
                m: 1,
                delta: 0.1,
                gamma: 0.1
            }),
            Err(BoundError::SampleTooSmall(1))
        ));
        assert!(matches!(
            compute_bound(&BoundInputs {
                log_ml: 0.5,
                m: 10,
                delta: 0.1,
                gamma: 0.1
            }),
            Err(BoundError::PositiveLogMl(_))
        ));
        assert!(matches!(
            compute_bound(&BoundInputs {
                log_ml: -1.0,
                m: 10,
                delta: 0.0,
                gamma: 0.1
            }),
            Err(BoundError::BadConfidence { name: "delta", .. })
        ));
        assert!(matches!(
            compute_bound(&BoundInputs {
                log_ml: -1.0,
                m: 10,
                delta: 0.1,
                gamma: 1.5
            }),
            Err(BoundError::BadConfidence { name: "gamma", .. })
        ));
    }

    #[test]
    fn injective_map_preserves_kl() {
        let map = ParamFunctionMap {
            function_of: vec![0, 1, 2, 3],
            prior: vec![0.25; 4],
            posterior: vec![0.5, 0.25, 0.125, 0.125],
        };
        let r = verify_kl_inequality(&map).unwrap();
        assert_abs_diff_eq!(r.kl_param, r.kl_function, epsilon = 1e-15);
        assert!(r.holds);
    }

    #[test]
    fn constant_map_collapses_kl_to_zero() {
        let map = ParamFunctionMap {
            function_of: vec![0, 0, 0],
            prior: vec![0.5, 0.25, 0.25],
            posterior: vec![0.1, 0.2, 0.7],
        };
        let r = verify_kl_inequality(&map).unwrap();
        assert_abs_diff_eq!(r.kl_function, 0.0, epsilon = 1e-15);
        assert!(r.kl_param > 0.0);
        assert!(r.holds);
    }

    #[test]
    fn support_violation_detected() {
        let map = ParamFunctionMap {
            function_of: vec![0, 1],
            prior: vec![1.0, 0.0],
            posterior: vec![0.5, 0.5],
        };
        assert!(verify_kl_inequality(&map).is_err());
    }

    #[test]
    fn jensen_gap_zero_iff_ratio_constant_on_preimages() {
        // two parameters per function, posterior/prior ratio equal
        // within each pre-image: gap must vanish
        let map = ParamFunctionMap {
            function_of: vec![0, 0, 1, 1],
            prior: vec![0.1, 0.3, 0.2, 0.4],
            posterior: vec![0.05, 0.15, 0.8 * 0.2 / 0.6, 0.8 * 0.4 / 0.6],
        };
        let r = verify_kl_inequality(&map).unwrap();
        assert_abs_diff_eq!(r.kl_param, r.kl_function, epsilon = 1e-12);
        // perturb within a pre-image: strict gap appears
        let map2 = ParamFunctionMap {
            function_of: vec![0, 0, 1, 1],
            prior: vec![0.25; 4],
            posterior: vec![0.4, 0.1, 0.3, 0.2],
        };
        let r2 = verify_kl_inequality(&map2).unwrap();
        assert!(r2.kl_param > r2.kl_function + 1e-6);
    }

    fn dyadic_distribution(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // random multiples of 2^-12, renormalized by shifting remainder
        // onto the last slot so the sum is exactly 1 in binary floating point
        let unit = 1.0 / 4096.0;
        let parts: Vec<u32> = (0..n).map(|_| rng.gen_range(1..64u32)).collect();
        let total: u32 = parts.iter().sum();
        // rescale counts to sum to 4096
        let mut acc = 0u32;
        let mut out = Vec::with_capacity(n);
        for (i, &p) in parts.iter().enumerate() {
            let c = if i + 1 == n {
                4096 - acc
            } else {
                (p * 4096 / total).max(1)
            };
            acc += c;
            out.push(c as f64 * unit);
        }
        out
    }

    #[test]
    fn random_maps_always_hold() {
        for trial in 0..1000 {
            let n = 32;
            let map = ParamFunctionMap {
                function_of: {
                    use rand::{Rng, SeedableRng};
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5000 + trial);
                    (0..n).map(|_| rng.gen_range(0..8usize)).collect()
                },
                prior: dyadic_distribution(n, 2 * trial),
                posterior: dyadic_distribution(n, 2 * trial + 1),
            };
            let r = verify_kl_inequality(&map).unwrap();
            assert!(r.holds, "trial {trial}: {r:?}");
        }
    }

    proptest! {
        #[test]
        fn epsilon_bound_always_in_unit_interval(
            log_ml in -1e4f64..0.0,
            m in 2usize..100_000,
            delta in 1e-6f64..1.0,
            gamma in 1e-6f64..1.0,
        ) {
            let r = bound(log_ml, m, delta, gamma);
            prop_assert!(r.epsilon_bound > 0.0 && r.epsilon_bound < 1.0);
        }

        #[test]
        fn monotone_in_evidence_and_confidence(
            log_ml in -1e3f64..-1e-3,
            m in 2usize..10_000,
        ) {
            let base = bound(log_ml, m, 0.05, 0.05);
            prop_assert!(bound(log_ml * 1.5, m, 0.05, 0.05).epsilon_bound >= base.epsilon_bound);
            prop_assert!(bound(log_ml, m, 0.01, 0.05).epsilon_bound >= base.epsilon_bound);
            prop_assert!(bound(log_ml, m, 0.05, 0.01).epsilon_bound >= base.epsilon_bound);
        }

        #[test]
        fn constant_per_sample_evidence_shrinks_with_m(
            rate in 0.01f64..2.0,
            m in 10usize..5_000,
        ) {
            let small = bound(-(m as f64) * rate, m, 0.05, 0.05);
            let large = bound(-((4 * m) as f64) * rate, 4 * m, 0.05, 0.05);
            prop_assert!(large.epsilon_bound <= small.epsilon_bound + 1e-12);
        }

        #[test]
        fn pushforward_never_increases_kl(
            seed in 0u64..10_000,
            nf in 1usize..16,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(nf..64);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                let mut v: Vec<f64> = raw.iter().map(|r| r / s).collect();
                let adjust: f64 = 1.0 - v.iter().sum::<f64>();
                v[0] += adjust;
                v
            };
            let map = ParamFunctionMap {
                function_of: (0..n).map(|_| rng.gen_range(0..nf)).collect(),
                prior: draw(&mut rng),
                posterior: draw(&mut rng),
            };
            let r = verify_kl_inequality(&map).unwrap();
            prop_assert!(r.holds);
        }
    }
}
