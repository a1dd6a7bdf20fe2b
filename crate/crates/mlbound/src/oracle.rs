//! Exact Bayesian inference over finite hypothesis spaces.
//!
//! Hypotheses are binary truth tables over a small input domain (at
//! most 10 points, at most 1024 hypotheses), so posteriors, evidence,
//! predictive errors, and the telescoping evidence decomposition are
//! all computable by direct enumeration in double precision. This is
//! the ground truth against which the probabilistic guarantees of the
//! marginal-likelihood bound are checked.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bound::{compute_bound, BoundInputs};

pub const MAX_DOMAIN: usize = 10;
pub const MAX_HYPOTHESES: usize = 1 << MAX_DOMAIN;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("domain size {0} exceeds the enumerability cap {MAX_DOMAIN}")]
    DomainTooLarge(usize),
    #[error("{0} hypotheses exceed the cap {MAX_HYPOTHESES}")]
    TooManyHypotheses(usize),
    #[error("duplicate hypothesis truth table at index {0}")]
    DuplicateHypothesis(usize),
    #[error("prior sums to {0}, not 1")]
    PriorNotNormalized(f64),
    #[error("no hypothesis is consistent with the sample")]
    Unrealizable,
    #[error("invalid distribution: {0}")]
    BadDistribution(String),
}

/// Binary hypotheses over a domain of `domain_size` points. A truth
/// table is a bitmask: bit x gives h(x).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisSpace {
    pub domain_size: usize,
    pub tables: Vec<u16>,
    pub prior: Vec<f64>,
}

impl HypothesisSpace {
    pub fn new(domain_size: usize, tables: Vec<u16>, prior: Vec<f64>) -> Result<Self, OracleError> {
        if domain_size > MAX_DOMAIN {
            return Err(OracleError::DomainTooLarge(domain_size));
        }
        if tables.len() > MAX_HYPOTHESES || tables.len() != prior.len() {
            return Err(OracleError::TooManyHypotheses(tables.len()));
        }
        let mut seen = vec![false; 1 << domain_size];
        for (i, &t) in tables.iter().enumerate() {
            let t = t as usize & ((1 << domain_size) - 1);
            if seen[t] {
                return Err(OracleError::DuplicateHypothesis(i));
            }
            seen[t] = true;
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 || prior.iter().any(|&p| p < 0.0) {
            return Err(OracleError::PriorNotNormalized(total));
        }
        Ok(HypothesisSpace {
            domain_size,
            tables,
            prior,
        })
    }

    /// All 2^domain_size binary functions with uniform prior.
    pub fn full_uniform(domain_size: usize) -> Result<Self, OracleError> {
        if domain_size > MAX_DOMAIN {
            return Err(OracleError::DomainTooLarge(domain_size));
        }
        let n = 1usize << domain_size;
        let tables: Vec<u16> = (0..n as u16).collect();
        let prior = vec![1.0 / n as f64; n];
        HypothesisSpace::new(domain_size, tables, prior)
    }

    /// All functions with prior mass proportional to 2^-popcount:
    /// simpler functions (fewer 1s) get exponentially more mass.
    pub fn full_simplicity_biased(domain_size: usize) -> Result<Self, OracleError> {
        if domain_size > MAX_DOMAIN {
            return Err(OracleError::DomainTooLarge(domain_size));
        }
        let n = 1usize << domain_size;
        let tables: Vec<u16> = (0..n as u16).collect();
        let raw: Vec<f64> = tables
            .iter()
            .map(|t| 0.5f64.powi(t.count_ones() as i32))
            .collect();
        // sum over all tables of 2^-popcount = (3/2)^domain_size
        let norm = 1.5f64.powi(domain_size as i32);
        let prior: Vec<f64> = raw.iter().map(|r| r / norm).collect();
        HypothesisSpace::new(domain_size, tables, prior)
    }

    /// All functions, prior a point mass on `target_table`.
    pub fn full_point_mass(domain_size: usize, target_table: u16) -> Result<Self, OracleError> {
        if domain_size > MAX_DOMAIN {
            return Err(OracleError::DomainTooLarge(domain_size));
        }
        let n = 1usize << domain_size;
        let tables: Vec<u16> = (0..n as u16).collect();
        let prior: Vec<f64> = tables
            .iter()
            .map(|&t| if t == target_table { 1.0 } else { 0.0 })
            .collect();
        HypothesisSpace::new(domain_size, tables, prior)
    }

    fn eval(&self, h: usize, x: usize) -> u8 {
        ((self.tables[h] >> x) & 1) as u8
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataDistribution {
    pub input_weights: Vec<f64>,
    pub target: usize,
}

impl DataDistribution {
    pub fn uniform(space: &HypothesisSpace, target: usize) -> Result<Self, OracleError> {
        if target >= space.tables.len() {
            return Err(OracleError::BadDistribution(format!(
                "target index {target} out of range"
            )));
        }
        Ok(DataDistribution {
            input_weights: vec![1.0 / space.domain_size as f64; space.domain_size],
            target,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub q: Vec<f64>,
    pub evidence: f64,
}

/// Zero-one-likelihood Bayes: the prior restricted to the consistent
/// set and renormalized. Evidence is the consistent set's prior mass.
pub fn bayes_posterior(
    space: &HypothesisSpace,
    sample: &[(usize, u8)],
) -> Result<Posterior, OracleError> {
    let mut q = space.prior.clone();
    for &(x, y) in sample {
        for h in 0..q.len() {
            if q[h] > 0.0 && space.eval(h, x) != y {
                q[h] = 0.0;
            }
        }
    }
    let evidence: f64 = q.iter().sum();
    if evidence <= 0.0 {
        return Err(OracleError::Unrealizable);
    }
    for v in q.iter_mut() {
        *v /= evidence;
    }
    Ok(Posterior { q, evidence })
}

/// P_e(x, y, S) = 1 - P(y | S; x): posterior mass of hypotheses that
/// disagree with y at x.
pub fn predictive_error(
    space: &HypothesisSpace,
    sample: &[(usize, u8)],
    x: usize,
    y: u8,
) -> Result<f64, OracleError> {
    let post = bayes_posterior(space, sample)?;
    Ok(post
        .q
        .iter()
        .enumerate()
        .filter(|&(h, _)| space.eval(h, x) != y)
        .map(|(_, &q)| q)
        .sum())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialTrace {
    pub sample: Vec<(usize, u8)>,
    pub evidence: Vec<f64>,
    pub predictive_errors: Vec<f64>,
}

fn draw_trace(
    space: &HypothesisSpace,
    dist: &DataDistribution,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SequentialTrace, OracleError> {
    let weights = WeightedIndex::new(&dist.input_weights)
        .map_err(|e| OracleError::BadDistribution(e.to_string()))?;
    let mut sample = Vec::with_capacity(m);
    let mut evidence = Vec::with_capacity(m + 1);
    let mut predictive_errors = Vec::with_capacity(m);
    evidence.push(1.0);
    for _ in 0..m {
        let x = weights.sample(rng);
        let y = space.eval(dist.target, x);
        predictive_errors.push(predictive_error(space, &sample, x, y)?);
        sample.push((x, y));
        evidence.push(bayes_posterior(space, &sample)?.evidence);
    }
    Ok(SequentialTrace {
        sample,
        evidence,
        predictive_errors,
    })
}

/// Max absolute residual of P(S_{i+1}) = P(S_i)(1 - P_e(i)) along one
/// i.i.d. trace of length m.
pub fn telescoping_residual(
    space: &HypothesisSpace,
    dist: &DataDistribution,
    m: usize,
    seed: u64,
) -> Result<f64, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = draw_trace(space, dist, m, &mut rng)?;
    let mut worst = 0.0f64;
    for i in 0..m {
        let predicted = trace.evidence[i] * (1.0 - trace.predictive_errors[i]);
        worst = worst.max((predicted - trace.evidence[i + 1]).abs());
    }
    Ok(worst)
}

/// True generalization error of hypothesis h against the target under
/// the input distribution.
fn true_error(space: &HypothesisSpace, dist: &DataDistribution, h: usize) -> f64 {
    (0..space.domain_size)
        .filter(|&x| space.eval(h, x) != space.eval(dist.target, x))
        .map(|x| dist.input_weights[x])
        .sum()
}

/// Fraction of trials where a posterior-sampled hypothesis violates the
/// bound. Each trial draws S of size m, draws h from the posterior, and
/// tests the inequality with the true error of h. The convention for
/// eps(h) = 1: -ln 0 = +infinity violates any finite right-hand side.
pub fn bound_violation_rate(
    space: &HypothesisSpace,
    dist: &DataDistribution,
    m: usize,
    delta: f64,
    gamma: f64,
    trials: usize,
    seed: u64,
) -> Result<f64, OracleError> {
    let mut violations = 0usize;
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let trace = draw_trace(space, dist, m, &mut rng)?;
        let post = bayes_posterior(space, &trace.sample)?;
        let h = WeightedIndex::new(&post.q)
            .map_err(|e| OracleError::BadDistribution(e.to_string()))?
            .sample(&mut rng);
        let eps = true_error(space, dist, h);
        let rhs = compute_bound(&BoundInputs {
            log_ml: post.evidence.ln().min(0.0),
            m,
            delta,
            gamma,
        })
        .map_err(|e| OracleError::BadDistribution(e.to_string()))?
        .raw_rhs;
        let lhs = if eps >= 1.0 {
            f64::INFINITY
        } else {
            -(1.0 - eps).ln()
        };
        if lhs >= rhs {
            violations += 1;
        }
    }
    Ok(violations as f64 / trials as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub mean_error: f64,
    pub mean_neg_log_evidence: f64,
    /// |<-ln P(S_m)> - sum of per-step <-ln(1 - P_e)>| over the same traces.
    pub identity_residual: f64,
    pub max_predictive_error: f64,
}

/// Monte-Carlo learning curve: per-m averages of the posterior-expected
/// generalization error and of -ln P(S_m), plus the partial-sum
/// identity check from the telescoping decomposition.
pub fn oracle_learning_curve(
    space: &HypothesisSpace,
    dist: &DataDistribution,
    m_values: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, OracleError> {
    let m_max = m_values.iter().copied().max().unwrap_or(0);
    let mut sums_eps = vec![0.0f64; m_values.len()];
    let mut sums_nle = vec![0.0f64; m_values.len()];
    let mut sums_step = vec![0.0f64; m_values.len()];
    let mut max_pe = 0.0f64;
    for trial in 0..trials {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let trace = draw_trace(space, dist, m_max, &mut rng)?;
        for &pe in &trace.predictive_errors {
            max_pe = max_pe.max(pe);
        }
        for (k, &m) in m_values.iter().enumerate() {
            let post = bayes_posterior(space, &trace.sample[..m])?;
            let eps: f64 = post
                .q
                .iter()
                .enumerate()
                .map(|(h, &q)| q * true_error(space, dist, h))
                .sum();
            sums_eps[k] += eps;
            sums_nle[k] += -trace.evidence[m].ln();
            sums_step[k] += trace.predictive_errors[..m]
                .iter()
                .map(|&pe| -(1.0 - pe).ln())
                .sum::<f64>();
        }
    }
    let t = trials as f64;
    Ok(m_values
        .iter()
        .enumerate()
        .map(|(k, &m)| CurvePoint {
            m,
            mean_error: sums_eps[k] / t,
            mean_neg_log_evidence: sums_nle[k] / t,
            identity_residual: ((sums_nle[k] - sums_step[k]) / t).abs(),
            max_predictive_error: max_pe,
        })
        .collect())
}

/// Random target drawn from the prior, for experiment setup.
pub fn sample_target(space: &HypothesisSpace, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightedIndex::new(&space.prior)
        .map(|w| w.sample(&mut rng))
        .unwrap_or_else(|_| rng.gen_range(0..space.tables.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn four_function_space() -> HypothesisSpace {
        // domain {a, b} = {0, 1}, all four binary functions, uniform prior
        HypothesisSpace::full_uniform(2).unwrap()
    }

    #[test]
    fn empty_sample_returns_prior() {
        let s = four_function_space();
        let p = bayes_posterior(&s, &[]).unwrap();
        assert_abs_diff_eq!(p.evidence, 1.0, epsilon = 1e-15);
        assert_eq!(p.q, s.prior);
    }

    #[test]
    fn single_observation_halves_evidence() {
        let s = four_function_space();
        let p = bayes_posterior(&s, &[(0, 0)]).unwrap();
        assert_abs_diff_eq!(p.evidence, 0.5, epsilon = 1e-15);
        let live: Vec<f64> = p.q.iter().copied().filter(|&q| q > 0.0).collect();
        assert_eq!(live.len(), 2);
        for q in live {
            assert_abs_diff_eq!(q, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn full_domain_identifies_target() {
        let s = four_function_space();
        let target = 2usize; // table 0b10: h(0)=0, h(1)=1
        let sample = [(0, 0u8), (1, 1u8)];
        let p = bayes_posterior(&s, &sample).unwrap();
        assert_abs_diff_eq!(p.evidence, s.prior[target], epsilon = 1e-15);
        assert_abs_diff_eq!(p.q[target], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn unrealizable_sample_is_an_error() {
        let s = four_function_space();
        assert!(matches!(
            bayes_posterior(&s, &[(0, 0), (0, 1)]),
            Err(OracleError::Unrealizable)
        ));
    }

    #[test]
    fn predictive_error_matches_enumeration() {
        let s = four_function_space();
        // after (a, 0): consistent tables are 0b00 and 0b10; query (b, 0)
        assert_abs_diff_eq!(
            predictive_error(&s, &[(0, 0)], 1, 0).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // empty sample, any query: symmetry gives 1/2
        assert_abs_diff_eq!(
            predictive_error(&s, &[], 0, 1).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        // identified target, query the target's value: 0
        assert_abs_diff_eq!(
            predictive_error(&s, &[(0, 0), (1, 1)], 0, 0).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn telescoping_holds_on_small_space() {
        let s = four_function_space();
        let d = DataDistribution::uniform(&s, 2).unwrap();
        assert!(telescoping_residual(&s, &d, 1, 7).unwrap() < 1e-12);
        assert!(telescoping_residual(&s, &d, 10, 7).unwrap() < 1e-12);
    }

    #[test]
    fn telescoping_holds_on_full_six_point_space() {
        let s = HypothesisSpace::full_uniform(6).unwrap();
        let d = DataDistribution::uniform(&s, 37).unwrap();
        for seed in 0..5 {
            assert!(telescoping_residual(&s, &d, 20, seed).unwrap() < 1e-12);
        }
    }

    #[test]
    fn evidence_monotone_along_traces() {
        let s = HypothesisSpace::full_simplicity_biased(5).unwrap();
        let d = DataDistribution::uniform(&s, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trace = draw_trace(&s, &d, 15, &mut rng).unwrap();
        for i in 0..15 {
            assert!(trace.evidence[i + 1] <= trace.evidence[i] + 1e-15);
        }
    }

    #[test]
    fn point_mass_prior_never_violates() {
        let s = HypothesisSpace::full_point_mass(4, 9).unwrap();
        let d = DataDistribution::uniform(&s, 9).unwrap();
        let rate = bound_violation_rate(&s, &d, 5, 0.05, 0.05, 200, 3).unwrap();
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn violation_rate_within_union_budget() {
        let s = HypothesisSpace::full_uniform(4).unwrap();
        let d = DataDistribution::uniform(&s, 6).unwrap();
        let rate = bound_violation_rate(&s, &d, 4, 0.05, 0.05, 2000, 5).unwrap();
        let budget = 0.10 + 3.0 * (0.10f64 / 2000.0).sqrt();
        assert!(rate <= budget, "rate {rate} > budget {budget}");
    }

    #[test]
    fn learning_curve_identity_and_decay() {
        let s = HypothesisSpace::full_uniform(6).unwrap();
        let d = DataDistribution::uniform(&s, 22).unwrap();
        let pts = oracle_learning_curve(&s, &d, &[1, 4, 16], 300, 13).unwrap();
        for p in &pts {
            assert!(
                p.identity_residual < 1e-10,
                "residual {}",
                p.identity_residual
            );
        }
        assert!(pts[2].mean_error < pts[0].mean_error);
        assert!(pts[2].mean_neg_log_evidence >= pts[0].mean_neg_log_evidence);
    }

    #[test]
    fn point_mass_curve_is_flat_zero() {
        let s = HypothesisSpace::full_point_mass(4, 5).unwrap();
        let d = DataDistribution::uniform(&s, 5).unwrap();
        let pts = oracle_learning_curve(&s, &d, &[1, 3, 8], 50, 2).unwrap();
        for p in pts {
            assert_eq!(p.mean_error, 0.0);
            assert_eq!(p.mean_neg_log_evidence, 0.0);
        }
    }

    #[test]
    fn simplicity_prior_normalizes() {
        for d in 1..=8 {
            let s = HypothesisSpace::full_simplicity_biased(d).unwrap();
            let total: f64 = s.prior.iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_duplicates_and_oversize() {
        assert!(matches!(
            HypothesisSpace::new(2, vec![1, 1], vec![0.5, 0.5]),
            Err(OracleError::DuplicateHypothesis(1))
        ));
        assert!(matches!(
            HypothesisSpace::full_uniform(11),
            Err(OracleError::DomainTooLarge(11))
        ));
    }
}
