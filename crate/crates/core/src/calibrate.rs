//! Choosing `gamma` and `i`, predicting ARL and delay, and checking the
//! exponential-moment condition by Monte Carlo.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    analytic_kl, hyvarinen_score, log_weight, KlDirection, Regime, UnnormalizedPair,
};
use crate::partition::{estimate_oracle_variance, pair_variance_bound, Oracle, OracleMode};
use crate::scalar::{log_sum_exp, Real, RunningStats};

/// `1 - (sigma2 + 2 eps) / (2 i kl)`. May be nonpositive when `i` is small.
pub fn gamma_zero<T: Real>(sigma2: T, epsilon: T, i: u64, kl: T) -> Result<T> {
    if !(kl > T::zero()) {
        return Err(Error::invalid(format!(
            "KL divergence {kl} must be positive"
        )));
    }
    if i == 0 {
        return Err(Error::invalid("i must be >= 1"));
    }
    if !(sigma2 >= T::zero()) || !(epsilon >= T::zero()) {
        return Err(Error::invalid(format!(
            "sigma2={sigma2} and epsilon={epsilon} must be nonnegative"
        )));
    }
    let two = T::lit(2.0);
    Ok(T::one() - (sigma2 + two * epsilon) / (two * T::from_count(i as usize) * kl))
}

/// Smallest `i` with `gamma_zero(sigma2, epsilon, i, kl) >= gamma_target`.
pub fn required_i<T: Real>(sigma2: T, epsilon: T, gamma_target: T, kl: T) -> Result<u64> {
    if !(gamma_target > T::zero() && gamma_target < T::one()) {
        return Err(Error::invalid(format!(
            "target gamma={gamma_target} must lie in (0, 1); gamma = 1 needs an exact oracle"
        )));
    }
    gamma_zero(sigma2, epsilon, 1, kl)?;
    let two = T::lit(2.0);
    let exact = (sigma2 + two * epsilon) / (two * (T::one() - gamma_target) * kl);
    let x = exact.as_f64();
    if !x.is_finite() || x >= u64::MAX as f64 / 2.0 {
        return Err(Error::UnboundedSampleSize {
            gamma: gamma_target.as_f64(),
        });
    }
    let mut i = (x.ceil() as u64).max(1);
    // the ceiling can land one off either way after rounding
    while i > 1 && gamma_zero(sigma2, epsilon, i - 1, kl)? >= gamma_target {
        i -= 1;
    }
    while gamma_zero(sigma2, epsilon, i, kl)? < gamma_target {
        i += 1;
    }
    Ok(i)
}

/// `b / (gamma kl)`, the first-order delay of a drift-`gamma kl` walk.
pub fn predicted_cadd<T: Real>(threshold_b: T, gamma: T, kl: T) -> Result<T> {
    if !(threshold_b > T::zero() && gamma > T::zero() && kl > T::zero()) {
        return Err(Error::invalid(format!(
            "predicted delay needs positive b, gamma, kl (got {threshold_b}, {gamma}, {kl})"
        )));
    }
    Ok(threshold_b / (gamma * kl))
}

/// `e^b`.
pub fn arl_lower_bound<T: Real>(threshold_b: T) -> T {
    threshold_b.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck<T> {
    pub passed: bool,
    pub estimate: T,
    pub std_error: T,
    pub n_mc: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Monte Carlo estimate of `E0[exp(gamma lw(X) + gamma T_i)]` with
/// `X ~ P0` and a fresh oracle batch per draw. Passes iff the estimate is
/// at most `1 + 3 SE`.
pub fn check_gamma_condition<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    gamma: T,
    i: usize,
    mode: &OracleMode<T>,
    n_mc: usize,
    rng: &mut R,
) -> Result<ConditionCheck<T>> {
    if n_mc < 2 || i == 0 {
        return Err(Error::invalid("condition check needs n_mc >= 2 and i >= 1"));
    }
    if !pair.capabilities().exact_pre_sampler {
        return Err(Error::unsupported("pre-change sampling", pair.name()));
    }
    let mut oracle = Oracle::new(pair, mode.clone())?;
    let mut x = vec![T::zero(); pair.dim()];
    let mut stats = RunningStats::new();
    for _ in 0..n_mc {
        pair.draw_into(Regime::Pre, rng, &mut x)?;
        let lw = log_weight(pair, &x)?;
        let t = oracle.batch_mean(i, rng)?;
        let v = (gamma * lw + gamma * t).exp();
        if !v.is_finite() {
            return Ok(ConditionCheck {
                passed: false,
                estimate: T::infinity(),
                std_error: T::infinity(),
                n_mc: stats.count() + 1,
                diagnostic: Some(format!(
                    "exponential moment overflowed at gamma={gamma}; gamma is too large"
                )),
            });
        }
        stats.push(v);
    }
    let (estimate, std_error) = (stats.mean(), stats.std_error());
    Ok(ConditionCheck {
        passed: estimate <= T::one() + T::lit(3.0) * std_error,
        estimate,
        std_error,
        n_mc,
        diagnostic: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenCheck<T> {
    pub i: usize,
    /// Mean of `exp(gamma T_i)`.
    pub batch_moment: T,
    /// Mean of `exp(gamma Y)` for a single draw `Y`.
    pub single_moment: T,
    /// SE of the paired difference.
    pub std_error: T,
    pub passed: bool,
}

/// Paired check that averaging contracts the exponential moment:
/// `E[exp(gamma T_i)] <= E[exp(gamma Y)]`, with `Y` the first draw of the
/// same batch. Passes iff the batch moment is at most the single-draw
/// moment plus `3 SE`.
pub fn check_jensen_contraction<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    gamma: T,
    i: usize,
    mode: &OracleMode<T>,
    n_mc: usize,
    rng: &mut R,
) -> Result<JensenCheck<T>> {
    if n_mc < 2 || i == 0 {
        return Err(Error::invalid("Jensen check needs n_mc >= 2 and i >= 1"));
    }
    let mut oracle = Oracle::new(pair, mode.clone())?;
    let (mut batch, mut single, mut diff) = (
        RunningStats::new(),
        RunningStats::new(),
        RunningStats::new(),
    );
    for _ in 0..n_mc {
        let b = oracle.batch(i, rng, true)?;
        let first = b
            .draws
            .as_ref()
            .and_then(|d| d.first().map(|d| d.value))
            .unwrap_or(b.mean);
        let (eb, es) = ((gamma * b.mean).exp(), (gamma * first).exp());
        batch.push(eb);
        single.push(es);
        diff.push(eb - es);
    }
    let std_error = diff.std_error();
    Ok(JensenCheck {
        i,
        batch_moment: batch.mean(),
        single_moment: single.mean(),
        std_error,
        passed: batch.mean() <= single.mean() + T::lit(3.0) * std_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate<T> {
    pub mean: T,
    pub std_error: T,
    pub n_mc: usize,
}

/// `D(P1 || P0)` as the mean over `X ~ P1` of `lw(X) + Y`, one oracle draw
/// `Y` per sample.
pub fn estimate_kl<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    n_mc: usize,
    mode: &OracleMode<T>,
    rng: &mut R,
) -> Result<KlEstimate<T>> {
    if n_mc < 2 {
        return Err(Error::invalid("KL estimate needs n_mc >= 2"));
    }
    if !pair.capabilities().exact_post_sampler {
        return Err(Error::unsupported("post-change sampling", pair.name()));
    }
    let mut oracle = Oracle::new(pair, mode.clone())?;
    let mut x = vec![T::zero(); pair.dim()];
    let mut stats = RunningStats::new();
    for _ in 0..n_mc {
        pair.draw_into(Regime::Post, rng, &mut x)?;
        let lw = log_weight(pair, &x)?;
        stats.push(lw + oracle.draw(rng)?.value);
    }
    Ok(KlEstimate {
        mean: stats.mean(),
        std_error: stats.std_error(),
        n_mc,
    })
}

/// Upper end of the SCUSUM multiplier search.
pub const SCUSUM_DELTA_BRACKET: f64 = 10.0;
pub const SCUSUM_DELTA_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScusumDelta<T> {
    pub delta: T,
    pub feasible: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Largest `delta` in `[0, 10]` (to within `1e-3`) with
/// `mean exp(delta (S0 - S1)) <= 1` over a fixed pre-change sample.
///
/// The sample is drawn once, so the search is monotone in `delta`.
pub fn scusum_delta<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    n_mc: usize,
    rng: &mut R,
) -> Result<ScusumDelta<T>> {
    if n_mc == 0 {
        return Err(Error::invalid("SCUSUM calibration needs n_mc >= 1"));
    }
    let caps = pair.capabilities();
    if !caps.analytic_score {
        return Err(Error::unsupported("Hyvärinen score", pair.name()));
    }
    if !caps.exact_pre_sampler {
        return Err(Error::unsupported("pre-change sampling", pair.name()));
    }
    let mut x = vec![T::zero(); pair.dim()];
    let mut d = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        pair.draw_into(Regime::Pre, rng, &mut x)?;
        d.push(hyvarinen_score(pair, Regime::Pre, &x)? - hyvarinen_score(pair, Regime::Post, &x)?);
    }
    let log_n = T::from_count(n_mc).ln();
    let mut scaled = vec![T::zero(); n_mc];
    let mut feasible = |delta: T| {
        for (s, di) in scaled.iter_mut().zip(&d) {
            *s = delta * *di;
        }
        log_sum_exp(&scaled) - log_n <= T::zero()
    };
    let (mut lo, mut hi) = (T::zero(), T::lit(SCUSUM_DELTA_BRACKET));
    if feasible(hi) {
        return Ok(ScusumDelta {
            delta: hi,
            feasible: true,
            diagnostic: None,
        });
    }
    let tol = T::lit(SCUSUM_DELTA_TOL);
    while hi - lo > tol {
        let mid = (lo + hi) / T::lit(2.0);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo > T::zero() {
        return Ok(ScusumDelta {
            delta: lo,
            feasible: true,
            diagnostic: None,
        });
    }
    let mean: T = d.iter().copied().sum::<T>() / T::from_count(n_mc);
    Ok(ScusumDelta {
        delta: T::zero(),
        feasible: false,
        diagnostic: Some(format!(
            "no delta > 0 keeps the pre-change exponential moment <= 1; \
             mean score increment under P0 is {mean} (must be negative)"
        )),
    })
}

/// How `epsilon` is chosen from the pilot variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EpsilonRule<T> {
    /// `epsilon = factor * sigma2_hat`.
    Relative {
        factor: T,
    },
    Absolute {
        value: T,
    },
}

impl<T: Real> Default for EpsilonRule<T> {
    fn default() -> Self {
        Self::Relative {
            factor: T::lit(0.05),
        }
    }
}

impl<T: Real> EpsilonRule<T> {
    pub fn resolve(&self, sigma2: T) -> Result<T> {
        let eps = match *self {
            Self::Relative { factor } => factor * sigma2,
            Self::Absolute { value } => value,
        };
        if !(eps >= T::zero() && eps.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon={eps} must be finite and nonnegative"
            )));
        }
        Ok(eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSource {
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationInputs<T> {
    pub i: usize,
    pub mode: OracleMode<T>,
    pub epsilon: EpsilonRule<T>,
    pub pilot_draws: usize,
    pub check_draws: usize,
    /// Samples for the KL estimate when no closed form exists.
    pub kl_draws: usize,
}

impl<T: Real> CalibrationInputs<T> {
    pub fn new(i: usize, mode: OracleMode<T>) -> Self {
        Self {
            i,
            mode,
            epsilon: EpsilonRule::default(),
            pilot_draws: 10_000,
            check_draws: 10_000,
            kl_draws: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T> {
    pub model: String,
    pub gamma0: T,
    pub sigma2_hat: T,
    pub kl_hat: T,
    pub kl_source: KlSource,
    pub epsilon: T,
    pub i: usize,
    pub mode: OracleMode<T>,
    /// Set when the raw formula exceeded 1.
    pub clamped: bool,
    /// Closed-form variance bound, when the pair has closed-form KLs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_bound: Option<T>,
    pub condition_check: ConditionCheck<T>,
}

/// Pilot variance, KL, `gamma0`, then the condition check at `gamma0`.
pub fn calibrate<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    inputs: &CalibrationInputs<T>,
    rng: &mut R,
) -> Result<CalibrationResult<T>> {
    if inputs.i == 0 {
        return Err(Error::invalid("calibration needs i >= 1"));
    }
    let pilot = estimate_oracle_variance(pair, &inputs.mode, inputs.pilot_draws, rng)?;
    let sigma2 = pilot.sample_variance;
    let epsilon = inputs.epsilon.resolve(sigma2)?;
    let (kl, kl_source) = match analytic_kl(pair, KlDirection::PostVsPre) {
        Some(kl) => (kl, KlSource::Analytic),
        None => (
            estimate_kl(pair, inputs.kl_draws, &inputs.mode, rng)?.mean,
            KlSource::Estimated,
        ),
    };
    let raw = gamma_zero(sigma2, epsilon, inputs.i as u64, kl)?;
    if !(raw > T::zero()) {
        let target = T::lit(0.9);
        let suggested_i = required_i(sigma2, epsilon, target, kl)?;
        return Err(Error::GammaNotPositive {
            gamma0: raw.as_f64(),
            i: inputs.i as u64,
            suggested_i,
        });
    }
    let gamma0 = raw.min(T::one());
    let condition_check = check_gamma_condition(
        pair,
        gamma0,
        inputs.i,
        &inputs.mode,
        inputs.check_draws,
        rng,
    )?;
    Ok(CalibrationResult {
        model: pair.name().to_string(),
        gamma0,
        sigma2_hat: sigma2,
        kl_hat: kl,
        kl_source,
        epsilon,
        i: inputs.i,
        mode: inputs.mode.clone(),
        clamped: raw > T::one(),
        variance_bound: pair_variance_bound(pair),
        condition_check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BoltzmannPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gamma_zero_examples() {
        assert!((gamma_zero(2.0f64, 0.0, 100, 0.5).unwrap() - 0.98).abs() < 1e-15);
        assert_eq!(gamma_zero(0.0, 0.0, 7, 0.3).unwrap(), 1.0);
        assert!(gamma_zero(1.0, 0.1, 10, 0.0).is_err());
        assert!(gamma_zero(1.0, 0.1, 0, 1.0).is_err());
        assert!(gamma_zero(100.0, 0.0, 1, 1.0).unwrap() < 0.0);
    }

    #[test]
    fn required_i_examples() {
        assert_eq!(required_i(2.0, 0.0, 0.98, 0.5).unwrap(), 100);
        assert_eq!(required_i(0.0, 0.0, 0.5, 1.0).unwrap(), 1);
        assert!(required_i(2.0, 0.0, 1.0, 0.5).is_err());
        assert!(matches!(
            required_i(1e300, 0.0, 0.5, 1e-300),
            Err(Error::UnboundedSampleSize { .. })
        ));
    }

    #[test]
    fn predictions() {
        let kl = 0.017_678_443_206_045_28;
        assert!((predicted_cadd(1000f64.ln(), 1.0, kl).unwrap() - 390.75).abs() < 0.05);
        assert_eq!(
            predicted_cadd(2.0, 1.0, 0.5).unwrap(),
            2.0 * predicted_cadd(1.0, 1.0, 0.5).unwrap()
        );
        assert!(predicted_cadd(0.0, 1.0, 1.0).is_err());
        assert!(predicted_cadd(1.0, -1.0, 1.0).is_err());
        assert!((arl_lower_bound(200f64.ln()) - 200.0).abs() < 1e-9);
        assert!((arl_lower_bound(10_000f64.ln()) - 10_000.0).abs() < 1e-7);
        assert!((arl_lower_bound(1e-12f64) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn identical_pair_condition_is_exactly_one() {
        let p = BoltzmannPair::new(1.0, 1.0).unwrap();
        let c = check_gamma_condition(
            &p,
            0.7,
            3,
            &OracleMode::Constant { value: 0.0 },
            100,
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(c.estimate, 1.0);
        assert!(c.passed);
    }

    #[test]
    fn overflow_reports_failure() {
        let p = BoltzmannPair::<f64>::default_pair();
        let c = check_gamma_condition(
            &p,
            1.0,
            1,
            &OracleMode::Constant { value: 1e6 },
            10,
            &mut rng(0),
        )
        .unwrap();
        assert!(!c.passed);
        assert!(c.diagnostic.unwrap().contains("too large"));
    }

    #[test]
    fn scusum_delta_boltzmann_has_no_feasible_value() {
        let p = BoltzmannPair::<f64>::default_pair();
        let r = scusum_delta(&p, 100, &mut rng(0)).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(!r.feasible);
        assert!(r.diagnostic.is_some());
        let same = BoltzmannPair::new(1.0, 1.0).unwrap();
        assert_eq!(
            scusum_delta(&same, 100, &mut rng(0)).unwrap().delta,
            SCUSUM_DELTA_BRACKET
        );
    }

    #[test]
    fn calibration_aborts_when_i_too_small() {
        let p = BoltzmannPair::<f64>::default_pair();
        let inputs = CalibrationInputs {
            pilot_draws: 2000,
            check_draws: 100,
            ..CalibrationInputs::new(1, OracleMode::ExactPath)
        };
        match calibrate(&p, &inputs, &mut rng(1)) {
            Err(Error::GammaNotPositive { suggested_i, .. }) => assert!(suggested_i > 1),
            other => panic!("expected GammaNotPositive, got {other:?}"),
        }
    }

    #[test]
    fn exact_oracle_recovers_cusum() {
        let p = BoltzmannPair::<f64>::default_pair();
        let mode = OracleMode::exact_constant(&p).unwrap();
        let inputs = CalibrationInputs {
            pilot_draws: 10,
            check_draws: 100,
            ..CalibrationInputs::new(1, mode)
        };
        let r = calibrate(&p, &inputs, &mut rng(1)).unwrap();
        assert_eq!(r.gamma0, 1.0);
        assert_eq!(r.epsilon, 0.0);
    }
}
