//! The partition oracle: unbiased estimates of `log(Z0/Z1)`.
//!
//! Thermodynamic integration along the geometric path gives
//!
//! ```text
//! log Z1 - log Z0 = E_{beta ~ U[0,1]} E_{X ~ P_beta} [ U'_beta(X) ],
//! U'_beta(X) = log P~1(X) - log P~0(X),
//! ```
//!
//! so one draw of `(beta, X)` yields one unbiased estimate. Every oracle mode
//! here emits the negated value, `log(Z0/Z1)`, which is what the detector
//! adds to the unnormalized log-likelihood ratio.
//!
//! Modes:
//! - `ExactPath`: `beta ~ U[0,1]`, `X ~ P_beta` exactly. Unbiased.
//! - `Importance`: `beta ~ U[0,1]`, then the self-normalized estimate over
//!   `K` fresh pre-change draws weighted by `w(X)^beta`. Consistent as
//!   `K -> inf` but biased for finite `K`.
//! - `Metropolis`: `X ~ P_beta` approximated by random-walk Metropolis after
//!   a burn-in. Approximate; for pairs without a closed-form path.
//! - `Naive1`, `Naive2`: the plug-in estimators, biased through Jensen's
//!   inequality. Kept as baselines.
//! - `Constant`: a fixed value, normally the exact `log(Z0/Z1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    analytic_kl, analytic_log_z_ratio, log_weight, sample_path_into, KlDirection, Regime, Sample,
    UnnormalizedPair,
};
use crate::scalar::{log_sum_exp, Real, RunningStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetropolisConfig<T> {
    pub burn_in: usize,
    pub step: T,
}

impl<T: Real> Default for MetropolisConfig<T> {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            step: T::one(),
        }
    }
}

/// How oracle draws are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OracleMode<T> {
    ExactPath,
    Importance { k: usize },
    Metropolis(MetropolisConfig<T>),
    Naive1 { n_mc: usize },
    Naive2 { n_mc: usize },
    Constant { value: T },
}

impl<T: Real> OracleMode<T> {
    /// Constant oracle returning the pair's closed-form `log(Z0/Z1)`.
    pub fn exact_constant<P: UnnormalizedPair<T> + ?Sized>(pair: &P) -> Result<Self> {
        analytic_log_z_ratio(pair)
            .map(|value| Self::Constant { value })
            .ok_or_else(|| Error::unsupported("closed-form log partition ratio", pair.name()))
    }

    pub fn kind(&self) -> DrawKind {
        match self {
            Self::ExactPath => DrawKind::ExactPath,
            Self::Importance { .. } => DrawKind::Importance,
            Self::Metropolis(_) => DrawKind::Metropolis,
            Self::Naive1 { .. } => DrawKind::Naive1,
            Self::Naive2 { .. } => DrawKind::Naive2,
            Self::Constant { .. } => DrawKind::Constant,
        }
    }

    /// Whether the mode's draws are unbiased for `log(Z0/Z1)`.
    pub fn is_unbiased(&self) -> bool {
        matches!(self, Self::ExactPath | Self::Constant { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawKind {
    ExactPath,
    Importance,
    Metropolis,
    Naive1,
    Naive2,
    Constant,
}

impl DrawKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ExactPath => "exact_path",
            Self::Importance => "importance",
            Self::Metropolis => "metropolis",
            Self::Naive1 => "naive1",
            Self::Naive2 => "naive2",
            Self::Constant => "constant",
        }
    }
}

/// One oracle output `Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDraw<T> {
    pub value: T,
    /// Set for the thermodynamic-integration modes only.
    pub beta_used: Option<T>,
    pub mode: DrawKind,
}

/// `T_{i,n}`: the mean of `i` independent oracle draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleBatch<T> {
    pub mean: T,
    pub i: usize,
    pub draws: Option<Vec<OracleDraw<T>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport<T> {
    pub sample_mean: T,
    pub sample_variance: T,
    pub std_error: T,
    pub n: usize,
    /// Closed-form upper bound on the variance of the path estimator, when
    /// the pair has analytic KL divergences and partition ratio.
    pub variance_bound: Option<T>,
}

/// Stateful oracle with reusable scratch space.
///
/// Draws depend only on the generator passed in, so independent generators
/// give independent batches.
pub struct Oracle<'a, T: Real, P: ?Sized> {
    pair: &'a P,
    mode: OracleMode<T>,
    buf: Vec<T>,
    log_w: Vec<T>,
}

impl<'a, T: Real, P: UnnormalizedPair<T> + ?Sized> Oracle<'a, T, P> {
    /// Checks up front that the pair supports `mode`.
    pub fn new(pair: &'a P, mode: OracleMode<T>) -> Result<Self> {
        let caps = pair.capabilities();
        match &mode {
            OracleMode::ExactPath if !caps.exact_path_sampler => {
                return Err(Error::Unsupported {
                    operation:
                        "exact geometric-path sampling (use importance or metropolis oracle mode)",
                    model: pair.name().to_owned(),
                })
            }
            OracleMode::Importance { k } | OracleMode::Naive1 { n_mc: k } if *k == 0 => {
                return Err(Error::invalid("oracle sample count must be >= 1"))
            }
            OracleMode::Naive2 { n_mc } if *n_mc == 0 => {
                return Err(Error::invalid("oracle sample count must be >= 1"))
            }
            OracleMode::Importance { .. } | OracleMode::Naive1 { .. }
                if !caps.exact_pre_sampler =>
            {
                return Err(Error::unsupported("exact pre-change sampling", pair.name()))
            }
            OracleMode::Naive2 { .. } if !caps.exact_post_sampler => {
                return Err(Error::unsupported(
                    "exact post-change sampling",
                    pair.name(),
                ))
            }
            OracleMode::Metropolis(cfg) if !(cfg.step > T::zero()) => {
                return Err(Error::invalid("metropolis step must be positive"))
            }
            OracleMode::Constant { value } if !value.is_finite() => {
                return Err(Error::invalid("constant oracle value must be finite"))
            }
            _ => {}
        }
        Ok(Self {
            pair,
            mode,
            buf: vec![T::zero(); pair.dim()],
            log_w: Vec::new(),
        })
    }

    pub fn mode(&self) -> &OracleMode<T> {
        &self.mode
    }

    pub fn draw<R: Rng>(&mut self, rng: &mut R) -> Result<OracleDraw<T>> {
        let kind = self.mode.kind();
        let (value, beta_used) = match &self.mode {
            OracleMode::ExactPath => {
                let beta = T::unit(rng);
                sample_path_into(self.pair, beta, rng, &mut self.buf)?;
                (-log_weight(self.pair, &self.buf)?, Some(beta))
            }
            OracleMode::Importance { k } => {
                let beta = T::unit(rng);
                self.log_w.clear();
                for _ in 0..*k {
                    self.pair.draw_into(Regime::Pre, rng, &mut self.buf)?;
                    self.log_w.push(log_weight(self.pair, &self.buf)?);
                }
                (snis_from_log_weights(&self.log_w, beta)?, Some(beta))
            }
            OracleMode::Metropolis(cfg) => {
                let beta = T::unit(rng);
                let cfg = *cfg;
                metropolis_into(self.pair, beta, &cfg, rng, &mut self.buf)?;
                (-log_weight(self.pair, &self.buf)?, Some(beta))
            }
            OracleMode::Naive1 { n_mc } => (naive_estimator_1(self.pair, *n_mc, rng)?, None),
            OracleMode::Naive2 { n_mc } => (naive_estimator_2(self.pair, *n_mc, rng)?, None),
            OracleMode::Constant { value } => (*value, None),
        };
        Ok(OracleDraw {
            value,
            beta_used,
            mode: kind,
        })
    }

    /// `T_{i,n}` without materializing the draws.
    #[inline]
    pub fn batch_mean<R: Rng>(&mut self, i: usize, rng: &mut R) -> Result<T> {
        if i == 0 {
            return Err(Error::invalid("oracle batch size i must be >= 1"));
        }
        if let OracleMode::Constant { value } = self.mode {
            return Ok(value);
        }
        let mut stats = RunningStats::new();
        for _ in 0..i {
            stats.push(self.draw(rng)?.value);
        }
        Ok(stats.mean())
    }

    pub fn batch<R: Rng>(
        &mut self,
        i: usize,
        rng: &mut R,
        keep_draws: bool,
    ) -> Result<OracleBatch<T>> {
        if i == 0 {
            return Err(Error::invalid("oracle batch size i must be >= 1"));
        }
        let mut stats = RunningStats::new();
        let mut draws = keep_draws.then(|| Vec::with_capacity(i));
        for _ in 0..i {
            let d = self.draw(rng)?;
            stats.push(d.value);
            if let Some(v) = draws.as_mut() {
                v.push(d);
            }
        }
        Ok(OracleBatch {
            mean: stats.mean(),
            i,
            draws,
        })
    }
}

/// One exact-path draw: `beta ~ U[0,1]`, `X ~ P_beta`, value `-U'_beta(X)`.
pub fn ti_single_draw<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    rng: &mut R,
) -> Result<OracleDraw<T>> {
    Oracle::new(pair, OracleMode::ExactPath)?.draw(rng)
}

/// Self-normalized weights `w(X_k)^beta / sum_j w(X_j)^beta` from `log w`.
pub fn normalized_is_weights<T: Real>(log_weights: &[T], beta: T) -> Result<Vec<T>> {
    if log_weights.is_empty() {
        return Err(Error::invalid(
            "importance sampling needs K >= 1 base samples",
        ));
    }
    let max = log_weights
        .iter()
        .map(|&lw| beta * lw)
        .fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = log_weights
        .iter()
        .map(|&lw| (beta * lw - max).exp())
        .collect();
    let total: T = raw.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(Error::DegenerateWeights {
            beta: beta.as_f64(),
        });
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn snis_from_log_weights<T: Real>(log_weights: &[T], beta: T) -> Result<T> {
    let weights = normalized_is_weights(log_weights, beta)?;
    let est: T = weights
        .iter()
        .zip(log_weights)
        .map(|(&w, &lw)| w * lw)
        .sum();
    Ok(-est)
}

fn base_log_weights<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    base_samples: &[Sample<T>],
) -> Result<Vec<T>> {
    base_samples
        .iter()
        .map(|x| log_weight(pair, x.values()))
        .collect()
}

/// Self-normalized importance-sampled path expectation at a fixed `beta`,
/// reusing pre-change `base_samples`; sign flipped to `log(Z0/Z1)`.
pub fn ti_single_draw_is<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    base_samples: &[Sample<T>],
    beta: T,
) -> Result<OracleDraw<T>> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::invalid(format!("beta={beta} outside [0, 1]")));
    }
    let lw = base_log_weights(pair, base_samples)?;
    Ok(OracleDraw {
        value: snis_from_log_weights(&lw, beta)?,
        beta_used: Some(beta),
        mode: DrawKind::Importance,
    })
}

/// `mean_k w(X_k)^beta`, an estimate of `Z_beta / Z0` for `X_k ~ P0`.
pub fn is_normalizer_check<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    base_samples: &[Sample<T>],
    beta: T,
) -> Result<T> {
    if base_samples.is_empty() {
        return Err(Error::invalid(
            "normalizer check needs at least one base sample",
        ));
    }
    let lw = base_log_weights(pair, base_samples)?;
    let stats: RunningStats<T> = lw.iter().map(|&l| (beta * l).exp()).collect();
    Ok(stats.mean())
}

/// Trapezoid rule over `points` equally spaced betas in `[0, 1]`, each
/// expectation importance-sampled from the same base samples. Diagnostic
/// only; biased for finite K and by the quadrature.
pub fn ti_grid_trapezoid<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    base_samples: &[Sample<T>],
    points: usize,
) -> Result<T> {
    if points < 2 {
        return Err(Error::invalid("trapezoid grid needs at least 2 points"));
    }
    let lw = base_log_weights(pair, base_samples)?;
    let h = T::one() / T::from_count(points - 1);
    let mut acc = T::zero();
    for k in 0..points {
        let beta = T::from_count(k) * h;
        let v = snis_from_log_weights(&lw, beta)?;
        let w = if k == 0 || k == points - 1 {
            T::lit(0.5)
        } else {
            T::one()
        };
        acc = acc + w * v;
    }
    Ok(acc * h)
}

/// Mean of `i` independent draws of `mode`.
pub fn oracle_batch<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    i: usize,
    mode: &OracleMode<T>,
    rng: &mut R,
) -> Result<OracleBatch<T>> {
    Oracle::new(pair, mode.clone())?.batch(i, rng, true)
}

fn metropolis_into<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    beta: T,
    cfg: &MetropolisConfig<T>,
    rng: &mut R,
    out: &mut [T],
) -> Result<()> {
    let target = |x: &[T]| {
        let lp1 = pair.log_density(Regime::Post, x);
        let lp0 = pair.log_density(Regime::Pre, x);
        if lp1.is_finite() && lp0.is_finite() {
            beta * lp1 + (T::one() - beta) * lp0
        } else {
            T::neg_infinity()
        }
    };
    if pair.capabilities().exact_pre_sampler {
        pair.draw_into(Regime::Pre, rng, out)?;
    } else {
        out.fill(T::zero());
    }
    let mut current = target(out);
    if !current.is_finite() {
        return Err(Error::Domain(format!(
            "metropolis start point has non-finite path density for `{}`",
            pair.name()
        )));
    }
    let mut proposal = out.to_vec();
    for _ in 0..cfg.burn_in {
        for (p, &x) in proposal.iter_mut().zip(out.iter()) {
            *p = x + cfg.step * T::std_normal(rng);
        }
        let cand = target(&proposal);
        let u = T::unit(rng);
        if cand.is_finite() && u.ln() < cand - current {
            out.copy_from_slice(&proposal);
            current = cand;
        }
    }
    Ok(())
}

/// Approximate draw from `P_beta` by random-walk Metropolis.
pub fn metropolis_path_sample<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    beta: T,
    cfg: &MetropolisConfig<T>,
    rng: &mut R,
) -> Result<Sample<T>> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::invalid(format!("beta={beta} outside [0, 1]")));
    }
    let mut out = vec![T::zero(); pair.dim()];
    metropolis_into(pair, beta, cfg, rng, &mut out)?;
    Ok(Sample::new(out))
}

/// Where naive estimator 1 draws its integration points.
#[derive(Debug, Clone, PartialEq)]
pub enum NaiveProposal<T> {
    /// The exact pre-change sampler. Its density is only known up to `Z0`,
    /// but that constant cancels in `Z^0 / Z^1`.
    PreSampler,
    /// Uniform over an axis-aligned box.
    Box { lower: Vec<T>, upper: Vec<T> },
}

/// `log(Z^0 / Z^1)` with both constants estimated by plain Monte Carlo
/// integration under the pre-change sampler.
pub fn naive_estimator_1<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    n_mc: usize,
    rng: &mut R,
) -> Result<T> {
    naive_estimator_1_with(pair, n_mc, &NaiveProposal::PreSampler, rng)
}

pub fn naive_estimator_1_with<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    n_mc: usize,
    proposal: &NaiveProposal<T>,
    rng: &mut R,
) -> Result<T> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    let d = pair.dim();
    let mut x = vec![T::zero(); d];
    let mut log_terms0 = Vec::with_capacity(n_mc);
    let mut log_terms1 = Vec::with_capacity(n_mc);
    match proposal {
        NaiveProposal::PreSampler => {
            if !pair.capabilities().exact_pre_sampler {
                return Err(Error::unsupported("exact pre-change sampling", pair.name()));
            }
            for _ in 0..n_mc {
                pair.draw_into(Regime::Pre, rng, &mut x)?;
                let lq = pair.log_density(Regime::Pre, &x);
                log_terms0.push(pair.log_density(Regime::Pre, &x) - lq);
                log_terms1.push(pair.log_density(Regime::Post, &x) - lq);
            }
        }
        NaiveProposal::Box { lower, upper } => {
            if lower.len() != d
                || upper.len() != d
                || lower.iter().zip(upper).any(|(l, u)| !(u > l))
            {
                return Err(Error::invalid(
                    "integration box must have dim bounds with upper > lower",
                ));
            }
            let log_vol: T = lower.iter().zip(upper).map(|(&l, &u)| (u - l).ln()).sum();
            for _ in 0..n_mc {
                for ((xi, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
                    *xi = l + (u - l) * T::unit(rng);
                }
                log_terms0.push(pair.log_density(Regime::Pre, &x) + log_vol);
                log_terms1.push(pair.log_density(Regime::Post, &x) + log_vol);
            }
        }
    }
    let log_z0 = log_sum_exp(&log_terms0);
    let log_z1 = log_sum_exp(&log_terms1);
    if !log_z0.is_finite() || !log_z1.is_finite() {
        return Err(Error::DegenerateEstimate(format!(
            "naive estimator 1 produced a zero partition estimate for `{}`",
            pair.name()
        )));
    }
    // the 1/n factors cancel
    Ok(log_z0 - log_z1)
}

/// `log( mean_k P~0(X_k)/P~1(X_k) )` with `X_k ~ P1`.
pub fn naive_estimator_2<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    n_mc: usize,
    rng: &mut R,
) -> Result<T> {
    if n_mc == 0 {
        return Err(Error::invalid("n_mc must be >= 1"));
    }
    if !pair.capabilities().exact_post_sampler {
        return Err(Error::unsupported(
            "exact post-change sampling",
            pair.name(),
        ));
    }
    let mut x = vec![T::zero(); pair.dim()];
    let mut terms = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        pair.draw_into(Regime::Post, rng, &mut x)?;
        terms.push(pair.log_density(Regime::Pre, &x) - pair.log_density(Regime::Post, &x));
    }
    let est = log_sum_exp(&terms) - T::from_count(n_mc).ln();
    if !est.is_finite() {
        return Err(Error::DegenerateEstimate(
            "naive estimator 2 ratio mean underflowed to zero".into(),
        ));
    }
    Ok(est)
}

/// Upper bound `3 S^2 + S` on the variance of the path estimator, where
/// `S = D_KL(P1,P0) + D_KL(P0,P1) + 2 |log(Z1/Z0)|`.
pub fn ti_variance_bound<T: Real>(kl_post_pre: T, kl_pre_post: T, log_z_ratio: T) -> Result<T> {
    if !(kl_post_pre >= T::zero()) || !(kl_pre_post >= T::zero()) {
        return Err(Error::invalid(format!(
            "KL divergences must be nonnegative, got {kl_post_pre} and {kl_pre_post}"
        )));
    }
    if !log_z_ratio.is_finite() {
        return Err(Error::invalid("log partition ratio must be finite"));
    }
    let s = kl_post_pre + kl_pre_post + T::lit(2.0) * log_z_ratio.abs();
    Ok(T::lit(3.0) * s * s + s)
}

/// [`ti_variance_bound`] from the pair's closed forms, if it has them.
pub fn pair_variance_bound<T: Real, P: UnnormalizedPair<T> + ?Sized>(pair: &P) -> Option<T> {
    let a = analytic_kl(pair, KlDirection::PostVsPre)?;
    let b = analytic_kl(pair, KlDirection::PreVsPost)?;
    let lz = analytic_log_z_ratio(pair)?;
    ti_variance_bound(a, b, lz).ok()
}

/// Pilot estimate of the oracle variance from `n` independent draws.
pub fn estimate_oracle_variance<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    pair: &P,
    mode: &OracleMode<T>,
    n: usize,
    rng: &mut R,
) -> Result<VarianceReport<T>> {
    if n < 2 {
        return Err(Error::invalid("variance estimate needs n >= 2"));
    }
    let mut oracle = Oracle::new(pair, mode.clone())?;
    let mut stats = RunningStats::new();
    for _ in 0..n {
        stats.push(oracle.draw(rng)?.value);
    }
    Ok(VarianceReport {
        sample_mean: stats.mean(),
        sample_variance: stats.variance(),
        std_error: stats.std_error(),
        n,
        variance_bound: pair_variance_bound(pair),
    })
}
