//! One-sided cumulative detectors sharing a step/threshold interface.
//!
//! | kind   | increment per observation `x`                         |
//! |--------|--------------------------------------------------------|
//! | CUSUM  | `log P1(x)/P0(x)` (needs the exact partition ratio)    |
//! | LPA    | `gamma * log P~1(x)/P~0(x) + gamma * T_{i,n}`          |
//! | SCUSUM | `delta * (S(x, P0) - S(x, P1))`, Hyvärinen scores      |
//!
//! All statistics are reflected at zero and stop at the first `n` with
//! statistic `>= b`. The naive plug-in detectors are LPA with `gamma = 1`
//! and a constant partition term estimated once per run.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    analytic_log_z_ratio, hyvarinen_score, log_weight, Regime, Sample, UnnormalizedPair,
};
use crate::partition::{naive_estimator_1, naive_estimator_2, Oracle, OracleMode};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Cusum,
    Lpa,
    Scusum,
}

/// `Lambda(n)` or `Z(n)` together with `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorState<T> {
    pub statistic: T,
    pub time: u64,
    pub kind: DetectorKind,
}

impl<T: Real> DetectorState<T> {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            statistic: T::zero(),
            time: 0,
            kind,
        }
    }

    /// `(statistic + increment)^+`, time + 1.
    #[inline]
    fn advance(self, increment: T) -> Result<Self> {
        if !increment.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite increment {increment} at step {}",
                self.time + 1
            )));
        }
        Ok(Self {
            statistic: (self.statistic + increment).max(T::zero()),
            time: self.time + 1,
            kind: self.kind,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpaConfig<T> {
    pub gamma: T,
    /// Oracle draws averaged per observation.
    pub i: usize,
    pub mode: OracleMode<T>,
}

impl<T: Real> LpaConfig<T> {
    pub fn new(gamma: T, i: usize, mode: OracleMode<T>) -> Result<Self> {
        let cfg = Self { gamma, i, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > T::zero() && self.gamma <= T::one()) {
            return Err(Error::invalid(format!(
                "gamma={} must lie in (0, 1]",
                self.gamma
            )));
        }
        if self.i == 0 {
            return Err(Error::invalid("LPA needs i >= 1 oracle draws per step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveKind {
    /// Separate Monte Carlo integrals for `Z0` and `Z1`.
    Integral,
    /// Importance ratio under the post-change sampler.
    Ratio,
}

/// Detector configuration before per-run preparation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorSpec<T> {
    Cusum,
    Lpa(LpaConfig<T>),
    Scusum {
        delta: T,
    },
    /// CUSUM with a plug-in `log(Z0/Z1)` estimated once per run from
    /// `budget` Monte Carlo samples.
    Naive {
        estimator: NaiveKind,
        budget: usize,
    },
}

impl<T: Real> DetectorSpec<T> {
    pub fn kind(&self) -> DetectorKind {
        match self {
            Self::Cusum => DetectorKind::Cusum,
            Self::Lpa(_) | Self::Naive { .. } => DetectorKind::Lpa,
            Self::Scusum { .. } => DetectorKind::Scusum,
        }
    }

    /// Multiplier on the log-likelihood drift, where one exists.
    pub fn gamma(&self) -> Option<T> {
        match self {
            Self::Cusum | Self::Naive { .. } => Some(T::one()),
            Self::Lpa(cfg) => Some(cfg.gamma),
            Self::Scusum { .. } => None,
        }
    }

    /// Whether the detector's increments are built to satisfy the
    /// exponential-moment condition behind `ARL >= e^b`.
    pub fn has_arl_guarantee(&self) -> bool {
        match self {
            Self::Cusum | Self::Scusum { .. } => true,
            Self::Lpa(cfg) => cfg.mode.is_unbiased(),
            Self::Naive { .. } => false,
        }
    }

    /// Checks the pair can support this detector without running it.
    pub fn check_capabilities<P: UnnormalizedPair<T> + ?Sized>(&self, pair: &P) -> Result<()> {
        let caps = pair.capabilities();
        match self {
            Self::Cusum if !caps.analytic_log_z_ratio => Err(Error::unsupported(
                "CUSUM (closed-form log partition ratio)",
                pair.name(),
            )),
            Self::Lpa(cfg) => {
                cfg.validate()?;
                Oracle::new(pair, cfg.mode.clone()).map(|_| ())
            }
            Self::Scusum { .. } if !caps.analytic_score => {
                Err(Error::unsupported("SCUSUM (Hyvärinen score)", pair.name()))
            }
            Self::Scusum { delta } if !(*delta >= T::zero()) => Err(Error::invalid(format!(
                "SCUSUM delta={delta} must be nonnegative"
            ))),
            Self::Naive { estimator, budget } => {
                if *budget == 0 {
                    return Err(Error::invalid("naive detector budget must be >= 1"));
                }
                let ok = match estimator {
                    NaiveKind::Integral => caps.exact_pre_sampler,
                    NaiveKind::Ratio => caps.exact_post_sampler,
                };
                if ok {
                    Ok(())
                } else {
                    Err(Error::unsupported("naive estimator sampling", pair.name()))
                }
            }
            _ => Ok(()),
        }
    }
}

enum Increment<'a, T: Real, P: ?Sized> {
    /// `gamma * lw + gamma * c`; CUSUM and the naive plug-ins.
    Fixed {
        gamma: T,
        offset: T,
    },
    Lpa {
        gamma: T,
        i: usize,
        oracle: Oracle<'a, T, P>,
    },
    Scusum {
        delta: T,
    },
}

/// A detector prepared for one run over one stream.
pub struct Detector<'a, T: Real, P: ?Sized> {
    pair: &'a P,
    kind: DetectorKind,
    inc: Increment<'a, T, P>,
}

/// One row of a statistic trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow<T> {
    pub n: u64,
    pub statistic: T,
    pub increment: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport<T> {
    /// `tau`, present iff the threshold was crossed.
    pub stop_time: Option<u64>,
    pub threshold_b: T,
    pub censored: bool,
    /// Observations consumed.
    pub observed: u64,
}

impl<'a, T: Real, P: UnnormalizedPair<T> + ?Sized> Detector<'a, T, P> {
    /// Resolve per-run state. The naive plug-ins consume `rng` here to
    /// estimate their constant.
    pub fn prepare<R: Rng>(spec: &DetectorSpec<T>, pair: &'a P, rng: &mut R) -> Result<Self> {
        spec.check_capabilities(pair)?;
        let inc = match spec {
            DetectorSpec::Cusum => Increment::Fixed {
                gamma: T::one(),
                offset: analytic_log_z_ratio(pair).ok_or_else(|| {
                    Error::unsupported("closed-form log partition ratio", pair.name())
                })?,
            },
            DetectorSpec::Lpa(cfg) => match cfg.mode {
                // Folding the constant keeps the arithmetic identical to CUSUM.
                OracleMode::Constant { value } => Increment::Fixed {
                    gamma: cfg.gamma,
                    offset: value,
                },
                _ => Increment::Lpa {
                    gamma: cfg.gamma,
                    i: cfg.i,
                    oracle: Oracle::new(pair, cfg.mode.clone())?,
                },
            },
            DetectorSpec::Scusum { delta } => Increment::Scusum { delta: *delta },
            DetectorSpec::Naive { estimator, budget } => {
                let offset = match estimator {
                    NaiveKind::Integral => naive_estimator_1(pair, *budget, rng)?,
                    NaiveKind::Ratio => naive_estimator_2(pair, *budget, rng)?,
                };
                Increment::Fixed {
                    gamma: T::one(),
                    offset,
                }
            }
        };
        Ok(Self {
            pair,
            kind: spec.kind(),
            inc,
        })
    }

    pub fn initial_state(&self) -> DetectorState<T> {
        DetectorState::new(self.kind)
    }

    /// Increment contributed by observation `x`. LPA draws a fresh oracle
    /// batch on every call.
    #[inline]
    pub fn increment<R: Rng>(&mut self, x: &[T], rng: &mut R) -> Result<T> {
        match &mut self.inc {
            Increment::Fixed { gamma, offset } => {
                let lw = log_weight(self.pair, x)?;
                Ok(*gamma * lw + *gamma * *offset)
            }
            Increment::Lpa { gamma, i, oracle } => {
                let lw = log_weight(self.pair, x)?;
                let t = oracle.batch_mean(*i, rng)?;
                Ok(*gamma * lw + *gamma * t)
            }
            Increment::Scusum { delta } => {
                let s0 = hyvarinen_score(self.pair, Regime::Pre, x)?;
                let s1 = hyvarinen_score(self.pair, Regime::Post, x)?;
                Ok(*delta * (s0 - s1))
            }
        }
    }

    pub fn step<R: Rng>(
        &mut self,
        state: DetectorState<T>,
        x: &[T],
        rng: &mut R,
    ) -> Result<(DetectorState<T>, T)> {
        let step = state.time + 1;
        let inc = self.increment(x, rng).map_err(|e| match (&self.inc, e) {
            (Increment::Lpa { .. }, e @ (Error::Domain(_) | Error::Unsupported { .. })) => e,
            (Increment::Lpa { .. }, e) => Error::OracleFailure {
                step,
                source: Box::new(e),
            },
            (_, e) => e,
        })?;
        Ok((state.advance(inc)?, inc))
    }

    /// Step through observations produced by `fill` until the statistic
    /// reaches `threshold_b` or `max_len` observations are consumed.
    pub fn run_with<R, F>(
        &mut self,
        threshold_b: T,
        max_len: u64,
        mut fill: F,
        rng: &mut R,
        mut trace: Option<&mut Vec<TraceRow<T>>>,
    ) -> Result<StoppingReport<T>>
    where
        R: Rng,
        F: FnMut(u64, &mut [T]) -> Result<()>,
    {
        if !(threshold_b > T::zero()) {
            return Err(Error::invalid(format!(
                "threshold b={threshold_b} must be positive"
            )));
        }
        if max_len == 0 {
            return Err(Error::invalid("cannot run a detector on an empty stream"));
        }
        let mut x = vec![T::zero(); self.pair.dim()];
        let mut state = self.initial_state();
        while state.time < max_len {
            fill(state.time + 1, &mut x)?;
            let (next, inc) = self.step(state, &x, rng)?;
            state = next;
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow {
                    n: state.time,
                    statistic: state.statistic,
                    increment: inc,
                });
            }
            if state.statistic >= threshold_b {
                return Ok(StoppingReport {
                    stop_time: Some(state.time),
                    threshold_b,
                    censored: false,
                    observed: state.time,
                });
            }
        }
        Ok(StoppingReport {
            stop_time: None,
            threshold_b,
            censored: true,
            observed: state.time,
        })
    }
}

/// `Lambda(n) = (Lambda(n-1) + log_lr)^+`.
pub fn cusum_step<T: Real>(state: DetectorState<T>, log_lr: T) -> Result<DetectorState<T>> {
    if state.kind != DetectorKind::Cusum {
        return Err(Error::invalid("cusum_step on a non-CUSUM state"));
    }
    state.advance(log_lr)
}

/// One LPA update with a fresh oracle batch.
pub fn lpa_step<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    state: DetectorState<T>,
    x: &Sample<T>,
    pair: &P,
    cfg: &LpaConfig<T>,
    rng: &mut R,
) -> Result<DetectorState<T>> {
    if state.kind != DetectorKind::Lpa {
        return Err(Error::invalid("lpa_step on a non-LPA state"));
    }
    let mut det = Detector::prepare(&DetectorSpec::Lpa(cfg.clone()), pair, rng)?;
    det.step(state, x.values(), rng).map(|(s, _)| s)
}

/// One SCUSUM update.
pub fn scusum_step<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    state: DetectorState<T>,
    x: &Sample<T>,
    pair: &P,
    delta: T,
) -> Result<DetectorState<T>> {
    if state.kind != DetectorKind::Scusum {
        return Err(Error::invalid("scusum_step on a non-SCUSUM state"));
    }
    let s0 = hyvarinen_score(pair, Regime::Pre, x.values())?;
    let s1 = hyvarinen_score(pair, Regime::Post, x.values())?;
    state.advance(delta * (s0 - s1))
}

/// Run a detector over a materialized stream.
pub fn run_detector<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    spec: &DetectorSpec<T>,
    pair: &P,
    stream: &[Sample<T>],
    threshold_b: T,
    rng: &mut R,
) -> Result<StoppingReport<T>> {
    run_detector_traced(spec, pair, stream, threshold_b, rng, None)
}

pub fn run_detector_traced<T: Real, P: UnnormalizedPair<T> + ?Sized, R: Rng>(
    spec: &DetectorSpec<T>,
    pair: &P,
    stream: &[Sample<T>],
    threshold_b: T,
    rng: &mut R,
    trace: Option<&mut Vec<TraceRow<T>>>,
) -> Result<StoppingReport<T>> {
    if stream.is_empty() {
        return Err(Error::invalid("cannot run a detector on an empty stream"));
    }
    let mut det = Detector::prepare(spec, pair, rng)?;
    det.run_with(
        threshold_b,
        stream.len() as u64,
        |n, out| {
            let s = &stream[(n - 1) as usize];
            if s.len() != out.len() {
                return Err(Error::invalid(format!(
                    "sample {n} has length {}, model dimension is {}",
                    s.len(),
                    out.len()
                )));
            }
            out.copy_from_slice(s.values());
            Ok(())
        },
        rng,
        trace,
    )
}

/// Statistic trace as CSV with columns `n,statistic,increment`.
pub fn write_trace_csv<T: Real, W: Write>(rows: &[TraceRow<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "statistic", "increment"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.statistic.to_string(),
            r.increment.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
