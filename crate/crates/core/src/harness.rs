//! Seeded Monte Carlo estimation of ARL and conditional delay.
//!
//! Trial `t` draws its stream and its detector randomness from generators
//! seeded by `(master_seed, purpose, t)` alone, so results do not depend
//! on the worker count or on which thresholds or detectors share a sweep.
//! Every detector sees the same streams.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{arl_lower_bound, predicted_cadd};
use crate::detect::{Detector, DetectorSpec};
use crate::error::{Error, Result};
use crate::model::{Regime, Sample, UnnormalizedPair};
use crate::scalar::{Real, RunningStats};

pub type TrialRng = ChaCha8Rng;

/// What a derived generator is used for. Distinct purposes never share a
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum SeedPurpose {
    ArlStream = 1,
    ArlDetector = 2,
    CaddStream = 3,
    CaddDetector = 4,
    Calibration = 5,
    Single = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master_seed: u64, purpose: SeedPurpose, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master_seed) ^ purpose as u64) ^ index)
}

pub fn derive_rng(master_seed: u64, purpose: SeedPurpose, index: u64) -> TrialRng {
    TrialRng::seed_from_u64(derive_seed(master_seed, purpose, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangePoint {
    /// First post-change index, 1-based.
    At(u64),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub change_point: ChangePoint,
    pub length: u64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            change_point: ChangePoint::At(500),
            length: 10_000,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::invalid("stream length must be positive"));
        }
        if let ChangePoint::At(nu) = self.change_point {
            if nu == 0 || nu > self.length {
                return Err(Error::invalid(format!(
                    "change point {nu} must lie in [1, {}]",
                    self.length
                )));
            }
        }
        Ok(())
    }
}

/// Lazily generated stream; sample `n` is post-change iff `n >= nu`.
pub struct StreamGen<'a, P: ?Sized> {
    pair: &'a P,
    change_point: ChangePoint,
    n: u64,
    rng: TrialRng,
}

impl<'a, P: ?Sized> StreamGen<'a, P> {
    pub fn new<T: Real>(pair: &'a P, change_point: ChangePoint, rng: TrialRng) -> Result<Self>
    where
        P: UnnormalizedPair<T>,
    {
        let caps = pair.capabilities();
        if !caps.exact_pre_sampler && change_point != ChangePoint::At(1) {
            return Err(Error::unsupported("pre-change sampling", pair.name()));
        }
        if !caps.exact_post_sampler && change_point != ChangePoint::Never {
            return Err(Error::unsupported("post-change sampling", pair.name()));
        }
        Ok(Self {
            pair,
            change_point,
            n: 0,
            rng,
        })
    }

    pub fn next_into<T: Real>(&mut self, out: &mut [T]) -> Result<()>
    where
        P: UnnormalizedPair<T>,
    {
        self.n += 1;
        let regime = match self.change_point {
            ChangePoint::At(nu) if self.n >= nu => Regime::Post,
            _ => Regime::Pre,
        };
        self.pair.draw_into(regime, &mut self.rng, out)
    }
}

/// Materialize the stream described by `spec`.
pub fn generate_stream<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    spec: &StreamSpec,
) -> Result<Vec<Sample<T>>> {
    spec.validate()?;
    let mut gen = StreamGen::new(pair, spec.change_point, TrialRng::seed_from_u64(spec.seed))?;
    (0..spec.length)
        .map(|_| {
            let mut x = vec![T::zero(); pair.dim()];
            gen.next_into(&mut x)?;
            Ok(Sample::new(x))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct HarnessConfig {
    pub trials: usize,
    pub master_seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Pre-change run cap; censored ARL runs contribute this length.
    pub arl_max_len: u64,
    /// `nu` for delay runs.
    pub change_point: u64,
    pub stream_len: u64,
    pub measure_arl: bool,
    pub measure_cadd: bool,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            trials: 500,
            master_seed: 42,
            threads: 0,
            arl_max_len: 100_000,
            change_point: 500,
            stream_len: 10_000,
            measure_arl: true,
            measure_cadd: true,
            cancel: None,
        }
    }
}

impl HarnessConfig {
    fn validate(&self) -> Result<()> {
        if self.trials < 2 {
            return Err(Error::invalid("Monte Carlo estimates need trials >= 2"));
        }
        if self.arl_max_len == 0 {
            return Err(Error::invalid("arl_max_len must be positive"));
        }
        StreamSpec {
            change_point: ChangePoint::At(self.change_point),
            length: self.stream_len,
            seed: 0,
        }
        .validate()
    }

    fn cancelled(&self) -> bool {
        self.cancel
            .as_ref()
            .is_some_and(|c| c.load(Ordering::Relaxed))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArlEstimate<T> {
    pub mean: T,
    pub std_error: T,
    pub censored: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaddEstimate<T> {
    pub mean: T,
    pub std_error: T,
    /// Trials with `tau < nu`, excluded from the mean.
    pub discarded: usize,
    /// Retained trials with no alarm by the end of the stream; they
    /// contribute `length - nu + 1`.
    pub censored: usize,
    pub trials: usize,
}

/// First crossing time of each ascending threshold along one path.
fn first_crossings<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    spec: &DetectorSpec<T>,
    pair: &P,
    ascending: &[T],
    max_len: u64,
    mut stream: StreamGen<'_, P>,
    mut rng: TrialRng,
    cfg: &HarnessConfig,
) -> Result<Vec<Option<u64>>> {
    let mut det = Detector::prepare(spec, pair, &mut rng)?;
    let mut out = vec![None; ascending.len()];
    let mut next = 0;
    let mut x = vec![T::zero(); pair.dim()];
    let mut state = det.initial_state();
    while next < ascending.len() && state.time < max_len {
        if state.time % 4096 == 0 && cfg.cancelled() {
            return Err(Error::Interrupted);
        }
        stream.next_into(&mut x)?;
        state = det.step(state, &x, &mut rng)?.0;
        while next < ascending.len() && state.statistic >= ascending[next] {
            out[next] = Some(state.time);
            next += 1;
        }
    }
    Ok(out)
}

/// Stop times per trial (outer) and per ascending threshold (inner).
fn run_trials<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    spec: &DetectorSpec<T>,
    pair: &P,
    ascending: &[T],
    cfg: &HarnessConfig,
    change_point: ChangePoint,
    max_len: u64,
    purposes: (SeedPurpose, SeedPurpose),
) -> Result<Vec<Vec<Option<u64>>>> {
    spec.check_capabilities(pair)?;
    cfg.pool()?.install(|| {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let stream = StreamGen::new(
                    pair,
                    change_point,
                    derive_rng(cfg.master_seed, purposes.0, t as u64),
                )?;
                let rng = derive_rng(cfg.master_seed, purposes.1, t as u64);
                first_crossings(spec, pair, ascending, max_len, stream, rng, cfg)
            })
            .collect()
    })
}

fn check_thresholds<T: Real>(thresholds: &[T]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::invalid("threshold list is empty"));
    }
    match thresholds
        .iter()
        .find(|b| !(**b > T::zero() && b.is_finite()))
    {
        Some(b) => Err(Error::invalid(format!(
            "threshold b={b} must be positive and finite"
        ))),
        None => Ok(()),
    }
}

fn sorted_order<T: Real>(thresholds: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut order: Vec<usize> = (0..thresholds.len()).collect();
    order.sort_by(|&a, &b| {
        thresholds[a]
            .partial_cmp(&thresholds[b])
            .expect("finite thresholds")
    });
    let ascending = order.iter().map(|&k| thresholds[k]).collect();
    (order, ascending)
}

fn arl_from<T: Real>(stops: &[Vec<Option<u64>>], column: usize, max_len: u64) -> ArlEstimate<T> {
    let mut stats = RunningStats::new();
    let mut censored = 0;
    for s in stops {
        let tau = s[column].unwrap_or_else(|| {
            censored += 1;
            max_len
        });
        stats.push(T::from_count(tau as usize));
    }
    ArlEstimate {
        mean: stats.mean(),
        std_error: stats.std_error(),
        censored,
        trials: stops.len(),
    }
}

fn cadd_from<T: Real>(
    stops: &[Vec<Option<u64>>],
    column: usize,
    nu: u64,
    length: u64,
) -> Result<CaddEstimate<T>> {
    let mut stats = RunningStats::new();
    let (mut discarded, mut censored) = (0, 0);
    for s in stops {
        let delay = match s[column] {
            Some(tau) if tau < nu => {
                discarded += 1;
                continue;
            }
            Some(tau) => tau - nu,
            None => {
                censored += 1;
                length - nu + 1
            }
        };
        stats.push(T::from_count(delay as usize));
    }
    if stats.count() == 0 {
        return Err(Error::EstimationFailed(format!(
            "all {} trials raised an alarm before the change point {nu}; use a larger threshold",
            stops.len()
        )));
    }
    Ok(CaddEstimate {
        mean: stats.mean(),
        std_error: if stats.count() > 1 {
            stats.std_error()
        } else {
            T::nan()
        },
        discarded,
        censored,
        trials: stops.len(),
    })
}

/// Mean stopping time over pre-change-only streams capped at
/// `cfg.arl_max_len`.
pub fn estimate_arl<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    spec: &DetectorSpec<T>,
    pair: &P,
    threshold_b: T,
    cfg: &HarnessConfig,
) -> Result<ArlEstimate<T>> {
    cfg.validate()?;
    check_thresholds(&[threshold_b])?;
    let stops = run_trials(
        spec,
        pair,
        &[threshold_b],
        cfg,
        ChangePoint::Never,
        cfg.arl_max_len,
        (SeedPurpose::ArlStream, SeedPurpose::ArlDetector),
    )?;
    Ok(arl_from(&stops, 0, cfg.arl_max_len))
}

/// Mean of `tau - nu` over trials with `tau >= nu`.
pub fn estimate_cadd<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    spec: &DetectorSpec<T>,
    pair: &P,
    threshold_b: T,
    cfg: &HarnessConfig,
) -> Result<CaddEstimate<T>> {
    cfg.validate()?;
    check_thresholds(&[threshold_b])?;
    let stops = run_trials(
        spec,
        pair,
        &[threshold_b],
        cfg,
        ChangePoint::At(cfg.change_point),
        cfg.stream_len,
        (SeedPurpose::CaddStream, SeedPurpose::CaddDetector),
    )?;
    cadd_from(&stops, 0, cfg.change_point, cfg.stream_len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDetector<T> {
    pub id: String,
    pub spec: DetectorSpec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow<T> {
    pub detector: String,
    pub threshold_b: T,
    pub arl_mean: Option<T>,
    pub arl_se: Option<T>,
    pub cadd_mean: Option<T>,
    pub cadd_se: Option<T>,
    pub trials: usize,
    /// Trials censored in the ARL run or the delay run.
    pub censored: usize,
    pub discarded: usize,
    pub predicted_cadd: Option<T>,
    pub arl_bound: Option<T>,
}

/// One row per (detector, threshold), in input order. All thresholds of a
/// detector share one pass over each trial's stream; `on_row` sees each
/// row as soon as its detector finishes.
pub fn sweep<T: Real, P: UnnormalizedPair<T> + ?Sized>(
    pair: &P,
    detectors: &[NamedDetector<T>],
    thresholds: &[T],
    kl: Option<T>,
    cfg: &HarnessConfig,
    mut on_row: impl FnMut(&SweepRow<T>) -> Result<()>,
) -> Result<Vec<SweepRow<T>>> {
    cfg.validate()?;
    if detectors.is_empty() {
        return Err(Error::invalid("detector list is empty"));
    }
    check_thresholds(thresholds)?;
    for (k, d) in detectors.iter().enumerate() {
        if detectors[..k].iter().any(|e| e.id == d.id) {
            return Err(Error::invalid(format!("duplicate detector id `{}`", d.id)));
        }
        d.spec.check_capabilities(pair)?;
    }
    let (order, ascending) = sorted_order(thresholds);
    let mut rows = Vec::with_capacity(detectors.len() * thresholds.len());
    for d in detectors {
        let arl_stops = if cfg.measure_arl {
            Some(run_trials(
                &d.spec,
                pair,
                &ascending,
                cfg,
                ChangePoint::Never,
                cfg.arl_max_len,
                (SeedPurpose::ArlStream, SeedPurpose::ArlDetector),
            )?)
        } else {
            None
        };
        let cadd_stops = if cfg.measure_cadd {
            Some(run_trials(
                &d.spec,
                pair,
                &ascending,
                cfg,
                ChangePoint::At(cfg.change_point),
                cfg.stream_len,
                (SeedPurpose::CaddStream, SeedPurpose::CaddDetector),
            )?)
        } else {
            None
        };
        let mut by_input = vec![None; thresholds.len()];
        for (col, &input_idx) in order.iter().enumerate() {
            let b = ascending[col];
            let arl = arl_stops
                .as_ref()
                .map(|s| arl_from::<T>(s, col, cfg.arl_max_len));
            let cadd = match &cadd_stops {
                Some(s) => Some(cadd_from::<T>(s, col, cfg.change_point, cfg.stream_len)?),
                None => None,
            };
            let censored = (0..cfg.trials)
                .filter(|&t| {
                    arl_stops.as_ref().is_some_and(|s| s[t][col].is_none())
                        || cadd_stops.as_ref().is_some_and(|s| s[t][col].is_none())
                })
                .count();
            let predicted = match (d.spec.gamma(), kl) {
                (Some(g), Some(kl)) => predicted_cadd(b, g, kl).ok(),
                _ => None,
            };
            by_input[input_idx] = Some(SweepRow {
                detector: d.id.clone(),
                threshold_b: b,
                arl_mean: arl.map(|a| a.mean),
                arl_se: arl.map(|a| a.std_error),
                cadd_mean: cadd.map(|c| c.mean),
                cadd_se: cadd.map(|c| c.std_error),
                trials: cfg.trials,
                censored,
                discarded: cadd.map_or(0, |c| c.discarded),
                predicted_cadd: predicted,
                arl_bound: d.spec.has_arl_guarantee().then(|| arl_lower_bound(b)),
            });
        }
        for row in by_input.into_iter().flatten() {
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 11] = [
    "detector",
    "threshold_b",
    "arl_mean",
    "arl_se",
    "cadd_mean",
    "cadd_se",
    "trials",
    "censored",
    "discarded",
    "predicted_cadd",
    "arl_bound",
];

pub const TRUNCATION_MARKER: &str = "# truncated: run interrupted before completion";

/// Sweep CSV with leading `#` comment lines. Rows are flushed as written so
/// an interrupted sweep leaves a readable prefix.
pub struct SweepCsvWriter<W: Write> {
    out: W,
    log10: bool,
}

fn opt<T: Real>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl<W: Write> SweepCsvWriter<W> {
    pub fn new(mut out: W, comments: &[String], log10: bool) -> Result<Self> {
        for c in comments {
            for line in c.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut header = SWEEP_HEADER.join(",");
        if log10 {
            header.push_str(",log10_arl_mean,log10_cadd_mean");
        }
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out, log10 })
    }

    pub fn write_row<T: Real>(&mut self, r: &SweepRow<T>) -> Result<()> {
        let mut rec = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        let mut fields = vec![
            r.detector.clone(),
            r.threshold_b.to_string(),
            opt(r.arl_mean),
            opt(r.arl_se),
            opt(r.cadd_mean),
            opt(r.cadd_se),
            r.trials.to_string(),
            r.censored.to_string(),
            r.discarded.to_string(),
            opt(r.predicted_cadd),
            opt(r.arl_bound),
        ];
        if self.log10 {
            fields.push(opt(r.arl_mean.map(|v| v.log10())));
            fields.push(opt(r.cadd_mean.map(|v| v.log10())));
        }
        rec.write_record(&fields)?;
        let bytes = rec.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.out.write_all(&bytes)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn mark_truncated(&mut self) -> Result<()> {
        writeln!(self.out, "{TRUNCATION_MARKER}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn write_sweep_csv<T: Real, W: Write>(
    rows: &[SweepRow<T>],
    out: W,
    comments: &[String],
    log10: bool,
) -> Result<W> {
    let mut w = SweepCsvWriter::new(out, comments, log10)?;
    for r in rows {
        w.write_row(r)?;
    }
    Ok(w.into_inner())
}
