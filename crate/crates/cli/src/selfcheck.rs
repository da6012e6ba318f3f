//! Fast internal consistency checks on a model pair.

use lpa_cusum::model::analytic_log_z_ratio;
use lpa_cusum::partition::estimate_oracle_variance;
use lpa_cusum::{
    calibrate, derive_rng, generate_stream, CalibrationInputs, ChangePoint, Detector, DetectorSpec,
    LpaConfig, OracleMode, SeedPurpose, StreamSpec, UnnormalizedPair,
};

/// Standard errors tolerated between the oracle mean and the exact value.
pub const Z_TOLERANCE: f64 = 3.0;
const CONDITION_I: usize = 100;
const CONDITION_DRAWS: usize = 20_000;
const EQUIVALENCE_STEPS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: String, passed: bool, detail: String) -> Self {
        let status = if passed { Status::Pass } else { Status::Fail };
        Self {
            name,
            status,
            detail,
        }
    }

    fn skip(name: String, why: &str) -> Self {
        Self {
            name,
            status: Status::Skip,
            detail: why.to_string(),
        }
    }

    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        format!("[{tag}] {}: {}", self.name, self.detail)
    }
}

/// Runs every applicable check on `pair`. `index` separates seed streams
/// between pairs checked in one invocation.
pub fn check_pair<P: UnnormalizedPair<f64> + ?Sized>(
    pair: &P,
    master_seed: u64,
    index: u64,
    draws: usize,
) -> lpa_cusum::Result<Vec<CheckOutcome>> {
    let name = pair.name().to_string();
    let caps = pair.capabilities();
    let mut out = Vec::new();
    let label = |what: &str| format!("{what} ({name})");
    let truth = analytic_log_z_ratio(pair);

    if caps.exact_path_sampler {
        let mut rng = derive_rng(master_seed, SeedPurpose::Single, 4 * index);
        let rep = estimate_oracle_variance(pair, &OracleMode::ExactPath, draws, &mut rng)?;
        match truth {
            Some(t) => {
                let z = (rep.sample_mean - t) / rep.std_error;
                out.push(CheckOutcome::new(
                    label("oracle unbiased"),
                    z.abs() <= Z_TOLERANCE,
                    format!(
                        "mean {:.6} vs exact {t:.6}, z = {z:.2} over {draws} draws",
                        rep.sample_mean
                    ),
                ));
            }
            None => out.push(CheckOutcome::skip(
                label("oracle unbiased"),
                "no closed-form log partition ratio",
            )),
        }
        match rep.variance_bound {
            Some(b) => out.push(CheckOutcome::new(
                label("variance bound"),
                rep.sample_variance <= b,
                format!("sample variance {:.5} <= bound {b:.5}", rep.sample_variance),
            )),
            None => out.push(CheckOutcome::skip(
                label("variance bound"),
                "no closed-form KL divergences",
            )),
        }
    } else {
        out.push(CheckOutcome::skip(
            label("oracle unbiased"),
            "no exact path sampler",
        ));
        out.push(CheckOutcome::skip(
            label("variance bound"),
            "no exact path sampler",
        ));
    }

    if caps.exact_path_sampler
        && caps.exact_pre_sampler
        && (caps.analytic_kl || caps.exact_post_sampler)
    {
        let mut inputs = CalibrationInputs::new(CONDITION_I, OracleMode::ExactPath);
        inputs.check_draws = CONDITION_DRAWS;
        let mut rng = derive_rng(master_seed, SeedPurpose::Single, 4 * index + 1);
        let cal = calibrate(pair, &inputs, &mut rng)?;
        let c = &cal.condition_check;
        out.push(CheckOutcome::new(
            label("gamma condition"),
            c.passed,
            format!(
                "gamma0 = {:.5} at i = {CONDITION_I}: moment {:.5} +/- {:.5}",
                cal.gamma0, c.estimate, c.std_error
            ),
        ));
    } else {
        out.push(CheckOutcome::skip(
            label("gamma condition"),
            "needs exact path and pre-change sampling",
        ));
    }

    match truth {
        Some(value) if caps.exact_pre_sampler && caps.exact_post_sampler => {
            let stream = generate_stream(
                pair,
                &StreamSpec {
                    change_point: ChangePoint::At(EQUIVALENCE_STEPS / 2),
                    length: EQUIVALENCE_STEPS,
                    seed: lpa_cusum::derive_seed(master_seed, SeedPurpose::Single, 4 * index + 2),
                },
            )?;
            let mut rng = derive_rng(master_seed, SeedPurpose::Single, 4 * index + 3);
            let lpa = DetectorSpec::Lpa(LpaConfig::new(1.0, 1, OracleMode::Constant { value })?);
            let mut a = Detector::prepare(&DetectorSpec::Cusum, pair, &mut rng)?;
            let mut b = Detector::prepare(&lpa, pair, &mut rng)?;
            let mut mismatch = None;
            for (n, x) in stream.iter().enumerate() {
                let (u, v) = (
                    a.increment(x.values(), &mut rng)?,
                    b.increment(x.values(), &mut rng)?,
                );
                if u.to_bits() != v.to_bits() {
                    mismatch = Some((n + 1, u, v));
                    break;
                }
            }
            out.push(match mismatch {
                None => CheckOutcome::new(
                    label("cusum equivalence"),
                    true,
                    format!("{EQUIVALENCE_STEPS} increments bitwise identical"),
                ),
                Some((n, u, v)) => CheckOutcome::new(
                    label("cusum equivalence"),
                    false,
                    format!("step {n}: cusum {u} vs lpa {v}"),
                ),
            });
        }
        _ => out.push(CheckOutcome::skip(
            label("cusum equivalence"),
            "needs a closed-form log partition ratio and both samplers",
        )),
    }
    Ok(out)
}
