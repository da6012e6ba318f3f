//! End-to-end acceptance checks. Prints one PASS/FAIL line per check and
//! exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use lpa_cusum::calibrate::{check_jensen_contraction, scusum_delta};
use lpa_cusum::detect::{cusum_step, lpa_step};
use lpa_cusum::model::{analytic_kl, analytic_log_z_ratio, log_weight};
use lpa_cusum::partition::{naive_estimator_1, naive_estimator_2, pair_variance_bound};
use lpa_cusum::*;

const MASTER_SEED: u64 = 42;

type Outcome = std::result::Result<(bool, String), Error>;

fn rng(check: u64) -> harness::TrialRng {
    derive_rng(MASTER_SEED, SeedPurpose::Single, check)
}

fn boltzmann() -> Boltzmann64 {
    BoltzmannPair::default_pair()
}

fn mvn10() -> Gaussian64 {
    GaussianPair::mvn10()
}

fn mean_se(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let s: RunningStats<f64> = values.into_iter().collect();
    (s.mean(), s.std_error())
}

fn oracle_draws<P: UnnormalizedPair<f64>>(pair: &P, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut o = Oracle::new(pair, OracleMode::ExactPath)?;
    let mut r = rng(seed);
    (0..n).map(|_| o.draw(&mut r).map(|d| d.value)).collect()
}

fn unbiasedness() -> Outcome {
    let mut ok = true;
    let mut msg = Vec::new();
    for (name, draws, target) in [
        (
            "boltzmann",
            oracle_draws(&boltzmann(), 100_000, 11)?,
            analytic_log_z_ratio(&boltzmann()).unwrap(),
        ),
        (
            "mvn10",
            oracle_draws(&mvn10(), 100_000, 12)?,
            analytic_log_z_ratio(&mvn10()).unwrap(),
        ),
    ] {
        let (m, se) = mean_se(draws);
        let pass = (m - target).abs() <= 3.0 * se;
        ok &= pass;
        msg.push(format!(
            "{name}: mean={m:.6} target={target:.6} |z|={:.2}",
            (m - target).abs() / se
        ));
    }
    Ok((ok, msg.join("; ")))
}

fn variance_bound() -> Outcome {
    let mut ok = true;
    let mut msg = Vec::new();
    for (name, draws, bound) in [
        (
            "boltzmann",
            oracle_draws(&boltzmann(), 100_000, 11)?,
            pair_variance_bound(&boltzmann()).unwrap(),
        ),
        (
            "mvn10",
            oracle_draws(&mvn10(), 100_000, 12)?,
            pair_variance_bound(&mvn10()).unwrap(),
        ),
    ] {
        let s: RunningStats<f64> = draws.into_iter().collect();
        ok &= s.variance() <= bound;
        msg.push(format!("{name}: var={:.5} bound={bound:.4}", s.variance()));
    }
    Ok((ok, msg.join("; ")))
}

fn naive_bias() -> Outcome {
    let p = boltzmann();
    let target = analytic_log_z_ratio(&p).unwrap();
    let (reps, n_mc) = (10_000, 10);
    let mut r1 = rng(31);
    let n1 = (0..reps)
        .map(|_| naive_estimator_1(&p, n_mc, &mut r1))
        .collect::<Result<Vec<_>>>()?;
    let mut r2 = rng(32);
    let n2 = (0..reps)
        .map(|_| naive_estimator_2(&p, n_mc, &mut r2))
        .collect::<Result<Vec<_>>>()?;
    let mut o = Oracle::new(&p, OracleMode::ExactPath)?;
    let mut r3 = rng(33);
    let ti = (0..reps)
        .map(|_| o.batch_mean(n_mc, &mut r3))
        .collect::<Result<Vec<_>>>()?;
    let z = |v: Vec<f64>| {
        let (m, se) = mean_se(v);
        (m, (m - target) / se)
    };
    let ((m1, z1), (m2, z2), (mt, zt)) = (z(n1), z(n2), z(ti));
    let ok = z1.abs() > 3.0 && z2.abs() > 3.0 && zt.abs() <= 3.0;
    Ok((
        ok,
        format!("naive1 mean={m1:.5} z={z1:.2}; naive2 mean={m2:.5} z={z2:.2}; TI mean={mt:.5} z={zt:.2}"),
    ))
}

fn boltzmann_calibration(i: usize, check_draws: usize, seed: u64) -> Result<CalibrationResult64> {
    let inputs = CalibrationInputs {
        check_draws,
        ..CalibrationInputs::new(i, OracleMode::ExactPath)
    };
    calibrate(&boltzmann(), &inputs, &mut rng(seed))
}

fn gamma_condition() -> Outcome {
    let p = boltzmann();
    let cal = boltzmann_calibration(100, 100_000, 41)?;
    let c = &cal.condition_check;
    let mut ok = c.passed;
    let mut msg = vec![format!(
        "gamma0={:.5} sigma2={:.5} moment={:.5}±{:.5}",
        cal.gamma0, cal.sigma2_hat, c.estimate, c.std_error
    )];
    for (k, i) in [2usize, 10, 100].into_iter().enumerate() {
        let j = check_jensen_contraction(
            &p,
            cal.gamma0,
            i,
            &OracleMode::ExactPath,
            100_000,
            &mut rng(42 + k as u64),
        )?;
        ok &= j.passed;
        msg.push(format!(
            "jensen i={i}: {:.5} vs {:.5}",
            j.batch_moment, j.single_moment
        ));
    }
    Ok((ok, msg.join("; ")))
}

fn arl_bound() -> Outcome {
    let p = boltzmann();
    let cal = boltzmann_calibration(100, 10_000, 51)?;
    let spec = DetectorSpec::Lpa(LpaConfig::new(cal.gamma0, 100, OracleMode::ExactPath)?);
    let b = 200f64.ln();
    let cfg = HarnessConfig {
        trials: 500,
        master_seed: MASTER_SEED,
        ..HarnessConfig::default()
    };
    let a = estimate_arl(&spec, &p, b, &cfg)?;
    Ok((
        a.mean >= 200.0,
        format!(
            "gamma0={:.5} ARL={:.1}±{:.1} censored={}/{}",
            cal.gamma0, a.mean, a.std_error, a.censored, a.trials
        ),
    ))
}

fn mvn10_gamma(i: usize, seed: u64) -> Result<f64> {
    let inputs = CalibrationInputs {
        check_draws: 200,
        ..CalibrationInputs::new(i, OracleMode::ExactPath)
    };
    Ok(calibrate(&mvn10(), &inputs, &mut rng(seed))?.gamma0)
}

fn delay_cfg() -> HarnessConfig {
    HarnessConfig {
        trials: 500,
        master_seed: MASTER_SEED,
        change_point: 1,
        stream_len: 1_000,
        measure_arl: false,
        ..HarnessConfig::default()
    }
}

fn cadd_asymptotics() -> Outcome {
    let p = mvn10();
    let kl = analytic_kl(&p, KlDirection::PostVsPre).unwrap();
    let gamma = mvn10_gamma(1000, 61)?;
    let detectors = [
        NamedDetector {
            id: "cusum".into(),
            spec: DetectorSpec::Cusum,
        },
        NamedDetector {
            id: "lpa".into(),
            spec: DetectorSpec::Lpa(LpaConfig::new(gamma, 1000, OracleMode::ExactPath)?),
        },
    ];
    let rows = sweep(
        &p,
        &detectors,
        &[6.0, 8.0, 10.0],
        Some(kl),
        &delay_cfg(),
        |_| Ok(()),
    )?;
    let mut ok = true;
    let mut msg = vec![format!("gamma0={gamma:.5}")];
    for d in &detectors {
        let ratios: Vec<f64> = rows
            .iter()
            .filter(|r| r.detector == d.id)
            .map(|r| r.cadd_mean.unwrap() / r.predicted_cadd.unwrap())
            .collect();
        let approaching = ratios
            .windows(2)
            .all(|w| (w[1] - 1.0).abs() <= (w[0] - 1.0).abs());
        let last = *ratios.last().unwrap();
        ok &= approaching && (0.8..=1.2).contains(&last);
        msg.push(format!(
            "{}: ratios {}",
            d.id,
            ratios
                .iter()
                .map(|r| format!("{r:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    Ok((ok, msg.join("; ")))
}

fn equivalence() -> Outcome {
    fn check<P: UnnormalizedPair<f64>>(p: &P, seed: u64) -> Result<bool> {
        let lz = analytic_log_z_ratio(p).unwrap();
        let stream = generate_stream(
            p,
            &StreamSpec {
                change_point: ChangePoint::At(5_000),
                length: 10_000,
                seed,
            },
        )?;
        let cfg = LpaConfig::new(1.0, 1, OracleMode::Constant { value: lz })?;
        let mut r = rng(seed);
        let mut c = DetectorState::new(DetectorKind::Cusum);
        let mut l = DetectorState::new(DetectorKind::Lpa);
        for x in &stream {
            c = cusum_step(c, log_weight(p, x.values())? + lz)?;
            l = lpa_step(l, x, p, &cfg, &mut r)?;
            if c.statistic.to_bits() != l.statistic.to_bits() || c.time != l.time {
                return Ok(false);
            }
        }
        Ok(true)
    }
    let (b, g) = (check(&boltzmann(), 71)?, check(&mvn10(), 72)?);
    Ok((
        b && g,
        format!("boltzmann identical={b}; mvn10 identical={g} over 10000 steps"),
    ))
}

fn lpa_approaches_cusum() -> Outcome {
    let p = mvn10();
    let kl = analytic_kl(&p, KlDirection::PostVsPre).unwrap();
    let mut detectors = vec![NamedDetector {
        id: "cusum".to_string(),
        spec: DetectorSpec::Cusum,
    }];
    let mut gammas = Vec::new();
    for (k, i) in [10usize, 100, 1000].into_iter().enumerate() {
        let g = mvn10_gamma(i, 81 + k as u64)?;
        gammas.push(format!("i={i}:{g:.4}"));
        detectors.push(NamedDetector {
            id: format!("lpa_i{i}"),
            spec: DetectorSpec::Lpa(LpaConfig::new(g, i, OracleMode::ExactPath)?),
        });
    }
    let rows = sweep(
        &p,
        &detectors,
        &[1000f64.ln()],
        Some(kl),
        &delay_cfg(),
        |_| Ok(()),
    )?;
    let cadd: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.cadd_mean.unwrap(), r.cadd_se.unwrap()))
        .collect();
    let ratio = cadd[3].0 / cadd[0].0;
    let monotone = cadd[1..]
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 + 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    Ok((
        ratio <= 1.15 && monotone,
        format!(
            "gamma0 {}; CADD cusum={:.3} i10={:.3} i100={:.3} i1000={:.3}; ratio={ratio:.4}",
            gammas.join(" "),
            cadd[0].0,
            cadd[1].0,
            cadd[2].0,
            cadd[3].0
        ),
    ))
}

fn scusum_degeneracy() -> Outcome {
    let p = boltzmann();
    let mut det = Detector::prepare(&DetectorSpec::Scusum { delta: 1.0 }, &p, &mut rng(91))?;
    let mut first: Option<u64> = None;
    let mut all_equal = true;
    let mut variances = Vec::new();
    for (k, cp) in [ChangePoint::Never, ChangePoint::At(1), ChangePoint::At(500)]
        .into_iter()
        .enumerate()
    {
        let stream = generate_stream(
            &p,
            &StreamSpec {
                change_point: cp,
                length: 10_000,
                seed: 92 + k as u64,
            },
        )?;
        let mut s = RunningStats::new();
        for x in &stream {
            let inc = det.increment(x.values(), &mut rng(0))?;
            all_equal &= *first.get_or_insert(inc.to_bits()) == inc.to_bits();
            s.push(inc);
        }
        variances.push(s.variance());
    }
    let delta = scusum_delta(&p, 10_000, &mut rng(95))?;
    let ok = variances.iter().all(|v| *v == 0.0) && all_equal && !delta.feasible;
    Ok((
        ok,
        format!(
            "increment={} variances={variances:?} same under both regimes={all_equal}; calibrated delta={} ({})",
            f64::from_bits(first.unwrap_or(0)),
            delta.delta,
            delta.diagnostic.as_deref().unwrap_or("feasible")
        ),
    ))
}

fn determinism() -> Outcome {
    let p = boltzmann();
    let lz = analytic_log_z_ratio(&p).unwrap();
    let detectors = vec![
        NamedDetector {
            id: "cusum".to_string(),
            spec: DetectorSpec::Cusum,
        },
        NamedDetector {
            id: "lpa".to_string(),
            spec: DetectorSpec::Lpa(LpaConfig::new(0.95, 10, OracleMode::ExactPath)?),
        },
        NamedDetector {
            id: "lpa_is".to_string(),
            spec: DetectorSpec::Lpa(LpaConfig::new(0.95, 2, OracleMode::Importance { k: 16 })?),
        },
        NamedDetector {
            id: "naive1".to_string(),
            spec: DetectorSpec::Naive {
                estimator: NaiveKind::Integral,
                budget: 100,
            },
        },
        NamedDetector {
            id: "naive2".to_string(),
            spec: DetectorSpec::Naive {
                estimator: NaiveKind::Ratio,
                budget: 100,
            },
        },
    ];
    let run = |threads: usize| -> Result<Vec<u8>> {
        let cfg = HarnessConfig {
            trials: 64,
            master_seed: MASTER_SEED,
            threads,
            arl_max_len: 20_000,
            change_point: 100,
            stream_len: 3_000,
            ..HarnessConfig::default()
        };
        let rows = sweep(
            &p,
            &detectors,
            &[4.0, 2.0, 6.0],
            analytic_kl(&p, KlDirection::PostVsPre),
            &cfg,
            |_| Ok(()),
        )?;
        write_sweep_csv(
            &rows,
            Vec::new(),
            &[
                format!("master_seed: {MASTER_SEED}"),
                format!("log_z_ratio: {lz}"),
            ],
            true,
        )
    };
    let (one, eight) = (run(1)?, run(8)?);
    Ok((
        one == eight,
        format!(
            "{} bytes at 1 worker, identical at 8 workers: {}",
            one.len(),
            one == eight
        ),
    ))
}

fn main() -> ExitCode {
    type Check = (&'static str, fn() -> Outcome);
    let checks: [Check; 10] = [
        ("partition oracle unbiased", unbiasedness),
        ("oracle variance within bound", variance_bound),
        ("naive estimators biased, oracle not", naive_bias),
        (
            "exponential-moment condition at calibrated gamma",
            gamma_condition,
        ),
        ("ARL at least e^b", arl_bound),
        ("delay approaches first-order prediction", cadd_asymptotics),
        ("LPA with exact constant equals CUSUM bitwise", equivalence),
        (
            "LPA delay approaches CUSUM as i grows",
            lpa_approaches_cusum,
        ),
        ("SCUSUM increments constant on Boltzmann", scusum_degeneracy),
        ("sweep CSV independent of worker count", determinism),
    ];
    let mut failed = 0;
    for (k, (name, f)) in checks.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] {:>2} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            k + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
