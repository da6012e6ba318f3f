//! Model and estimator checks against references computed independently
//! in this file: quadrature, finite differences and a separate dense
//! linear-algebra path for the Gaussian pair.

use lpa_cusum::calibrate::{check_gamma_condition, estimate_kl, scusum_delta};
use lpa_cusum::model::{analytic_kl, analytic_log_z_ratio, log_weight, sample_path};
use lpa_cusum::partition::estimate_oracle_variance;
use lpa_cusum::{
    calibrate, derive_rng, estimate_cadd, run_detector, sweep, BoltzmannPair, CalibrationInputs,
    DetectorSpec, GaussianPair, HarnessConfig, KlDirection, LpaConfig, MetropolisConfig,
    NamedDetector, OracleMode, Regime, RunningStats, SeedPurpose, UnnormalizedPair,
};

fn rng(k: u64) -> lpa_cusum::harness::TrialRng {
    derive_rng(2024, SeedPurpose::Single, k)
}

// Frozen from the dense reference below.
const MVN10_KL_POST_PRE: f64 = 1.893690482797661;
const MVN10_LOG_Z_RATIO: f64 = -0.9457776261539086;
const BOLTZMANN_LOG_Z_RATIO: f64 = -0.1823215567939546;
const BOLTZMANN_KL_POST_PRE: f64 = 0.01767844320604528;

/// Composite Simpson on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

const UPPER: f64 = 80.0;
const N_QUAD: usize = 200_000;

fn boltzmann_log_z(pair: &BoltzmannPair<f64>, beta: f64) -> f64 {
    simpson(
        |x| {
            let l = (1.0 - beta) * pair.log_density(Regime::Pre, &[x])
                + beta * pair.log_density(Regime::Post, &[x]);
            l.exp()
        },
        0.0,
        UPPER,
        N_QUAD,
    )
    .ln()
}

fn boltzmann_path_mean_lw(pair: &BoltzmannPair<f64>, beta: f64) -> f64 {
    let z = boltzmann_log_z(pair, beta).exp();
    simpson(
        |x| {
            let l = (1.0 - beta) * pair.log_density(Regime::Pre, &[x])
                + beta * pair.log_density(Regime::Post, &[x]);
            log_weight(pair, &[x]).unwrap() * l.exp()
        },
        0.0,
        UPPER,
        N_QUAD,
    ) / z
}

#[test]
fn boltzmann_closed_forms_match_quadrature() {
    let pair = BoltzmannPair::default_pair();
    let lz0 = boltzmann_log_z(&pair, 0.0);
    let lz1 = boltzmann_log_z(&pair, 1.0);
    assert!((lz0 - lz1 - BOLTZMANN_LOG_Z_RATIO).abs() < 1e-10);
    let lz: f64 = analytic_log_z_ratio(&pair).unwrap();
    assert!((lz - BOLTZMANN_LOG_Z_RATIO).abs() < 1e-14);

    let kl = |from: Regime, to: Regime, lz_from: f64, lz_to: f64| {
        simpson(
            |x| {
                let lf = pair.log_density(from, &[x]) - lz_from;
                let lt = pair.log_density(to, &[x]) - lz_to;
                lf.exp() * (lf - lt)
            },
            0.0,
            UPPER,
            N_QUAD,
        )
    };
    let post_pre = kl(Regime::Post, Regime::Pre, lz1, lz0);
    let pre_post = kl(Regime::Pre, Regime::Post, lz0, lz1);
    assert!((post_pre - BOLTZMANN_KL_POST_PRE).abs() < 1e-10);
    assert!((analytic_kl(&pair, KlDirection::PostVsPre).unwrap() - post_pre).abs() < 1e-10);
    assert!((analytic_kl(&pair, KlDirection::PreVsPost).unwrap() - pre_post).abs() < 1e-10);
}

#[test]
fn path_derivative_of_log_normalizer_is_mean_log_weight() {
    let pair = BoltzmannPair::default_pair();
    let h = 1e-5;
    for beta in [0.1, 0.5, 0.9] {
        let fd = (boltzmann_log_z(&pair, beta + h) - boltzmann_log_z(&pair, beta - h)) / (2.0 * h);
        let quad = boltzmann_path_mean_lw(&pair, beta);
        assert!(
            ((fd - quad) / quad).abs() < 1e-6,
            "beta={beta}: fd {fd} vs {quad}"
        );
        let closed = (1.0 / pair.t_pre() - 1.0 / pair.t_post()) / pair.path_rate(beta);
        assert!(((closed - quad) / quad).abs() < 1e-9);
    }
}

#[test]
fn boltzmann_path_sampler_mean() {
    let pair = BoltzmannPair::default_pair();
    let mut r = rng(1);
    let mut s = RunningStats::<f64>::new();
    for _ in 0..100_000 {
        s.push(sample_path(&pair, 0.5, &mut r).unwrap().values()[0]);
    }
    let expected = 12.0 / 11.0;
    assert!(
        (s.mean() - expected).abs() <= 4.0 * s.std_error(),
        "{} vs {expected}",
        s.mean()
    );
}

/// Dense reference for Gaussian quantities, written without the crate's
/// Cholesky code.
mod dense {
    pub type M = Vec<Vec<f64>>;

    /// Gauss-Jordan with partial pivoting; returns (inverse, log |det|).
    pub fn inverse_log_det(a: &M) -> (M, f64) {
        let n = a.len();
        let mut m: M = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        let mut log_det = 0.0;
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
                .unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            log_det += piv.abs().ln();
            for v in m[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    if f != 0.0 {
                        let pivot_row = m[c].clone();
                        for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                            *v -= f * p;
                        }
                    }
                }
            }
        }
        (m.into_iter().map(|r| r[n..].to_vec()).collect(), log_det)
    }

    pub fn mat_vec(a: &M, v: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum())
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn lin(a: &M, s: f64, b: &M, t: f64) -> M {
        a.iter()
            .zip(b)
            .map(|(r, q)| r.iter().zip(q).map(|(x, y)| s * x + t * y).collect())
            .collect()
    }
}

struct GaussRef {
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    s0: dense::M,
    s1: dense::M,
}

impl GaussRef {
    fn mvn10() -> Self {
        use lpa_cusum::model::{MVN10_SIGMA_POST, MVN10_SIGMA_PRE};
        Self {
            mu0: vec![0.0; 10],
            mu1: vec![1.0; 10],
            s0: MVN10_SIGMA_PRE.iter().map(|r| r.to_vec()).collect(),
            s1: MVN10_SIGMA_POST.iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// `log Z_beta` of `exp(-(1-beta) q0(x)/2 - beta q1(x)/2)`.
    fn log_z(&self, beta: f64) -> f64 {
        let d = self.mu0.len() as f64;
        let (p0, _) = dense::inverse_log_det(&self.s0);
        let (p1, _) = dense::inverse_log_det(&self.s1);
        let pb = dense::lin(&p0, 1.0 - beta, &p1, beta);
        let h0 = dense::mat_vec(&p0, &self.mu0);
        let h1 = dense::mat_vec(&p1, &self.mu1);
        let h: Vec<f64> = h0
            .iter()
            .zip(&h1)
            .map(|(a, b)| (1.0 - beta) * a + beta * b)
            .collect();
        let c = (1.0 - beta) * dense::dot(&self.mu0, &h0) + beta * dense::dot(&self.mu1, &h1);
        let (sb, log_det_p) = dense::inverse_log_det(&pb);
        0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det_p
            + 0.5 * dense::dot(&h, &dense::mat_vec(&sb, &h))
            - 0.5 * c
    }

    fn path_mean(&self, beta: f64) -> Vec<f64> {
        let (p0, _) = dense::inverse_log_det(&self.s0);
        let (p1, _) = dense::inverse_log_det(&self.s1);
        let (sb, _) = dense::inverse_log_det(&dense::lin(&p0, 1.0 - beta, &p1, beta));
        let h: Vec<f64> = dense::mat_vec(&p0, &self.mu0)
            .iter()
            .zip(dense::mat_vec(&p1, &self.mu1))
            .map(|(a, b)| (1.0 - beta) * a + beta * b)
            .collect();
        dense::mat_vec(&sb, &h)
    }

    fn kl_post_pre(&self) -> f64 {
        let d = self.mu0.len() as f64;
        let (p0, ld0) = dense::inverse_log_det(&self.s0);
        let (_, ld1) = dense::inverse_log_det(&self.s1);
        let tr: f64 = (0..self.s0.len())
            .map(|i| dense::dot(&p0[i], &self.s1.iter().map(|r| r[i]).collect::<Vec<_>>()))
            .sum();
        let dm: Vec<f64> = self.mu1.iter().zip(&self.mu0).map(|(a, b)| a - b).collect();
        0.5 * (tr + dense::dot(&dm, &dense::mat_vec(&p0, &dm)) - d + ld0 - ld1)
    }
}

#[test]
fn mvn10_closed_forms_match_dense_reference() {
    let g = GaussRef::mvn10();
    let pair = GaussianPair::<f64>::mvn10();
    assert!((g.kl_post_pre() - MVN10_KL_POST_PRE).abs() < 1e-10);
    assert!((g.log_z(0.0) - g.log_z(1.0) - MVN10_LOG_Z_RATIO).abs() < 1e-10);
    assert!(
        (analytic_kl(&pair, KlDirection::PostVsPre).unwrap() - MVN10_KL_POST_PRE).abs() < 1e-10
    );
    assert!((analytic_log_z_ratio(&pair).unwrap() - MVN10_LOG_Z_RATIO).abs() < 1e-10);
    for beta in [0.25, 0.7] {
        let (mean, _) = pair.path_moments(beta).unwrap();
        for (a, b) in mean.iter().zip(g.path_mean(beta)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn mvn10_path_draws_match_reference_moments_and_derivative() {
    let g = GaussRef::mvn10();
    let pair = GaussianPair::<f64>::mvn10();
    let beta = 0.4;
    let n = 40_000;
    let mut r = rng(2);
    let mut coords: Vec<RunningStats<f64>> = (0..10).map(|_| RunningStats::new()).collect();
    let mut lw = RunningStats::new();
    for _ in 0..n {
        let x = sample_path(&pair, beta, &mut r).unwrap();
        for (s, v) in coords.iter_mut().zip(x.values()) {
            s.push(*v);
        }
        lw.push(log_weight(&pair, x.values()).unwrap());
    }
    for (s, m) in coords.iter().zip(g.path_mean(beta)) {
        assert!(
            (s.mean() - m).abs() <= 4.5 * s.std_error(),
            "{} vs {m}",
            s.mean()
        );
    }
    let h = 1e-5;
    let fd = (g.log_z(beta + h) - g.log_z(beta - h)) / (2.0 * h);
    assert!(
        (lw.mean() - fd).abs() <= 4.0 * lw.std_error(),
        "{} vs {fd}",
        lw.mean()
    );
}

#[test]
fn importance_and_metropolis_oracles_are_close() {
    let pair = BoltzmannPair::default_pair();
    let truth = BOLTZMANN_LOG_Z_RATIO;
    let is = estimate_oracle_variance::<f64, _, _>(
        &pair,
        &OracleMode::Importance { k: 64 },
        20_000,
        &mut rng(3),
    )
    .unwrap();
    assert!(
        (is.sample_mean - truth).abs() < 0.01,
        "importance {}",
        is.sample_mean
    );
    let mh = estimate_oracle_variance(
        &pair,
        &OracleMode::Metropolis(MetropolisConfig {
            burn_in: 300,
            step: 1.0,
        }),
        4_000,
        &mut rng(4),
    )
    .unwrap();
    assert!(
        (mh.sample_mean - truth).abs() < 0.02,
        "metropolis {}",
        mh.sample_mean
    );
}

#[test]
fn kl_estimates_agree_with_closed_forms() {
    let b = BoltzmannPair::default_pair();
    let e = estimate_kl::<f64, _, _>(&b, 50_000, &OracleMode::ExactPath, &mut rng(5)).unwrap();
    assert!(
        (e.mean - BOLTZMANN_KL_POST_PRE).abs() <= 3.0 * e.std_error,
        "{e:?}"
    );
    let g = GaussianPair::<f64>::mvn10();
    let e = estimate_kl(&g, 20_000, &OracleMode::ExactPath, &mut rng(6)).unwrap();
    assert!(
        (e.mean - MVN10_KL_POST_PRE).abs() <= 3.0 * e.std_error,
        "{e:?}"
    );
}

#[test]
fn calibrated_gamma_passes_the_condition_on_both_pairs() {
    let b = BoltzmannPair::default_pair();
    let g = GaussianPair::<f64>::mvn10();
    for i in [100, 400] {
        let inputs = CalibrationInputs::new(i, OracleMode::ExactPath);
        let cb = calibrate(&b, &inputs, &mut rng(7)).unwrap();
        assert!(cb.condition_check.passed, "boltzmann i={i}: {cb:?}");
        let mut inputs = inputs.clone();
        inputs.check_draws = 2_000;
        let cg = calibrate(&g, &inputs, &mut rng(8)).unwrap();
        assert!(cg.condition_check.passed, "mvn10 i={i}: {cg:?}");
        assert!(cb.gamma0 > 0.0 && cb.gamma0 < 1.0 && cg.gamma0 > 0.0 && cg.gamma0 < 1.0);
    }
}

#[test]
fn oversized_gamma_fails_the_condition() {
    let pair = BoltzmannPair::default_pair();
    let c =
        check_gamma_condition(&pair, 2.0, 100, &OracleMode::ExactPath, 5_000, &mut rng(9)).unwrap();
    assert!(!c.passed, "{c:?}");
    assert!(c.estimate > 1.0);
}

#[test]
fn scusum_multiplier_is_positive_on_mvn10() {
    let pair = GaussianPair::<f64>::mvn10();
    let d = scusum_delta(&pair, 10_000, &mut rng(10)).unwrap();
    assert!(d.feasible && d.delta > 0.0, "{d:?}");
}

fn small_harness(trials: usize) -> HarnessConfig {
    HarnessConfig {
        trials,
        master_seed: 99,
        threads: 2,
        arl_max_len: 5_000,
        change_point: 30,
        stream_len: 800,
        ..HarnessConfig::default()
    }
}

#[test]
fn arl_is_nondecreasing_in_threshold() {
    let pair = BoltzmannPair::default_pair();
    let dets = vec![
        NamedDetector {
            id: "cusum".into(),
            spec: DetectorSpec::Cusum,
        },
        NamedDetector {
            id: "lpa".into(),
            spec: DetectorSpec::Lpa(LpaConfig::new(0.97, 20, OracleMode::ExactPath).unwrap()),
        },
    ];
    let thresholds = [0.5, 1.0, 2.0, 3.0];
    let rows = sweep(&pair, &dets, &thresholds, None, &small_harness(40), |_| {
        Ok(())
    })
    .unwrap();
    for w in rows.windows(2).filter(|w| w[0].detector == w[1].detector) {
        assert!(w[1].arl_mean.unwrap() >= w[0].arl_mean.unwrap(), "{w:?}");
    }
}

#[test]
fn exact_constant_lpa_has_cusum_delay() {
    let pair = BoltzmannPair::default_pair();
    let cfg = small_harness(60);
    let lpa = DetectorSpec::Lpa(
        LpaConfig::new(1.0, 5, OracleMode::exact_constant(&pair).unwrap()).unwrap(),
    );
    let a = estimate_cadd(&DetectorSpec::Cusum, &pair, 2.0, &cfg).unwrap();
    let b = estimate_cadd(&lpa, &pair, 2.0, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_precision_instantiation() {
    let pair = BoltzmannPair::<f32>::default_pair();
    let rep =
        estimate_oracle_variance(&pair, &OracleMode::ExactPath, 50_000, &mut rng(11)).unwrap();
    let truth = BOLTZMANN_LOG_Z_RATIO as f32;
    assert!(
        (rep.sample_mean - truth).abs() <= 4.0 * rep.std_error,
        "{rep:?}"
    );
    let inputs = CalibrationInputs::new(100, OracleMode::ExactPath);
    let cal = calibrate(&pair, &inputs, &mut rng(12)).unwrap();
    assert!(cal.gamma0 > 0.9f32 && cal.gamma0 < 1.0f32);
    let stream = lpa_cusum::generate_stream(
        &pair,
        &lpa_cusum::StreamSpec {
            change_point: lpa_cusum::ChangePoint::At(20),
            length: 2_000,
            seed: 5,
        },
    )
    .unwrap();
    let lpa = DetectorSpec::Lpa(
        LpaConfig::new(1.0f32, 1, OracleMode::exact_constant(&pair).unwrap()).unwrap(),
    );
    let a = run_detector(&DetectorSpec::Cusum, &pair, &stream, 3.0f32, &mut rng(13)).unwrap();
    let b = run_detector(&lpa, &pair, &stream, 3.0f32, &mut rng(13)).unwrap();
    assert_eq!(a, b);
    assert!(a.stop_time.is_some());
}
