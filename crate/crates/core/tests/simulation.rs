mod common;

use common::start_1978;
use icefactor::simulation::{
    monte_carlo_recovery, named_parameters, simulate, simulate_stream, McReport, MissingSpan, ShockDist, SimConfig,
};
use icefactor::{
    build_design_matrix, fit_em, log_likelihood, unconditional_init, EMConfig, IndicatorPanel, ModelParams,
    ParamValues, TrendSeasonal,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quiet_params() -> ModelParams {
    ModelParams::try_from(ParamValues {
        indicators: common::NAMES.iter().map(|s| s.to_string()).collect(),
        anchor: "SII".into(),
        c: vec![0.0, 0.5, -0.3, 1.0],
        lambda: vec![1.0, 0.9, 1.1, 0.95],
        sigma: (0..4).map(|i| (0..4).map(|j| if i == j { 0.01 } else { 0.0 }).collect()).collect(),
        rho: 0.0,
        a: [0.0; 12],
        b: [0.0; 12],
        cq: [0.0; 12],
        sigma2_eta: 0.02,
    })
    .unwrap()
}

fn zero_trend_reference() -> ModelParams {
    let mut v = ModelParams::sea_ice_reference().to_values();
    let z = TrendSeasonal::zero();
    v.a = z.a;
    v.b = z.b;
    v.cq = z.cq;
    ModelParams::try_from(v).unwrap()
}

#[test]
fn sample_variances_match_theory() {
    let p = quiet_params();
    let t_len = 4000;
    let (panel, _) = simulate(&SimConfig::new(p.clone(), t_len, start_1978(), 11)).unwrap();
    for i in 0..4 {
        let y: Vec<f64> = panel.column(i).into_iter().map(Option::unwrap).collect();
        let mean = y.iter().sum::<f64>() / t_len as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t_len - 1) as f64;
        let lam = p.loadings()[i];
        let theory = lam * lam * p.sigma2_eta() + p.sigma()[(i, i)];
        let se = theory * (2.0 / (t_len - 1) as f64).sqrt();
        assert!((var - theory).abs() < 3.0 * se, "indicator {i}: {var} vs {theory}");
        let mean_se = (theory / t_len as f64).sqrt();
        assert!((mean - p.intercepts()[i]).abs() < 3.0 * mean_se);
    }
}

#[test]
fn same_seed_same_panel() {
    let cfg = SimConfig::new(ModelParams::sea_ice_reference(), 300, start_1978(), 5);
    let (a, xa) = simulate(&cfg).unwrap();
    let (b, xb) = simulate(&cfg).unwrap();
    assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    assert_eq!(xa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), xb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let (c, _) = simulate(&SimConfig { seed: 6, ..cfg.clone() }).unwrap();
    assert_ne!(a.to_csv_string().unwrap(), c.to_csv_string().unwrap());
    let (d, _) = simulate_stream(&cfg, 1).unwrap();
    assert_ne!(a.to_csv_string().unwrap(), d.to_csv_string().unwrap());
}

#[test]
fn reference_seasonal_swing() {
    // Range of calendar-month means of the latent series, millions of km².
    let mut ranges = Vec::new();
    for seed in 0..20 {
        let (_, x) = simulate(&SimConfig::new(ModelParams::sea_ice_reference(), 506, start_1978(), seed)).unwrap();
        let mut sums = [0.0; 12];
        let mut counts = [0.0; 12];
        for (t, v) in x.iter().enumerate() {
            let m = start_1978().add_months(t as i64).month_index();
            sums[m] += v;
            counts[m] += 1.0;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
        let hi = means.iter().cloned().fold(f64::MIN, f64::max);
        let lo = means.iter().cloned().fold(f64::MAX, f64::min);
        ranges.push(hi - lo);
    }
    ranges.sort_by(|a, b| a.total_cmp(b));
    eprintln!("seasonal range min {:.3} median {:.3} max {:.3}", ranges[0], ranges[10], ranges[19]);
    assert!(ranges.iter().all(|r| (6.0..=14.0).contains(r)), "{ranges:?}");
}

#[test]
fn missing_pattern_masks_spans() {
    let mut cfg = SimConfig::new(ModelParams::sea_ice_reference(), 40, start_1978(), 2);
    cfg.missing_pattern = vec![MissingSpan { indicator: 2, start: 3, end: 10 }, MissingSpan { indicator: 0, start: 40, end: 40 }];
    let (panel, _) = simulate(&cfg).unwrap();
    for t in 0..40 {
        assert_eq!(panel.is_missing(t, 2), (2..10).contains(&t));
        assert_eq!(panel.is_missing(t, 0), t == 39);
        assert!(!panel.is_missing(t, 1) && !panel.is_missing(t, 3));
    }
    cfg.missing_pattern = vec![MissingSpan { indicator: 1, start: 30, end: 41 }];
    assert!(simulate(&cfg).is_err());
    cfg.missing_pattern.clear();
    cfg.periods = 0;
    assert!(simulate(&cfg).is_err());
}

#[test]
fn student_t_shocks_are_heavier_tailed() {
    let mut cfg = SimConfig::new(quiet_params(), 20_000, start_1978(), 3);
    let kurt = |cfg: &SimConfig| {
        let (panel, x) = simulate(cfg).unwrap();
        // Fourth standardized moment of the measurement residual of the anchor.
        let r: Vec<f64> = (0..x.len()).map(|t| panel.value(t, 0).unwrap() - x[t]).collect();
        let m2 = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
        let m4 = r.iter().map(|v| v.powi(4)).sum::<f64>() / r.len() as f64;
        (m2, m4 / (m2 * m2))
    };
    let (v_gauss, k_gauss) = kurt(&cfg);
    cfg.shocks = ShockDist::StudentT { dof: 5.0 };
    let (v_t, k_t) = kurt(&cfg);
    // Unit-variance scaling keeps Σ as the covariance.
    assert!((v_gauss - 0.01).abs() < 0.0006 && (v_t - 0.01).abs() < 0.0012, "{v_gauss} {v_t}");
    assert!((k_gauss - 3.0).abs() < 0.25, "{k_gauss}");
    assert!(k_t > 4.5, "{k_t}");
    cfg.shocks = ShockDist::StudentT { dof: 2.0 };
    assert!(simulate(&cfg).is_err());
}

#[test]
fn single_replication_report_matches_direct_fit() {
    let truth = zero_trend_reference();
    let cfg = SimConfig::new(truth.clone(), 150, start_1978(), 21);
    let em = EMConfig { max_iters: 200, ..EMConfig::default() };
    let report = monte_carlo_recovery(&cfg, 1, &em).unwrap();
    assert_eq!((report.reps, report.failed), (1, 0));

    let (panel, _) = simulate_stream(&cfg, 0).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    let fit = fit_em(&panel, &design, 0, &em).unwrap();
    let named = named_parameters(&fit.params, fit.std_errors.as_ref());
    let truth_named = named_parameters(&truth, None);
    assert_eq!(report.parameters.len(), named.len());
    for ((s, (name, est, se)), (_, tv, _)) in report.parameters.iter().zip(&named).zip(&truth_named) {
        assert_eq!(&s.name, name);
        assert_eq!(s.mean, *est);
        assert_eq!(s.bias, est - tv);
        assert_eq!(s.rmse, (est - tv).abs());
        assert_eq!(s.median_abs_error, (est - tv).abs());
        match se.filter(|v| v.is_finite()) {
            Some(se) => {
                let covered = (est - tv).abs() <= 1.96 * se;
                assert_eq!(s.coverage, Some(if covered { 1.0 } else { 0.0 }));
            }
            None => assert_eq!(s.coverage, None),
        }
    }

    let json = serde_json::to_string(&report).unwrap();
    let back: McReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + report.parameters.len());
    assert!(text.starts_with("parameter,truth,mean,bias,rmse,median_abs_error,coverage,coverage_count,reps,failed\n"));
}

#[test]
fn replications_do_not_depend_on_thread_count() {
    let cfg = SimConfig::new(zero_trend_reference(), 60, start_1978(), 8);
    let em = EMConfig { max_iters: 30, standard_errors: false, ..EMConfig::default() };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| monte_carlo_recovery(&cfg, 4, &em).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(serde_json::to_string(&one).unwrap(), serde_json::to_string(&three).unwrap());
}

#[test]
fn truth_beats_perturbed_parameters() {
    let truth = ModelParams::sea_ice_reference();
    let mut wins = 0;
    let reps = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for r in 0..reps {
        let (panel, _) = simulate_stream(&SimConfig::new(truth.clone(), 2000, start_1978(), 31), r).unwrap();
        let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
        let ll = |p: &ModelParams| {
            let init = unconditional_init(p, design.row(0));
            log_likelihood(p, &panel, &design, &init).unwrap()
        };
        // Every free coordinate moves by ±10%, with Σ scaled as DΣD.
        let mut v = truth.to_values();
        let mut flip = || if rng.random::<bool>() { 1.1 } else { 0.9 };
        for i in 1..4 {
            v.c[i] *= flip();
            v.lambda[i] *= flip();
        }
        let d: Vec<f64> = (0..4).map(|_| flip()).collect();
        for i in 0..4 {
            for j in 0..4 {
                v.sigma[i][j] *= d[i] * d[j];
            }
        }
        v.rho *= flip();
        for m in 0..12 {
            v.a[m] *= flip();
            v.b[m] *= flip();
            v.cq[m] *= flip();
        }
        v.sigma2_eta *= flip();
        let perturbed = ModelParams::try_from(v).unwrap();
        if ll(&truth) > ll(&perturbed) {
            wins += 1;
        }
    }
    assert!(wins * 10 >= reps * 9, "{wins}/{reps}");
}

#[test]
fn simulated_panel_csv_round_trip() {
    let mut cfg = SimConfig::new(ModelParams::sea_ice_reference(), 120, start_1978(), 4);
    cfg.missing_pattern = vec![MissingSpan { indicator: 3, start: 1, end: 12 }];
    let (panel, _) = simulate(&cfg).unwrap();
    let text = panel.to_csv_string().unwrap();
    let back = IndicatorPanel::read_csv(text.as_bytes()).unwrap();
    assert_eq!(back, panel);
    assert_eq!(back.to_csv_string().unwrap(), text);
    assert_eq!(named_parameters(&cfg.params, None).len(), 54);
    let json = serde_json::to_string(&cfg).unwrap();
    let back: SimConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, cfg);
}
