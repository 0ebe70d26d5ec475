mod common;

use common::{condition, random_instance, rel_close, start_1978, JointGaussian};
use icefactor::simulation::{simulate, SimConfig};
use icefactor::{
    build_design_matrix, compare_normalizations, extract_with_params, unconditional_init, ExtractedSeries,
    ModelParams, NormComparison, ParamValues,
};

fn with_sigma(p: &ModelParams, f: impl FnOnce(&mut Vec<Vec<f64>>)) -> ModelParams {
    let mut v = p.to_values();
    f(&mut v.sigma);
    ModelParams::try_from(v).unwrap()
}

#[test]
fn precise_anchor_dominates_extraction() {
    let p = with_sigma(&ModelParams::sea_ice_reference(), |s| {
        for j in 0..4 {
            s[0][j] = 0.0;
            s[j][0] = 0.0;
        }
        s[0][0] = 1e-8;
    });
    let (panel, _) = simulate(&SimConfig::new(p.clone(), 240, start_1978(), 1)).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    let e = extract_with_params(&p, &panel, &design).unwrap();
    for t in 0..240 {
        assert!((e.mean[t] - panel.value(t, 0).unwrap()).abs() < 1e-3);
        assert!(e.sd[t] < 1e-4);
    }
}

#[test]
fn diffuse_state_follows_single_indicator() {
    let p = ModelParams::try_from(ParamValues {
        indicators: vec!["SII".into()],
        anchor: "SII".into(),
        c: vec![0.0],
        lambda: vec![1.0],
        sigma: vec![vec![1e-4]],
        rho: 0.5,
        a: [10.0; 12],
        b: [0.0; 12],
        cq: [0.0; 12],
        sigma2_eta: 100.0,
    })
    .unwrap();
    let (panel, _) = simulate(&SimConfig::new(p.clone(), 60, start_1978(), 2)).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    let e = extract_with_params(&p, &panel, &design).unwrap();
    for t in 0..60 {
        // Posterior weight on the prior is below Σ/σ²_η = 1e-6.
        assert!((e.mean[t] - panel.value(t, 0).unwrap()).abs() < 1e-3);
        assert!((e.sd[t] - 1e-2).abs() < 1e-5);
    }
}

#[test]
fn extraction_matches_joint_gaussian_conditioning() {
    for seed in 0..10 {
        let inst = random_instance(500 + seed, 8, 3);
        let e = extract_with_params(&inst.params, &inst.panel, &inst.design).unwrap();
        let init = unconditional_init(&inst.params, inst.design.row(0));
        let joint = JointGaussian::new(&inst.params, &inst.design, &init);
        let c = condition(&joint, &inst.panel);
        for t in 0..8 {
            assert!(rel_close(e.mean[t], c.mean[t], 1e-8), "seed {seed} t {t}");
            assert!(rel_close(e.sd[t], c.cov[(t, t)].sqrt(), 1e-8));
        }
    }
}

fn white_noise(seed: u64, n: usize) -> Vec<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn independent_series_have_small_fit() {
    let dates = icefactor::YearMonth::range_inclusive(start_1978(), start_1978().add_months(119));
    let mut mean_r2: Vec<f64> = (0..50)
        .map(|seed| {
            let base = ExtractedSeries { dates: dates.clone(), mean: white_noise(2 * seed, 120), sd: vec![0.0; 120], anchor: "SII".into() };
            let other = ExtractedSeries { mean: white_noise(2 * seed + 1, 120), anchor: "Goddard".into(), ..base.clone() };
            let cmp = compare_normalizations(&base, &other).unwrap();
            assert!(cmp.months.iter().all(|m| !m.flagged && m.n == 10));
            cmp.months.iter().map(|m| m.r_squared).sum::<f64>() / 12.0
        })
        .collect();
    mean_r2.sort_by(|a, b| a.total_cmp(b));
    // Under independence each monthly R² is Beta(1/2, 4) with mean 1/9.
    let avg = mean_r2.iter().sum::<f64>() / 50.0;
    assert!((avg - 1.0 / 9.0).abs() < 0.02, "{avg}");
    let p95 = mean_r2[47];
    eprintln!("mean monthly R²: 95th percentile {p95:.4}");
    assert!(p95 < 0.2, "{p95}");
}

#[test]
fn renormalized_extractions_are_affine() {
    let s = ModelParams::sea_ice_reference();
    let g = s.renormalize(3).unwrap();
    let (panel, _) = simulate(&SimConfig::new(s.clone(), 480, start_1978(), 3)).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    let es = extract_with_params(&s, &panel, &design).unwrap();
    let eg = extract_with_params(&g, &panel, &design).unwrap();
    assert_eq!(eg.anchor, "Goddard");
    for t in 0..480 {
        let mapped = 1.040 + 0.961 * es.mean[t];
        assert!((eg.mean[t] - mapped).abs() < 1e-9 * mapped.abs());
        assert!((eg.sd[t] - 0.961 * es.sd[t]).abs() < 1e-9);
    }
    let cmp = compare_normalizations(&es, &eg).unwrap();
    for m in &cmp.months {
        assert!(m.r_squared > 1.0 - 1e-12);
        assert!((m.slope - 0.961).abs() < 1e-9 && (m.intercept - 1.040).abs() < 1e-8);
    }
}

#[test]
fn bands_shrink_with_measurement_noise() {
    let base = ModelParams::sea_ice_reference();
    let mut v = base.to_values();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                v.sigma[i][j] = 0.0;
            }
        }
    }
    let diag = ModelParams::try_from(v).unwrap();
    let mut cfg = SimConfig::new(base.clone(), 120, start_1978(), 4);
    cfg.missing_pattern = vec![icefactor::simulation::MissingSpan { indicator: 1, start: 1, end: 30 }];
    let (panel, _) = simulate(&cfg).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    for (k, p) in [base, diag].iter().enumerate() {
        for i in 0..4 {
            let s_ii = p.sigma()[(i, i)];
            // Σ − δ·e_i e_i' stays positive definite while δ < 1 / (Σ⁻¹)_ii.
            let room = 1.0 / p.sigma().clone().try_inverse().unwrap()[(i, i)];
            let bands: Vec<Vec<f64>> = [0.0, 0.4, 0.8]
                .iter()
                .map(|f| {
                    let q = with_sigma(p, |s| s[i][i] = s_ii - f * room);
                    extract_with_params(&q, &panel, &design).unwrap().sd
                })
                .collect();
            for w in bands.windows(2) {
                assert!(w[0].iter().zip(&w[1]).all(|(a, b)| *b <= a + 1e-12), "case {k} indicator {i}");
                assert!(w[0].iter().zip(&w[1]).any(|(a, b)| *b < a - 1e-9));
            }
        }
    }
}

#[test]
fn outputs_round_trip() {
    let s = ModelParams::sea_ice_reference();
    let (panel, _) = simulate(&SimConfig::new(s.clone(), 36, start_1978(), 6)).unwrap();
    let design = build_design_matrix(panel.dates(), start_1978()).unwrap();
    let e = extract_with_params(&s, &panel, &design).unwrap();
    let mut buf = Vec::new();
    e.write_csv(&mut buf).unwrap();
    assert_eq!(ExtractedSeries::read_csv(buf.as_slice()).unwrap(), e);
    let back: ExtractedSeries = serde_json::from_str(&serde_json::to_string(&e).unwrap()).unwrap();
    assert_eq!(back, e);

    let g = extract_with_params(&s.renormalize(3).unwrap(), &panel, &design).unwrap();
    let cmp = compare_normalizations(&e, &g).unwrap();
    let back: NormComparison = serde_json::from_str(&serde_json::to_string(&cmp).unwrap()).unwrap();
    assert_eq!(back, cmp);
    let mut buf = Vec::new();
    cmp.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), NormComparison::CSV_HEADER);
    assert_eq!(text.lines().count(), 13);

    let mut buf = Vec::new();
    e.write_long_csv(&panel, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 36 * 5);
    assert!(text.lines().nth(1).unwrap().contains("latent(SII)"));
}
