use cfscm_core::data::DataTable;
use cfscm_core::harmonize::harmonize;
use cfscm_core::scm::{fit, ScmModel, ScmSpec, TrainConfig, XFlowKind};
use cfscm_core::stats::{correlation, ks_statistic, mean};
use cfscm_core::synthdata::GeneratorSpec;

fn fitted(spec: &GeneratorSpec, table: &DataTable, kind: XFlowKind, epochs: usize) -> ScmModel {
    let cfg = TrainConfig {
        epochs,
        seed: 5,
        ..TrainConfig::default()
    };
    fit(table, ScmSpec::new(spec.n_sites, table.dim, kind), &cfg).unwrap()
}

fn site_column(t: &DataTable, site: usize, j: usize) -> Vec<f64> {
    let orig = t.orig_site.as_ref().unwrap_or(&t.site);
    (0..t.len()).filter(|&i| orig[i] == site).map(|i| t.row(i)[j]).collect()
}

#[test]
fn location_shift_is_removed_and_site_free_feature_is_untouched() {
    let mut spec = GeneratorSpec::preset("two-site-shift", Some(3), 21).unwrap();
    // Feature 0 carries no site effect at all.
    spec.site_loc[1][0] = 0.0;
    let g = spec.generate(4000);
    let model = fitted(&spec, &g.table, XFlowKind::ConditionalAffine, 200);
    let (h, report) = harmonize(&model, &g.table, 0, 32).unwrap();
    assert!(report.skipped.is_empty());

    for t in 0..2 {
        let ks = ks_statistic(&site_column(&g.table, t, 0), &site_column(&h, t, 0));
        assert!(ks < 0.05, "site {t}: KS {ks}");
    }
    for j in 1..3 {
        let gap_pre = mean(&site_column(&g.table, 1, j)) - mean(&site_column(&g.table, 0, j));
        let gap_post = mean(&site_column(&h, 1, j)) - mean(&site_column(&h, 0, j));
        assert!(gap_pre > 1.5, "{gap_pre}");
        assert!(gap_post.abs() < 0.1, "feature {j}: {gap_post}");
    }

    // A second pass to the same site is a no-op.
    let (again, _) = harmonize(&model, &h, 0, 32).unwrap();
    let worst = again.features.iter().zip(&h.features).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{worst}");
    assert_eq!(again.orig_site, h.orig_site);
}

#[test]
fn disease_signal_survives() {
    let spec = GeneratorSpec::preset("heteroskedastic", Some(4), 8).unwrap();
    let g = spec.generate(3000);
    let model = fitted(&spec, &g.table, XFlowKind::QuadraticRationalSpline, 40);
    let (h, report) = harmonize(&model, &g.table, 0, 32).unwrap();
    assert!(report.skipped.is_empty());
    let y: Vec<f64> = g.noise.disease.iter().map(|&v| f64::from(v)).collect();
    let project = |t: &DataTable| -> Vec<f64> {
        (0..t.len())
            .map(|i| t.row(i).iter().zip(&spec.beta_disease).map(|(x, b)| x * b).sum())
            .collect()
    };
    let pre = correlation(&y, &project(&g.table));
    let post = correlation(&y, &project(&h));
    assert!(pre > 0.3, "{pre}");
    assert!(((post - pre) / pre).abs() < 0.05, "pre {pre}, post {post}");
}
