//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any of them fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfscm_core::combat::fit_combat;
use cfscm_core::data::DataTable;
use cfscm_core::eval::{run_plan, ExperimentPlan, ExperimentReport, MlpConfig, Task, TAR_ONLY};
use cfscm_core::flows::{jacobian_probe, Flow, SplineKind};
use cfscm_core::harmonize::harmonize;
use cfscm_core::numkit::check::random_graph_suite;
use cfscm_core::numkit::{ParamStore, Tensor};
use cfscm_core::scm::{fit, Intervention, ScmModel, ScmSpec, TrainConfig, XFlowKind};
use cfscm_core::stats::{mean, variance};
use cfscm_core::synthdata::GeneratorSpec;

struct Verdict {
    id: usize,
    name: &'static str,
    ok: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

impl Verdict {
    fn passed(&self) -> bool {
        self.ok && self.elapsed <= self.budget
    }

    fn line(&self) -> String {
        format!(
            "criterion {} [{}] {}: {} ({:.1}s, budget {}s)",
            self.id,
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

fn timed<F: FnOnce() -> (bool, String)>(id: usize, name: &'static str, budget_s: u64, f: F) -> Verdict {
    eprintln!("running criterion {id}: {name}");
    let t0 = Instant::now();
    let (ok, detail) = f();
    let v = Verdict {
        id,
        name,
        ok,
        detail,
        elapsed: t0.elapsed(),
        budget: Duration::from_secs(budget_s),
    };
    eprintln!("  {}", v.line());
    v
}

fn matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng, range: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-range..range)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn flow_kinds(d: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Flow, ParamStore)> {
    let mut out = Vec::new();
    for name in ["learned-affine", "conditional-affine", "linear-spline", "quadratic-spline"] {
        let mut store = ParamStore::new();
        let flow = match name {
            "learned-affine" => Flow::learned_affine(&mut store, "f", d),
            "conditional-affine" => Flow::conditional_affine(&mut store, "f", d, c, rng),
            "linear-spline" => Flow::spline(&mut store, "f", SplineKind::LinearRational, d, c, rng),
            _ => Flow::spline(&mut store, "f", SplineKind::QuadraticRational, d, c, rng),
        };
        // Move away from the identity initialization.
        for id in flow.param_ids() {
            for v in store.get_mut(id).value.data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        out.push((name, flow, store));
    }
    out
}

fn criterion_1() -> (bool, String) {
    let c = 3;
    let (mut round, mut anti, mut upper, mut det) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut probes = 0;
    for d in [2, 4, 8, 16] {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + d as u64);
        for (_, flow, store) in flow_kinds(d, c, &mut rng) {
            let eps = matrix(500, d, &mut rng, 3.0);
            let ctx = matrix(500, c, &mut rng, 1.5);
            let (x, ld_f) = flow.forward(&store, &eps, Some(&ctx)).unwrap();
            let (back, ld_i) = flow.inverse(&store, &x, Some(&ctx)).unwrap();
            round = back.data().iter().zip(eps.data()).map(|(a, b)| (a - b).abs()).fold(round, f64::max);
            anti = ld_f.iter().zip(&ld_i).map(|(a, b)| (a + b).abs()).fold(anti, f64::max);
            for _ in 0..3 {
                let e: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
                let cx: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let rep = jacobian_probe(&flow, &store, &e, Some(&cx)).unwrap();
                upper = upper.max(rep.max_upper);
                det = det.max(rep.det_rel_err);
                probes += 1;
            }
        }
    }
    let ok = round < 1e-6 && anti < 1e-9 && det < 1e-4 && upper < 1e-8;
    (
        ok,
        format!("round trip {round:.2e}, logdet antisymmetry {anti:.2e}, jacobian det rel err {det:.2e}, max upper entry {upper:.2e} over {probes} probes"),
    )
}

fn criterion_2() -> (bool, String) {
    let (worst, failed) = random_graph_suite(1, 100).unwrap();
    (
        failed == 0 && worst.max_rel_err < 1e-4,
        format!(
            "{failed}/100 graphs failed, max rel err {:.2e}, max abs err {:.2e} over {} entries",
            worst.max_rel_err, worst.max_abs_err, worst.checked
        ),
    )
}

struct Fitted {
    spec: GeneratorSpec,
    train: cfscm_core::synthdata::Generated,
    test: DataTable,
    model: ScmModel,
}

fn fit_preset(preset: &str, d: usize, n: usize, kind: XFlowKind) -> Fitted {
    let spec = GeneratorSpec::preset(preset, Some(d), 1).unwrap();
    let train = spec.generate(n);
    let mut held = spec.clone();
    held.seed = 99;
    let test = held.generate(n).table;
    let cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
    let model = fit(&train.table, ScmSpec::new(spec.n_sites, d, kind), &cfg).unwrap();
    Fitted { spec, train, test, model }
}

fn criterion_3(f: &Fitted) -> (bool, String) {
    assert_eq!(f.spec.warp, 0.0);
    assert_eq!(f.spec.disease_prevalence, 0.0);
    let data = &f.train.table;
    let d = data.dim;
    // The conditional mean of an affine flow is its image of zero noise.
    let mut noise = f.model.abduct(data).unwrap();
    for n in &mut noise {
        n.x.iter_mut().for_each(|v| *v = 0.0);
    }
    let means = f.model.predict(&noise).unwrap();
    let mut worst = 0.0f64;
    let mut truth = vec![0.0; d];
    for t in 0..f.spec.n_sites {
        let rows = data.rows_at_site(t);
        for j in 0..d {
            let model_mean = mean(&rows.iter().map(|&i| means.row(i)[j]).collect::<Vec<_>>());
            let gen_mean = mean(
                &rows
                    .iter()
                    .map(|&i| {
                        f.spec.features(data.sex[i], data.age[i], t, 0, &vec![0.0; d], &mut truth);
                        truth[j]
                    })
                    .collect::<Vec<_>>(),
            );
            worst = worst.max((model_mean - gen_mean).abs());
        }
    }
    let ll = f.model.log_likelihood(&f.test).unwrap().mean;
    let analytic = f.spec.mean_log_likelihood(&f.test);
    let gap = (ll - analytic).abs();
    (
        worst < 0.05 && gap < 0.1,
        format!("max per-site mean error {worst:.4}, held-out log-likelihood {ll:.4} vs analytic {analytic:.4} (gap {gap:.4})"),
    )
}

fn null_error(model: &ScmModel, data: &DataTable) -> f64 {
    let mut worst = 0.0f64;
    for t in 0..model.spec.n_sites {
        let sub = data.subset(&data.rows_at_site(t));
        let cf = model.counterfactual(&sub, Intervention { site: t }, 1).unwrap();
        worst = cf.iter().zip(&sub.features).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    worst
}

fn criterion_4(linear: &Fitted, others: &[(&str, &ScmModel, &DataTable)]) -> (bool, String) {
    let mut nulls = vec![("linear-gaussian/affine".to_string(), null_error(&linear.model, &linear.train.table))];
    for (name, m, data) in others {
        nulls.push((name.to_string(), null_error(m, data)));
    }
    let worst_null = nulls.iter().map(|(_, e)| *e).fold(0.0, f64::max);

    let data = &linear.train.table;
    let mut dev = Vec::new();
    for tau in 0..linear.spec.n_sites {
        let cf = linear.model.counterfactual(data, Intervention { site: tau }, 1).unwrap();
        for i in 0..data.len() {
            let oracle = linear.spec.oracle_counterfactual(data, &linear.train.noise, i, tau).unwrap();
            for (j, o) in oracle.iter().enumerate() {
                dev.push((cf[i * data.dim + j] - o).abs());
            }
        }
    }
    let mad = mean(&dev);
    (
        worst_null < 1e-5 && mad < 0.1,
        format!("null intervention max error {worst_null:.2e} over {} models, linear oracle MAD {mad:.4}", nulls.len()),
    )
}

fn criterion_5(fits: &[Fitted]) -> (bool, String) {
    let ll: Vec<f64> = fits.iter().map(|f| f.model.log_likelihood(&f.test).unwrap().mean).collect();
    let (affine, lin, quad) = (ll[0], ll[1], ll[2]);
    let ok = quad >= lin && lin >= affine && lin.min(quad) - affine > 0.5;
    (ok, format!("held-out log-likelihood qspline {quad:.4} >= lspline {lin:.4} >= affine {affine:.4}"))
}

fn target(report: &ExperimentReport, variant: &str) -> Vec<f64> {
    report.row("Target", variant).unwrap().folds.clone()
}

struct Harmonized {
    model: ScmModel,
    data: DataTable,
}

fn criterion_6(keep: &mut Vec<Harmonized>) -> (bool, String) {
    let qfit = |spec: &GeneratorSpec, table: &DataTable| {
        let cfg = TrainConfig { seed: 1, ..TrainConfig::default() };
        fit(table, ScmSpec::new(spec.n_sites, table.dim, XFlowKind::QuadraticRationalSpline), &cfg).unwrap()
    };

    // Age regression across a strong location shift.
    let spec = GeneratorSpec::preset("two-site-shift", Some(16), 11).unwrap();
    let g = spec.generate(4000);
    let model = qfit(&spec, &g.table);
    let (harm, _) = harmonize(&model, &g.table, 0, 32).unwrap();
    let mut v = BTreeMap::new();
    v.insert("raw".to_string(), g.table.clone());
    v.insert("scm-qspline".to_string(), harm);
    let plan = ExperimentPlan {
        task: Task::AgeRegression,
        source: vec![0],
        target: vec![1],
        variants: vec!["raw".into(), "scm-qspline".into()],
        folds: 5,
        seed: 4,
        mlp: MlpConfig::default(),
    };
    let r = run_plan(&plan, &v, None).unwrap();
    let raw = mean(&target(&r, "raw"));
    let q = mean(&target(&r, "scm-qspline"));
    let tar = mean(&target(&r, TAR_ONLY));
    let reg_ok = q < 0.8 * raw && (q - tar).abs() <= 0.15 * tar;
    keep.push(Harmonized { model, data: g.table.clone() });

    // Classification where ComBat's additive model cannot undo the site effect.
    let spec = GeneratorSpec::preset("combat-hostile", Some(8), 11).unwrap();
    let g = spec.generate(6000);
    let model = qfit(&spec, &g.table);
    let (harm, _) = harmonize(&model, &g.table, 0, 32).unwrap();
    let combat = fit_combat(&g.table, 2).unwrap().apply(&g.table).unwrap().0;
    let labels: HashMap<String, f64> = g.table.ids.iter().cloned().zip(g.noise.disease.iter().map(|&y| f64::from(y))).collect();
    let mut v = BTreeMap::new();
    v.insert("raw".to_string(), g.table.clone());
    v.insert("combat".to_string(), combat);
    v.insert("scm-qspline".to_string(), harm);
    let plan = ExperimentPlan {
        task: Task::BinaryClassification,
        variants: vec!["raw".into(), "combat".into(), "scm-qspline".into()],
        ..plan
    };
    let r = run_plan(&plan, &v, Some(&labels)).unwrap();
    let qf = target(&r, "scm-qspline");
    let cf = target(&r, "combat");
    let gain = mean(&qf) - mean(&cf);
    let wins = qf.iter().zip(&cf).filter(|(a, b)| a > b).count();
    let cls_ok = gain >= 0.03 && wins >= 4;
    keep.push(Harmonized { model, data: g.table });

    (
        reg_ok && cls_ok,
        format!(
            "target MAE raw {raw:.3}, qspline {q:.3}, tar-only {tar:.3}; target accuracy qspline {:.3} vs combat {:.3} (+{:.1} points, {wins}/5 folds)",
            mean(&qf),
            mean(&cf),
            100.0 * gain
        ),
    )
}

fn criterion_7() -> (bool, String) {
    let spec = GeneratorSpec::preset("location-scale", Some(8), 3).unwrap();
    let g = spec.generate(6000);
    let k = spec.n_sites;
    let p = fit_combat(&g.table, k).unwrap();
    let (adj, _) = p.apply(&g.table).unwrap();
    let (mut mean_gap, mut var_ratio, mut beta_err) = (0.0f64, 0.0f64, 0.0f64);
    for j in 0..adj.dim {
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for t in 0..k {
            let r: Vec<f64> = adj
                .rows_at_site(t)
                .into_iter()
                .map(|i| adj.row(i)[j] - p.covariates(adj.sex[i], adj.age[i], j))
                .collect();
            means.push(mean(&r));
            vars.push(variance(&r, 1));
        }
        let spread = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
        mean_gap = mean_gap.max(spread(&means));
        let (lo, hi) = vars.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        var_ratio = var_ratio.max(hi / lo);
        let per_sd_age = p.beta_age[j] / p.age_scale * spec.age.std;
        beta_err = beta_err.max((p.beta_sex[j] - spec.beta_sex[j]).abs()).max((per_sd_age - spec.beta_age[j]).abs());
    }
    (
        mean_gap < 0.05 && var_ratio < 1.1 && beta_err < 0.1,
        format!("per-site mean spread {mean_gap:.4}, residual variance ratio {var_ratio:.4}, max covariate effect error {beta_err:.4}"),
    )
}

fn cfscm(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_cfscm")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "cfscm {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn criterion_8() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let steps: [&[&str]; 5] = [
        &["synth", "--preset", "two-site-shift", "--n", "600", "--dim", "4", "--seed", "7", "--out", "data.csv"],
        &["fit-scm", "--flow", "qspline", "--data", "data.csv", "--out", "model.cfscm", "--seed", "2", "--epochs", "15"],
        &["harmonize", "--model", "model.cfscm", "--ref-site", "0", "--data", "data.csv", "--out", "harm.csv"],
        &["combat", "--data", "data.csv", "--out", "combat.csv"],
        &[
            "eval", "--task", "age-regression", "--source", "0", "--target", "1", "--variant", "raw=data.csv", "--variant",
            "scm-qspline=harm.csv", "--variant", "combat=combat.csv", "--epochs", "10", "--seed", "5", "--out", "report.csv",
        ],
    ];
    for s in steps {
        let mut a = vec!["--threads", "1"];
        a.extend_from_slice(s);
        cfscm(d, &a);
    }
    let manifests = ["data", "model", "harm", "combat", "report"].map(|s| format!("{s}.manifest.json"));
    let mut files: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let before: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    for p in &files {
        std::fs::remove_file(p).unwrap();
    }
    // Replays run from copies of the manifests only.
    let keep = tempfile::tempdir().unwrap();
    for (p, bytes) in files.iter().zip(&before) {
        let name = p.file_name().unwrap().to_str().unwrap();
        if manifests.iter().any(|m| m == name) {
            std::fs::write(keep.path().join(name), bytes).unwrap();
        }
    }
    for m in &manifests {
        let path = keep.path().join(m);
        cfscm(d, &["--threads", "1", "replay", "--manifest", path.to_str().unwrap(), "--check"]);
    }
    let identical = files.iter().zip(&before).filter(|(p, b)| std::fs::read(p).ok().as_ref() == Some(*b)).count();
    (
        identical == files.len(),
        format!("{identical}/{} files byte-identical after replaying {} manifests", files.len(), manifests.len()),
    )
}

fn main() {
    // `cargo test` passes harness flags; a filter that names nothing here skips the suite.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut verdicts = vec![timed(1, "flow correctness", 60, criterion_1), timed(2, "gradient suite", 60, criterion_2)];

    let mut linear = None;
    verdicts.push(timed(3, "MLE recovery", 300, || {
        let f = fit_preset("linear-gaussian", 4, 5000, XFlowKind::ConditionalAffine);
        let r = criterion_3(&f);
        linear = Some(f);
        r
    }));

    let mut density = Vec::new();
    verdicts.push(timed(5, "density ordering", 600, || {
        density = XFlowKind::ALL.iter().map(|&k| fit_preset("heteroskedastic", 8, 5000, k)).collect();
        criterion_5(&density)
    }));

    let mut harmonized = Vec::new();
    verdicts.push(timed(6, "harmonization benefit", 900, || criterion_6(&mut harmonized)));

    let linear = linear.unwrap();
    verdicts.push(timed(4, "counterfactual soundness", 300, || {
        let mut others: Vec<(&str, &ScmModel, &DataTable)> = Vec::new();
        for f in &density {
            others.push(("heteroskedastic", &f.model, &f.train.table));
        }
        for h in &harmonized {
            others.push(("harmonization", &h.model, &h.data));
        }
        criterion_4(&linear, &others)
    }));

    verdicts.push(timed(7, "ComBat baseline", 120, criterion_7));
    verdicts.push(timed(8, "reproducibility", 300, criterion_8));

    verdicts.sort_by_key(|v| v.id);
    println!();
    for v in &verdicts {
        println!("{}", v.line());
    }
    let failed = verdicts.iter().filter(|v| !v.passed()).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
