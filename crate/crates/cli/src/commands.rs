use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;

use cfscm_core::combat::fit_combat;
use cfscm_core::data::{feature_name, DataTable};
use cfscm_core::eval::{run_plan, ExperimentPlan, MlpConfig, Task};
use cfscm_core::harmonize::{harmonize, HIST_BINS};
use cfscm_core::scm::{fit_with_progress, ScmModel, ScmSpec, TrainConfig};
use cfscm_core::stats::Histogram;
use cfscm_core::synthdata::GeneratorSpec;

use crate::error::{CliError, CliResult};
use crate::manifest::{sha256_file, sibling, Manifest, OutputHash, BUILD_ID};
use crate::{Cli, Cmd, CombatArgs, DensityArgs, EvalArgs, FitArgs, HarmonizeArgs, ReplayArgs, SynthArgs};

struct Outcome {
    /// Output the manifest is written next to; `None` writes no manifest.
    primary: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

pub fn dispatch(cmd: Cmd, argv: Vec<String>) -> CliResult<()> {
    let name = match &cmd {
        Cmd::Synth(_) => "synth",
        Cmd::FitScm(_) => "fit-scm",
        Cmd::Harmonize(_) => "harmonize",
        Cmd::Combat(_) => "combat",
        Cmd::Eval(_) => "eval",
        Cmd::DensityReport(_) => "density-report",
        Cmd::Replay(a) => return replay(a),
    };
    let config = serde_json::to_value(&cmd)?;
    let outcome = match &cmd {
        Cmd::Synth(a) => synth(a)?,
        Cmd::FitScm(a) => fit_scm(a)?,
        Cmd::Harmonize(a) => run_harmonize(a)?,
        Cmd::Combat(a) => combat(a)?,
        Cmd::Eval(a) => eval(a)?,
        Cmd::DensityReport(a) => density_report(a)?,
        Cmd::Replay(_) => unreachable!(),
    };
    let Some(primary) = outcome.primary else {
        return Ok(());
    };
    let outputs = outcome
        .outputs
        .iter()
        .map(|p| Ok(OutputHash { path: p.clone(), sha256: sha256_file(p)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "cfscm".into(),
        build: BUILD_ID.into(),
        command: name.into(),
        seed: outcome.seed,
        argv,
        cwd: std::env::current_dir()?,
        config,
        outputs,
    };
    manifest.write(&Manifest::path_for(&primary))
}

fn replay(a: &ReplayArgs) -> CliResult<()> {
    let m = Manifest::read(&a.manifest)?;
    if m.command == "replay" {
        return Err(CliError::data("a replay manifest cannot be replayed"));
    }
    std::env::set_current_dir(&m.cwd).map_err(|e| CliError::data(format!("{}: {e}", m.cwd.display())))?;
    let argv: Vec<OsString> = std::iter::once(OsString::from("cfscm")).chain(m.argv.iter().map(OsString::from)).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::data(format!("manifest arguments: {e}")))?;
    if matches!(cli.command, Cmd::Replay(_)) {
        return Err(CliError::data("a replay manifest cannot be replayed"));
    }
    dispatch(cli.command, m.argv.clone())?;
    if a.check {
        let bad = m.mismatches()?;
        if !bad.is_empty() {
            let list: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
            return Err(CliError::data(format!("outputs differ from manifest: {}", list.join(", "))));
        }
        eprintln!("replay: {} outputs match", m.outputs.len());
    }
    Ok(())
}

fn read_table(path: &Path) -> CliResult<DataTable> {
    Ok(DataTable::read_csv(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn site_count(data: &DataTable, flag: Option<usize>) -> CliResult<usize> {
    let seen = data.n_sites();
    match flag {
        Some(k) if k < seen => Err(CliError::data(format!("data holds site {} but --n-sites is {k}", seen - 1))),
        Some(k) => Ok(k),
        None => Ok(seen),
    }
}

fn synth(a: &SynthArgs) -> CliResult<Outcome> {
    let spec = GeneratorSpec::preset(&a.preset, a.dim, a.seed)?;
    spec.validate()?;
    if a.n == 0 {
        return Err(CliError::usage("--n must be positive"));
    }
    let gen = spec.generate(a.n);
    gen.table.write_csv(&a.out)?;
    let noise = sibling(&a.out, "noise");
    spec.write_sidecar(&noise, &gen.noise)?;
    let labels = sibling(&a.out, "labels.csv");
    let mut w = csv::Writer::from_path(&labels)?;
    w.write_record(["subject_id", "label"])?;
    for (id, y) in gen.table.ids.iter().zip(&gen.noise.disease) {
        w.write_record([id.as_str(), &y.to_string()])?;
    }
    w.flush()?;
    Ok(Outcome {
        primary: Some(a.out.clone()),
        outputs: vec![a.out.clone(), noise, labels],
        seed: Some(a.seed),
    })
}

fn fit_scm(a: &FitArgs) -> CliResult<Outcome> {
    let data = read_table(&a.data)?;
    let k = site_count(&data, a.n_sites)?;
    let spec = ScmSpec::new(k, data.dim, a.flow);
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        val_fraction: a.val_fraction,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let model = fit_with_progress(&data, spec, &cfg, |epoch, loss, val| {
        if a.verbose {
            eprintln!("epoch {epoch:>4}  train nll {loss:.5}  val ll {val:.5}");
        }
    })?;
    model.save(&a.out)?;
    eprintln!(
        "fit-scm: {} flow, best epoch {}, validation log-likelihood {:.4}",
        a.flow, model.meta.best_epoch, model.meta.best_val_log_likelihood
    );
    Ok(Outcome {
        primary: Some(a.out.clone()),
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
    })
}

fn run_harmonize(a: &HarmonizeArgs) -> CliResult<Outcome> {
    let model = ScmModel::load(&a.model)?;
    let data = read_table(&a.data)?;
    let (out, report) = harmonize(&model, &data, a.ref_site, a.mc_samples)?;
    out.write_csv(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, "report.json"));
    write_json(&report_path, &report)?;
    if !report.skipped.is_empty() {
        eprintln!("harmonize: skipped {} rows, see {}", report.skipped.len(), report_path.display());
    }
    Ok(Outcome {
        primary: Some(a.out.clone()),
        outputs: vec![a.out.clone(), report_path],
        seed: None,
    })
}

fn combat(a: &CombatArgs) -> CliResult<Outcome> {
    let fit_on = read_table(&a.data)?;
    let k = site_count(&fit_on, a.n_sites)?;
    let params = fit_combat(&fit_on, k)?;
    let target = match &a.apply_to {
        Some(p) => read_table(p)?,
        None => fit_on,
    };
    let (out, rejected) = params.apply(&target)?;
    out.write_csv(&a.out)?;
    let params_path = a.params.clone().unwrap_or_else(|| sibling(&a.out, "params.json"));
    write_json(&params_path, &serde_json::json!({ "params": params, "rejected": rejected }))?;
    if !rejected.is_empty() {
        eprintln!("combat: dropped {} rows from sites unseen at fit time", rejected.len());
    }
    Ok(Outcome {
        primary: Some(a.out.clone()),
        outputs: vec![a.out.clone(), params_path],
        seed: None,
    })
}

fn read_labels(path: &Path) -> CliResult<HashMap<String, f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut map = HashMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(CliError::data(format!("{}: line {} needs subject_id,label", path.display(), i + 2)));
        };
        let v: f64 = label
            .trim()
            .parse()
            .map_err(|_| CliError::data(format!("{}: line {}: bad label {label:?}", path.display(), i + 2)))?;
        map.insert(id.to_string(), v);
    }
    Ok(map)
}

fn eval(a: &EvalArgs) -> CliResult<Outcome> {
    let mut names = Vec::new();
    let mut paths = Vec::new();
    for v in &a.variants {
        let Some((name, path)) = v.split_once('=') else {
            return Err(CliError::usage(format!("--variant expects name=path, got {v:?}")));
        };
        if names.iter().any(|n| n == name) {
            return Err(CliError::usage(format!("variant {name:?} given twice")));
        }
        names.push(name.to_string());
        paths.push(PathBuf::from(path));
    }
    if !names.iter().any(|n| n == "raw") {
        return Err(CliError::usage("a raw variant is required"));
    }
    if a.task == Task::BinaryClassification && a.labels.is_none() {
        return Err(CliError::usage("classification needs --labels"));
    }
    // Every file must exist before any training starts.
    for p in &paths {
        if !p.exists() {
            return Err(CliError::data(format!("missing variant file {}", p.display())));
        }
    }
    let mut tables = BTreeMap::new();
    for (n, p) in names.iter().zip(&paths) {
        tables.insert(n.clone(), read_table(p)?);
    }
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let plan = ExperimentPlan {
        task: a.task,
        source: a.source.clone(),
        target: a.target.clone(),
        variants: names.iter().filter(|n| *n != "raw").cloned().chain(["raw".to_string()]).collect(),
        folds: a.folds,
        seed: a.seed,
        mlp: MlpConfig {
            epochs: a.epochs,
            ..MlpConfig::default()
        },
    };
    let report = run_plan(&plan, &tables, labels.as_ref())?;
    fs::write(&a.out, report.to_csv())?;
    let json = sibling(&a.out, "json");
    write_json(&json, &report)?;
    print!("{}", report.render());
    Ok(Outcome {
        primary: Some(a.out.clone()),
        outputs: vec![a.out.clone(), json],
        seed: Some(a.seed),
    })
}

#[derive(Serialize)]
struct ModelDensity {
    path: PathBuf,
    flow: String,
    mean_log_likelihood: f64,
    rows_used: usize,
    flagged: usize,
}

#[derive(Serialize)]
struct FeatureHistograms {
    feature: String,
    lo: f64,
    hi: f64,
    /// Observed data, one histogram per site.
    data: Vec<Histogram>,
    /// Samples from each model, one histogram per site, in `models` order.
    models: Vec<Vec<Histogram>>,
}

#[derive(Serialize)]
struct DensityReport {
    bins: usize,
    models: Vec<ModelDensity>,
    features: Vec<FeatureHistograms>,
}

fn per_site(table: &DataTable, j: usize, k: usize, lo: f64, hi: f64) -> Vec<Histogram> {
    (0..k)
        .map(|s| {
            let v: Vec<f64> = table.rows_at_site(s).into_iter().map(|i| table.row(i)[j]).collect();
            Histogram::new(&v, lo, hi, HIST_BINS)
        })
        .collect()
}

fn density_report(a: &DensityArgs) -> CliResult<Outcome> {
    let data = read_table(&a.data)?;
    let models = a.models.iter().map(|p| ScmModel::load(p)).collect::<Result<Vec<_>, _>>()?;
    let k = models.iter().map(|m| m.spec.n_sites).max().unwrap_or(1).max(data.n_sites());
    let mut densities = Vec::new();
    let mut samples = Vec::new();
    for (p, m) in a.models.iter().zip(&models) {
        let ll = m.log_likelihood(&data)?;
        println!("{}\t{}\t{:.6}\t{}", p.display(), m.spec.x_flow_kind.short_name(), ll.mean, ll.rows_used);
        densities.push(ModelDensity {
            path: p.clone(),
            flow: m.spec.x_flow_kind.short_name().into(),
            mean_log_likelihood: ll.mean,
            rows_used: ll.rows_used,
            flagged: ll.flagged.len(),
        });
        samples.push(m.sample_observational(data.len(), a.seed)?);
    }
    let features = (0..data.dim)
        .map(|j| {
            let col = data.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            FeatureHistograms {
                feature: feature_name(j),
                lo,
                hi,
                data: per_site(&data, j, k, lo, hi),
                models: samples.iter().map(|s| per_site(s, j, k, lo, hi)).collect(),
            }
        })
        .collect();
    let report = DensityReport {
        bins: HIST_BINS,
        models: densities,
        features,
    };
    match &a.out {
        Some(path) => {
            write_json(path, &report)?;
            Ok(Outcome {
                primary: Some(path.clone()),
                outputs: vec![path.clone()],
                seed: Some(a.seed),
            })
        }
        None => {
            println!("{}", serde_json::to_string(&report)?);
            Ok(Outcome {
                primary: None,
                outputs: Vec::new(),
                seed: Some(a.seed),
            })
        }
    }
}
