//! Cross-site generalization experiments: train the downstream MLP on one
//! set of sites and measure it on another, for each feature variant.

mod mlp;

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataTable;
use crate::numkit::NumError;

pub use mlp::{evaluate, layer_widths, metric, train_mlp, Mlp, MlpConfig, Task};

pub const TAR_ONLY: &str = "tar-only";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("classification labels contain a single class")]
    SingleClass,
    #[error("non-finite training loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("missing feature variant {0:?}")]
    MissingVariant(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub task: Task,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Variant names, e.g. `raw`, `combat`, `scm-qspline`.
    pub variants: Vec<String>,
    pub folds: usize,
    pub seed: u64,
    pub mlp: MlpConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    /// `Source` or `Target`.
    pub role: String,
    pub study: String,
    /// `SrcOnly` for models trained on the source sites, `TarOnly` for the
    /// target baseline.
    pub mode: String,
    pub variant: String,
    pub folds: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Target result better than the TarOnly baseline by more than two of
    /// its standard deviations.
    pub suspicious: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub metric: String,
    pub rows: Vec<ReportRow>,
}

fn sites_label(s: &[usize]) -> String {
    s.iter().map(|t| format!("site{t}")).collect::<Vec<_>>().join("+")
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

impl ExperimentReport {
    pub fn row(&self, role: &str, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.role == role && r.variant == variant)
    }

    /// Long format: one line per (role, variant, fold).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,source,target,role,mode,variant,fold,metric\n");
        for r in &self.rows {
            for (f, v) in r.folds.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.task,
                    sites_label(&self.source),
                    sites_label(&self.target),
                    r.role,
                    r.mode,
                    r.variant,
                    f,
                    v
                ));
            }
        }
        out
    }

    /// Human-readable table, one line per (role, variant) with mean and std.
    pub fn render(&self) -> String {
        let mut out = format!("{:<8} {:<16} {:<8} {:<14} {}\n", "role", "study", "mode", "variant", self.metric);
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:<16} {:<8} {:<14} {:.4} ({:.4}){}\n",
                r.role,
                r.study,
                r.mode,
                r.variant,
                r.mean,
                r.std,
                if r.suspicious { "  [suspicious]" } else { "" }
            ));
        }
        out
    }
}

struct Prepared {
    features: Vec<f64>,
    labels: Vec<f64>,
    folds: Vec<usize>,
    site: Vec<usize>,
}

fn prepare(
    table: &DataTable,
    task: Task,
    labels: Option<&HashMap<String, f64>>,
    fold_of: &HashMap<String, usize>,
) -> Result<Prepared, EvalError> {
    let site = table.orig_site.clone().unwrap_or_else(|| table.site.clone());
    let labels = match task {
        Task::AgeRegression => table.age.clone(),
        Task::BinaryClassification => {
            let map = labels.ok_or_else(|| EvalError::Invalid("classification needs a label file".into()))?;
            table
                .ids
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| EvalError::Invalid(format!("no label for subject {id}")))
                })
                .collect::<Result<_, _>>()?
        }
    };
    let folds = table.ids.iter().map(|id| fold_of[id.as_str()]).collect();
    Ok(Prepared {
        features: table.features.clone(),
        labels,
        folds,
        site,
    })
}

impl Prepared {
    fn pick(&self, dim: usize, keep: impl Fn(usize) -> bool) -> (Vec<f64>, Vec<f64>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..self.labels.len() {
            if keep(i) {
                x.extend_from_slice(&self.features[i * dim..(i + 1) * dim]);
                y.push(self.labels[i]);
            }
        }
        (x, y)
    }
}

enum Cell {
    SrcOnly { variant: usize, fold: usize },
    TarOnly { fold: usize },
}

/// Runs every (variant, fold) cell of `plan`. `variants` maps names to
/// tables that share subject ids; TarOnly always trains on `raw`.
pub fn run_plan(
    plan: &ExperimentPlan,
    variants: &BTreeMap<String, DataTable>,
    labels: Option<&HashMap<String, f64>>,
) -> Result<ExperimentReport, EvalError> {
    if plan.folds < 2 {
        return Err(EvalError::Invalid("need at least two folds".into()));
    }
    if plan.source.is_empty() || plan.target.is_empty() || plan.source.iter().any(|s| plan.target.contains(s)) {
        return Err(EvalError::Invalid("source and target sites must be non-empty and disjoint".into()));
    }
    for v in plan.variants.iter().map(String::as_str).chain(["raw"]) {
        if !variants.contains_key(v) {
            return Err(EvalError::MissingVariant(v.to_string()));
        }
    }

    // Folds are assigned per subject id, shared by all variants.
    let ids: Vec<String> = variants.values().flat_map(|t| t.ids.iter().cloned()).collect();
    let fold_of = fold_assignment(&ids, plan.folds, plan.seed);

    let names: Vec<&str> = plan.variants.iter().map(String::as_str).collect();
    let prepared: Vec<(Prepared, usize)> = names
        .iter()
        .chain(std::iter::once(&"raw"))
        .map(|n| {
            let t = &variants[*n];
            prepare(t, plan.task, labels, &fold_of).map(|p| (p, t.dim))
        })
        .collect::<Result<_, _>>()?;
    let raw = names.len();

    let mut cells: Vec<Cell> = Vec::new();
    for fold in 0..plan.folds {
        for variant in 0..names.len() {
            cells.push(Cell::SrcOnly { variant, fold });
        }
        cells.push(Cell::TarOnly { fold });
    }

    let is_src = |p: &Prepared, i: usize| plan.source.contains(&p.site[i]);
    let is_tgt = |p: &Prepared, i: usize| plan.target.contains(&p.site[i]);
    let results: Vec<(Option<f64>, f64)> = cells
        .par_iter()
        .map(|cell| {
            let (vi, fold, tar_only) = match *cell {
                Cell::SrcOnly { variant, fold } => (variant, fold, false),
                Cell::TarOnly { fold } => (raw, fold, true),
            };
            let (p, dim) = &prepared[vi];
            let train_site = |i: usize| if tar_only { is_tgt(p, i) } else { is_src(p, i) };
            let (xtr, ytr) = p.pick(*dim, |i| train_site(i) && p.folds[i] != fold);
            let cfg = MlpConfig {
                seed: plan.seed ^ (0x9e37_79b9 * (fold as u64 + 1)) ^ ((vi as u64 + 1) << 32),
                ..plan.mlp.clone()
            };
            let model = train_mlp(&xtr, *dim, &ytr, plan.task, &cfg)?;
            let score = |keep: &dyn Fn(usize) -> bool| -> Result<f64, EvalError> {
                let (x, y) = p.pick(*dim, |i| keep(i) && p.folds[i] == fold);
                if y.is_empty() {
                    return Err(EvalError::Invalid(format!("fold {fold} has no evaluation rows")));
                }
                evaluate(&model, &x, &y)
            };
            let src = if tar_only { None } else { Some(score(&|i| is_src(p, i))?) };
            let tgt = score(&|i| is_tgt(p, i))?;
            Ok((src, tgt))
        })
        .collect::<Result<_, EvalError>>()?;

    let per = names.len() + 1;
    let collect = |slot: usize, source: bool| -> Vec<f64> {
        (0..plan.folds)
            .map(|f| {
                let r = &results[f * per + slot];
                if source {
                    r.0.unwrap()
                } else {
                    r.1
                }
            })
            .collect()
    };

    let metric_name = match plan.task {
        Task::AgeRegression => "mae",
        Task::BinaryClassification => "accuracy",
    };
    let tar = collect(names.len(), false);
    let (tar_mean, tar_std) = mean_std(&tar);
    let better = |m: f64| match plan.task {
        Task::AgeRegression => tar_mean - m,
        Task::BinaryClassification => m - tar_mean,
    };
    let mut rows = Vec::new();
    for (vi, name) in names.iter().enumerate() {
        let folds = collect(vi, true);
        let (mean, std) = mean_std(&folds);
        rows.push(ReportRow {
            role: "Source".into(),
            study: sites_label(&plan.source),
            mode: "SrcOnly".into(),
            variant: name.to_string(),
            folds,
            mean,
            std,
            suspicious: false,
        });
    }
    for (vi, name) in names.iter().enumerate() {
        let folds = collect(vi, false);
        let (mean, std) = mean_std(&folds);
        rows.push(ReportRow {
            role: "Target".into(),
            study: sites_label(&plan.target),
            mode: "SrcOnly".into(),
            variant: name.to_string(),
            folds,
            mean,
            std,
            suspicious: better(mean) > 2.0 * tar_std,
        });
    }
    rows.push(ReportRow {
        role: "Target".into(),
        study: sites_label(&plan.target),
        mode: "TarOnly".into(),
        variant: TAR_ONLY.into(),
        folds: tar,
        mean: tar_mean,
        std: tar_std,
        suspicious: false,
    });
    Ok(ExperimentReport {
        task: plan.task,
        source: plan.source.clone(),
        target: plan.target.clone(),
        metric: metric_name.into(),
        rows,
    })
}

/// Subject ids assigned to each fold, for auditing fold disjointness.
pub fn fold_assignment(ids: &[String], folds: usize, seed: u64) -> HashMap<String, usize> {
    let mut sorted: Vec<&str> = ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    sorted.iter().enumerate().map(|(i, id)| (id.to_string(), i % folds)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::GeneratorSpec;

    fn plan(task: Task) -> ExperimentPlan {
        ExperimentPlan {
            task,
            source: vec![0],
            target: vec![1],
            variants: vec!["raw".into()],
            folds: 5,
            seed: 3,
            mlp: MlpConfig {
                epochs: 8,
                ..MlpConfig::default()
            },
        }
    }

    #[test]
    fn report_shape_and_determinism() {
        let g = GeneratorSpec::preset("null", Some(4), 1).unwrap().generate(600);
        let mut v = BTreeMap::new();
        v.insert("raw".to_string(), g.table.clone());
        let a = run_plan(&plan(Task::AgeRegression), &v, None).unwrap();
        let b = run_plan(&plan(Task::AgeRegression), &v, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 3);
        assert!(a.row("Target", TAR_ONLY).is_some());
        assert_eq!(a.to_csv().lines().count(), 1 + 3 * 5);
    }

    #[test]
    fn folds_partition_subjects() {
        let ids: Vec<String> = (0..103).map(|i| format!("s{i}")).collect();
        let f = fold_assignment(&ids, 5, 7);
        assert_eq!(f.len(), 103);
        let mut sizes = [0; 5];
        for v in f.values() {
            sizes[*v] += 1;
        }
        assert!(sizes.iter().all(|&s| s == 20 || s == 21));
    }

    #[test]
    fn rejects_bad_plans() {
        let g = GeneratorSpec::preset("null", Some(2), 1).unwrap().generate(100);
        let mut v = BTreeMap::new();
        v.insert("raw".to_string(), g.table.clone());
        let mut p = plan(Task::AgeRegression);
        p.variants.push("combat".into());
        assert!(matches!(run_plan(&p, &v, None), Err(EvalError::MissingVariant(_))));
        let mut p = plan(Task::AgeRegression);
        p.target = vec![0];
        assert!(run_plan(&p, &v, None).is_err());
        assert!(run_plan(&plan(Task::BinaryClassification), &v, None).is_err());
    }
}
