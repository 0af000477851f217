//! Dataset-level harmonization: every row is replaced by its counterfactual
//! under `do(t = reference)`.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::DataTable;
use crate::scm::{Intervention, ScmError, ScmModel};
use crate::stats::{mean, Histogram};

pub const HIST_BINS: usize = 50;
const ROWS_PER_TASK: usize = 256;

#[derive(Clone, Debug, Serialize)]
pub struct SkippedRow {
    pub row: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatureSummary {
    pub feature: usize,
    pub lo: f64,
    pub hi: f64,
    /// Indexed by site.
    pub pre_mean: Vec<f64>,
    pub pre_var: Vec<f64>,
    pub post_mean: Vec<f64>,
    pub post_var: Vec<f64>,
    pub pre_hist: Vec<Histogram>,
    pub post_hist: Vec<Histogram>,
}

#[derive(Clone, Debug, Serialize)]
pub struct HarmonizationReport {
    pub reference_site: usize,
    pub mc_samples: usize,
    pub rows_in: usize,
    pub rows_out: usize,
    /// Rows per original site.
    pub site_counts: Vec<usize>,
    pub skipped: Vec<SkippedRow>,
    pub features: Vec<FeatureSummary>,
}

/// Maps every row of `data` to site `reference`. Rows whose noise cannot be
/// abducted are left out of the output and listed in the report.
pub fn harmonize(
    model: &ScmModel,
    data: &DataTable,
    reference: usize,
    mc_samples: usize,
) -> Result<(DataTable, HarmonizationReport), ScmError> {
    let k = model.spec.n_sites;
    if data.dim != model.spec.feature_dim {
        return Err(ScmError::Invalid(format!(
            "table has {} features, model expects {}",
            data.dim, model.spec.feature_dim
        )));
    }
    if reference >= k {
        return Err(ScmError::SiteOutOfRange { site: reference, n_sites: k });
    }
    if let Some(i) = data.site.iter().position(|&t| t >= k) {
        return Err(ScmError::Invalid(format!("row {i}: site {} unknown to a model with {k} sites", data.site[i])));
    }

    let bound = model.age_lower_bound();
    let (kept, skipped): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| data.age[i] > bound);
    let skipped: Vec<SkippedRow> = skipped
        .into_iter()
        .map(|row| SkippedRow {
            row,
            id: data.ids[row].clone(),
            reason: format!("age {} is outside the image of the age assignment (> {bound})", data.age[row]),
        })
        .collect();
    let input = data.subset(&kept);
    // Orig site of an already harmonized table is its true acquisition site.
    let orig = data.orig_site.as_ref().map(|o| kept.iter().map(|&i| o[i]).collect::<Vec<_>>());

    let d = data.dim;
    let chunks: Vec<Vec<f64>> = (0..input.len())
        .collect::<Vec<_>>()
        .par_chunks(ROWS_PER_TASK)
        .map(|rows| model.counterfactual(&input.subset(rows), Intervention { site: reference }, mc_samples))
        .collect::<Result<_, _>>()?;
    let mut out = input.clone();
    out.features = chunks.concat();
    debug_assert_eq!(out.features.len(), input.len() * d);
    out.orig_site = Some(orig.unwrap_or_else(|| input.site.clone()));
    out.site = vec![reference; input.len()];

    let report = HarmonizationReport {
        reference_site: reference,
        mc_samples,
        rows_in: data.len(),
        rows_out: out.len(),
        site_counts: input.site_counts(k),
        skipped,
        features: summarize(&input, &out, k),
    };
    Ok((out, report))
}

fn summarize(pre: &DataTable, post: &DataTable, k: usize) -> Vec<FeatureSummary> {
    let by_site: Vec<Vec<usize>> = (0..k).map(|t| pre.rows_at_site(t)).collect();
    (0..pre.dim)
        .map(|j| {
            let a = pre.column(j);
            let b = post.column(j);
            let (lo, hi) = a
                .iter()
                .chain(&b)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let pick = |col: &[f64], rows: &[usize]| rows.iter().map(|&i| col[i]).collect::<Vec<_>>();
            let moments = |v: &[f64]| {
                if v.is_empty() {
                    return (f64::NAN, f64::NAN);
                }
                let m = mean(v);
                let var = if v.len() > 1 { crate::stats::variance(v, 1) } else { 0.0 };
                (m, var)
            };
            let mut s = FeatureSummary {
                feature: j,
                lo,
                hi,
                pre_mean: Vec::with_capacity(k),
                pre_var: Vec::with_capacity(k),
                post_mean: Vec::with_capacity(k),
                post_var: Vec::with_capacity(k),
                pre_hist: Vec::with_capacity(k),
                post_hist: Vec::with_capacity(k),
            };
            for rows in &by_site {
                let (x, y) = (pick(&a, rows), pick(&b, rows));
                let (m, v) = moments(&x);
                s.pre_mean.push(m);
                s.pre_var.push(v);
                let (m, v) = moments(&y);
                s.post_mean.push(m);
                s.post_var.push(v);
                s.pre_hist.push(Histogram::new(&x, lo, hi, HIST_BINS));
                s.post_hist.push(Histogram::new(&y, lo, hi, HIST_BINS));
            }
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{Normalization, ScmSpec, XFlowKind};
    use crate::synthdata::GeneratorSpec;

    fn model() -> ScmModel {
        let mut norm = Normalization::identity(3);
        norm.age_mean = 60.0;
        norm.age_std = 10.0;
        ScmModel::new(ScmSpec::new(2, 3, XFlowKind::LinearRationalSpline), norm, 1).unwrap()
    }

    #[test]
    fn rows_at_reference_are_unchanged() {
        let g = GeneratorSpec::preset("two-site-shift", Some(3), 2).unwrap().generate(300);
        let at0 = g.table.subset(&g.table.rows_at_site(0));
        let (out, report) = harmonize(&model(), &at0, 0, 32).unwrap();
        assert_eq!(report.rows_out, at0.len());
        for (a, b) in out.features.iter().zip(&at0.features) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(out.ids, at0.ids);
        assert_eq!(out.age, at0.age);
        assert_eq!(out.sex, at0.sex);
    }

    #[test]
    fn provenance_and_skips() {
        let mut t = GeneratorSpec::preset("two-site-shift", Some(3), 3).unwrap().generate(600).table;
        t.age[7] = 0.0;
        let (out, report) = harmonize(&model(), &t, 1, 1).unwrap();
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].row, 7);
        assert_eq!(out.len(), 599);
        assert!(out.site.iter().all(|&s| s == 1));
        let orig = out.orig_site.as_ref().unwrap();
        let kept: Vec<usize> = (0..600).filter(|&i| i != 7).collect();
        for (o, &i) in kept.iter().enumerate() {
            assert_eq!(out.ids[o], t.ids[i]);
            assert_eq!(orig[o], t.site[i]);
        }
        assert_eq!(report.features.len(), 3);
        assert_eq!(report.features[0].pre_hist[0].counts.len(), HIST_BINS);
        let total: u64 = report.features[0].pre_hist.iter().flat_map(|h| &h.counts).sum();
        assert_eq!(total, 599);
    }

    #[test]
    fn schema_errors_come_first() {
        let t = GeneratorSpec::preset("null", Some(4), 3).unwrap().generate(10).table;
        assert!(harmonize(&model(), &t, 0, 1).is_err());
        let mut t = GeneratorSpec::preset("null", Some(3), 3).unwrap().generate(10).table;
        assert!(harmonize(&model(), &t, 2, 1).is_err());
        t.site[3] = 5;
        assert!(harmonize(&model(), &t, 0, 1).is_err());
    }

    #[test]
    fn output_independent_of_thread_count() {
        let t = GeneratorSpec::preset("heteroskedastic", Some(3), 4).unwrap().generate(1500).table;
        let mut t = t;
        for s in t.site.iter_mut() {
            *s %= 2;
        }
        let m = model();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| harmonize(&m, &t, 0, 1).unwrap().0);
        let b = four.install(|| harmonize(&m, &t, 0, 1).unwrap().0);
        assert_eq!(a, b);
    }
}
