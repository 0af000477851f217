//! Flow-based structural causal model over sex `s`, age `a`, site `t` and
//! features `x`.
//!
//! `s`, `a` and `t` are roots and `x` has parents `{s, a, t}`. Sex and site
//! are learned categorical masses whose assignments are the identity on
//! their noise. Age is `a = offset + scale * exp(m + v * g(eps_a))` with a
//! learned elementwise spline `g` and fixed log-space normalization
//! `(m, v)`. Features are z-scored with training statistics and generated by
//! a conditional flow whose context is `[s, standardized age, one-hot t]`.

mod io;

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::FormatError;
use crate::data::DataTable;
use crate::flows::{Flow, FlowError, SplineKind};
use crate::numkit::optim::{Adam, MultiStepLr};
use crate::numkit::{log_sum_exp, softplus, NumError, ParamId, ParamStore, Tape, Tensor, Var};

pub use io::{MODEL_MAGIC, MODEL_VERSION};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("site {site} has {count} training rows; at least 2 are required")]
    TooFewRows { site: usize, count: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("row {row}: {detail}")]
    Domain { row: usize, detail: String },
    #[error("intervention site {site} is out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("model file: {0}")]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<NumError> for ScmError {
    fn from(e: NumError) -> Self {
        ScmError::Flow(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XFlowKind {
    ConditionalAffine,
    LinearRationalSpline,
    QuadraticRationalSpline,
}

impl XFlowKind {
    pub const ALL: [XFlowKind; 3] = [
        XFlowKind::ConditionalAffine,
        XFlowKind::LinearRationalSpline,
        XFlowKind::QuadraticRationalSpline,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            XFlowKind::ConditionalAffine => "affine",
            XFlowKind::LinearRationalSpline => "lspline",
            XFlowKind::QuadraticRationalSpline => "qspline",
        }
    }
}

impl fmt::Display for XFlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for XFlowKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" | "conditional-affine" => Ok(XFlowKind::ConditionalAffine),
            "lspline" | "linear-rational-spline" => Ok(XFlowKind::LinearRationalSpline),
            "qspline" | "quadratic-rational-spline" => Ok(XFlowKind::QuadraticRationalSpline),
            other => Err(format!("unknown flow kind {other:?} (expected affine, lspline or qspline)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub n_sites: usize,
    pub feature_dim: usize,
    /// `(offset, scale)` applied after the exponential.
    pub age_rescale: (f64, f64),
    pub x_flow_kind: XFlowKind,
}

impl ScmSpec {
    pub fn new(n_sites: usize, feature_dim: usize, x_flow_kind: XFlowKind) -> Self {
        Self {
            n_sites,
            feature_dim,
            age_rescale: (0.0, 1.0),
            x_flow_kind,
        }
    }

    pub fn validate(&self) -> Result<(), ScmError> {
        if self.n_sites == 0 || self.feature_dim == 0 {
            return Err(ScmError::Invalid("need at least one site and one feature".into()));
        }
        let (off, scale) = self.age_rescale;
        if !(scale > 0.0) || !off.is_finite() || !scale.is_finite() {
            return Err(ScmError::Invalid(format!("age rescale scale must be positive, got {scale}")));
        }
        Ok(())
    }

    /// Width of the feature flow's context vector.
    pub fn context_dim(&self) -> usize {
        2 + self.n_sites
    }
}

/// Training-split statistics baked into the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub log_age_loc: f64,
    pub log_age_scale: f64,
    pub age_mean: f64,
    pub age_std: f64,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Self {
            log_age_loc: 0.0,
            log_age_scale: 1.0,
            age_mean: 0.0,
            age_std: 1.0,
            feat_mean: vec![0.0; d],
            feat_std: vec![1.0; d],
        }
    }

    fn from_rows(data: &DataTable, rows: &[usize], rescale: (f64, f64)) -> Self {
        let n = rows.len() as f64;
        let moments = |vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = vals.collect();
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            (m, if var > 0.0 { var.sqrt() } else { 1.0 })
        };
        let (log_age_loc, log_age_scale) = moments(&mut rows.iter().map(|&i| ((data.age[i] - rescale.0) / rescale.1).ln()));
        let (age_mean, age_std) = moments(&mut rows.iter().map(|&i| data.age[i]));
        let (feat_mean, feat_std) = (0..data.dim)
            .map(|j| moments(&mut rows.iter().map(|&i| data.row(i)[j])))
            .unzip();
        Self {
            log_age_loc,
            log_age_scale,
            age_mean,
            age_std,
            feat_mean,
            feat_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 3e-4,
            weight_decay: 1e-4,
            milestones: vec![0.5, 0.75],
            gamma: 0.1,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_log_likelihood: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    pub val_log_likelihood: Vec<f64>,
}

/// Exogenous noise of one row. Abduction is exact, so this is the whole
/// posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    pub sex: u8,
    pub age: f64,
    pub site: usize,
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Intervention {
    pub site: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LikelihoodReport {
    pub mean: f64,
    pub rows_used: usize,
    /// Rows whose age lies outside the image of the age assignment.
    pub flagged: Vec<usize>,
    pub mean_sex: f64,
    pub mean_age: f64,
    pub mean_site: f64,
    pub mean_features: f64,
}

#[derive(Clone, Debug)]
pub struct ScmModel {
    pub spec: ScmSpec,
    pub norm: Normalization,
    pub meta: TrainMeta,
    store: ParamStore,
    sex_logit: ParamId,
    site_logits: ParamId,
    age_flow: Flow,
    x_flow: Flow,
}

impl ScmModel {
    /// Untrained model: fair masses and identity flows.
    pub fn new(spec: ScmSpec, norm: Normalization, seed: u64) -> Result<Self, ScmError> {
        spec.validate()?;
        let d = spec.feature_dim;
        if norm.feat_mean.len() != d || norm.feat_std.len() != d {
            return Err(ScmError::Invalid("normalization width does not match the spec".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sex_logit = store.add("sex.logit", Tensor::vector(vec![0.0]));
        let site_logits = store.add("site.logits", Tensor::vector(vec![0.0; spec.n_sites]));
        let age_flow = Flow::elementwise_spline(&mut store, "age.spline", SplineKind::LinearRational, 1);
        let c = spec.context_dim();
        let x_flow = match spec.x_flow_kind {
            XFlowKind::ConditionalAffine => Flow::conditional_affine(&mut store, "x.affine", d, c, &mut rng),
            XFlowKind::LinearRationalSpline => Flow::spline(&mut store, "x.spline", SplineKind::LinearRational, d, c, &mut rng),
            XFlowKind::QuadraticRationalSpline => {
                Flow::spline(&mut store, "x.spline", SplineKind::QuadraticRational, d, c, &mut rng)
            }
        };
        Ok(Self {
            spec,
            norm,
            meta: TrainMeta::default(),
            store,
            sex_logit,
            site_logits,
            age_flow,
            x_flow,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn sex_prob(&self) -> f64 {
        crate::numkit::sigmoid(self.store.value(self.sex_logit).data()[0])
    }

    pub fn site_probs(&self) -> Vec<f64> {
        let l = self.store.value(self.site_logits).data();
        let z = log_sum_exp(l);
        l.iter().map(|v| (v - z).exp()).collect()
    }

    /// Lower bound of the age assignment's image.
    pub fn age_lower_bound(&self) -> f64 {
        self.spec.age_rescale.0
    }

    fn check_table(&self, data: &DataTable) -> Result<(), ScmError> {
        if data.dim != self.spec.feature_dim {
            return Err(ScmError::Invalid(format!(
                "table has {} features, model expects {}",
                data.dim, self.spec.feature_dim
            )));
        }
        if let Some(i) = data.site.iter().position(|&t| t >= self.spec.n_sites) {
            return Err(ScmError::Invalid(format!(
                "row {i}: site {} unknown to a model with {} sites",
                data.site[i], self.spec.n_sites
            )));
        }
        if let Some(i) = (0..data.len()).find(|&i| data.row(i).iter().any(|v| !v.is_finite()) || !data.age[i].is_finite()) {
            return Err(ScmError::Invalid(format!("row {i}: non-finite value")));
        }
        Ok(())
    }

    fn context_row(&self, sex: u8, age: f64, site: usize, out: &mut Vec<f64>) {
        out.push(f64::from(sex));
        out.push((age - self.norm.age_mean) / self.norm.age_std);
        out.extend((0..self.spec.n_sites).map(|k| if k == site { 1.0 } else { 0.0 }));
    }

    fn context(&self, data: &DataTable, rows: &[usize], site: Option<usize>) -> Tensor {
        let mut c = Vec::with_capacity(rows.len() * self.spec.context_dim());
        for &i in rows {
            self.context_row(data.sex[i], data.age[i], site.unwrap_or(data.site[i]), &mut c);
        }
        Tensor::new(vec![rows.len(), self.spec.context_dim()], c).expect("context shape")
    }

    fn standardized(&self, data: &DataTable, rows: &[usize]) -> Tensor {
        let d = self.spec.feature_dim;
        let mut z = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            z.extend(
                data.row(i)
                    .iter()
                    .zip(self.norm.feat_mean.iter().zip(&self.norm.feat_std))
                    .map(|(x, (m, s))| (x - m) / s),
            );
        }
        Tensor::new(vec![rows.len(), d], z).expect("feature shape")
    }

    fn destandardize(&self, z: &[f64], out: &mut [f64]) {
        for (j, (o, v)) in out.iter_mut().zip(z).enumerate() {
            *o = v * self.norm.feat_std[j] + self.norm.feat_mean[j];
        }
    }

    /// Normalized log-age, the input of the age spline.
    fn age_latent(&self, age: f64) -> Option<f64> {
        let (off, scale) = self.spec.age_rescale;
        let u = (age - off) / scale;
        (u > 0.0).then(|| (u.ln() - self.norm.log_age_loc) / self.norm.log_age_scale)
    }

    /// `-ln |da / dz|` for the fixed part of the age assignment.
    fn age_fixed_log_jac(&self, age: f64) -> f64 {
        -((age - self.spec.age_rescale.0).ln() + self.norm.log_age_scale.ln())
    }

    /// Summed log-likelihood of `rows` on the tape.
    fn total_log_prob_tape(&self, tape: &mut Tape, data: &DataTable, rows: &[usize]) -> Result<Var, ScmError> {
        let n = rows.len() as f64;
        let k = self.spec.n_sites;

        let l = tape.param(&self.store, self.sex_logit);
        let n_male: f64 = rows.iter().map(|&i| f64::from(data.sex[i])).sum();
        let a = tape.mul_scalar(l, n_male)?;
        let sp = tape.softplus(l)?;
        let b = tape.mul_scalar(sp, n)?;
        let sex = tape.sub(a, b)?;
        let sex = tape.sum(sex)?;

        let logits = tape.param(&self.store, self.site_logits);
        let logp = tape.log_softmax_last(logits)?;
        let mut counts = vec![0.0; k];
        for &i in rows {
            counts[data.site[i]] += 1.0;
        }
        let counts = tape.constant(Tensor::vector(counts));
        let site = tape.mul(logp, counts)?;
        let site = tape.sum(site)?;

        let mut z = Vec::with_capacity(rows.len());
        let mut fixed = 0.0;
        for &i in rows {
            let a = data.age[i];
            let latent = self.age_latent(a).ok_or_else(|| ScmError::Domain {
                row: i,
                detail: format!("age {a} is outside the image of the age assignment"),
            })?;
            z.push(latent);
            fixed += self.age_fixed_log_jac(a);
        }
        let zv = tape.constant(Tensor::new(vec![rows.len(), 1], z)?);
        let age = self.age_flow.log_prob_tape(tape, &self.store, zv, None)?;
        let age = tape.sum(age)?;
        let age = tape.add_scalar(age, fixed)?;

        let x = tape.constant(self.standardized(data, rows));
        let ctx = tape.constant(self.context(data, rows, None));
        let feat = self.x_flow.log_prob_tape(tape, &self.store, x, Some(ctx))?;
        let feat = tape.sum(feat)?;
        let log_std: f64 = self.norm.feat_std.iter().map(|s| s.ln()).sum();
        let feat = tape.add_scalar(feat, -n * log_std)?;

        let t = tape.add(sex, site)?;
        let t = tape.add(t, age)?;
        Ok(tape.add(t, feat)?)
    }

    /// Per-term and total mean log-likelihood over the rows of `data`.
    pub fn log_likelihood(&self, data: &DataTable) -> Result<LikelihoodReport, ScmError> {
        self.check_table(data)?;
        let (flagged, rows): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| self.age_latent(data.age[i]).is_none());
        if rows.is_empty() {
            return Err(ScmError::Invalid("no rows with a valid age".into()));
        }
        let n = rows.len() as f64;
        let l = self.store.value(self.sex_logit).data()[0];
        let sex: f64 = rows.iter().map(|&i| f64::from(data.sex[i]) * l - softplus(l)).sum();
        let logits = self.store.value(self.site_logits).data();
        let zt = log_sum_exp(logits);
        let site: f64 = rows.iter().map(|&i| logits[data.site[i]] - zt).sum();

        let z: Vec<f64> = rows.iter().map(|&i| self.age_latent(data.age[i]).unwrap()).collect();
        let zt_age = Tensor::new(vec![rows.len(), 1], z)?;
        let age_lp = self.age_flow.log_prob(&self.store, &zt_age, None)?;
        let age: f64 = rows
            .iter()
            .zip(&age_lp)
            .map(|(&i, lp)| lp + self.age_fixed_log_jac(data.age[i]))
            .sum();

        let x = self.standardized(data, &rows);
        let ctx = self.context(data, &rows, None);
        let lp = self.x_flow.log_prob(&self.store, &x, Some(&ctx))?;
        let log_std: f64 = self.norm.feat_std.iter().map(|s| s.ln()).sum();
        let feat: f64 = lp.iter().sum::<f64>() - n * log_std;

        Ok(LikelihoodReport {
            mean: (sex + site + age + feat) / n,
            rows_used: rows.len(),
            flagged,
            mean_sex: sex / n,
            mean_age: age / n,
            mean_site: site / n,
            mean_features: feat / n,
        })
    }

    /// Exact noise posterior (a point mass) for every row.
    pub fn abduct(&self, data: &DataTable) -> Result<Vec<NoiseVector>, ScmError> {
        self.check_table(data)?;
        let rows: Vec<usize> = (0..data.len()).collect();
        let mut ages = Vec::with_capacity(rows.len());
        for &i in &rows {
            ages.push(self.age_latent(data.age[i]).ok_or_else(|| ScmError::Domain {
                row: i,
                detail: format!("age {} is outside the image of the age assignment", data.age[i]),
            })?);
        }
        let (eps_a, _) = self.age_flow.inverse(&self.store, &Tensor::new(vec![rows.len(), 1], ages)?, None)?;
        let (eps_x, _) = self.x_flow.inverse(&self.store, &self.standardized(data, &rows), Some(&self.context(data, &rows, None)))?;
        let d = self.spec.feature_dim;
        Ok(rows
            .iter()
            .map(|&i| NoiseVector {
                sex: data.sex[i],
                age: eps_a.data()[i],
                site: data.site[i],
                x: eps_x.data()[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }

    /// Runs every assignment forward from the given noises.
    pub fn predict(&self, noise: &[NoiseVector]) -> Result<DataTable, ScmError> {
        let n = noise.len();
        let d = self.spec.feature_dim;
        for v in noise {
            if v.site >= self.spec.n_sites {
                return Err(ScmError::SiteOutOfRange {
                    site: v.site,
                    n_sites: self.spec.n_sites,
                });
            }
            if v.x.len() != d {
                return Err(ScmError::Invalid(format!("noise width {} does not match {d}", v.x.len())));
            }
        }
        let eps_a = Tensor::new(vec![n, 1], noise.iter().map(|v| v.age).collect())?;
        let (za, _) = self.age_flow.forward(&self.store, &eps_a, None)?;
        let (off, scale) = self.spec.age_rescale;
        let ages: Vec<f64> = za
            .data()
            .iter()
            .map(|z| off + scale * (self.norm.log_age_loc + self.norm.log_age_scale * z).exp())
            .collect();
        let mut ctx = Vec::with_capacity(n * self.spec.context_dim());
        for (v, &a) in noise.iter().zip(&ages) {
            self.context_row(v.sex, a, v.site, &mut ctx);
        }
        let ctx = Tensor::new(vec![n, self.spec.context_dim()], ctx)?;
        let eps_x = Tensor::new(vec![n, d], noise.iter().flat_map(|v| v.x.iter().copied()).collect())?;
        let (z, _) = self.x_flow.forward(&self.store, &eps_x, Some(&ctx))?;
        let mut table = DataTable::empty(d);
        let mut x = vec![0.0; d];
        for (i, v) in noise.iter().enumerate() {
            self.destandardize(&z.data()[i * d..(i + 1) * d], &mut x);
            table.push(format!("m{i:06}"), v.sex, ages[i], v.site, &x);
        }
        Ok(table)
    }

    /// Features under `do(t = iv.site)` for every row, in input order.
    ///
    /// The noise posterior is a point mass, so all `mc_samples` draws
    /// coincide and their mean is the single prediction.
    pub fn counterfactual(&self, data: &DataTable, iv: Intervention, mc_samples: usize) -> Result<Vec<f64>, ScmError> {
        self.check_table(data)?;
        if iv.site >= self.spec.n_sites {
            return Err(ScmError::SiteOutOfRange {
                site: iv.site,
                n_sites: self.spec.n_sites,
            });
        }
        if mc_samples == 0 {
            return Err(ScmError::Invalid("mc_samples must be positive".into()));
        }
        let rows: Vec<usize> = (0..data.len()).collect();
        let (eps, _) = self.x_flow.inverse(&self.store, &self.standardized(data, &rows), Some(&self.context(data, &rows, None)))?;
        let (z, _) = self.x_flow.forward(&self.store, &eps, Some(&self.context(data, &rows, Some(iv.site))))?;
        let d = self.spec.feature_dim;
        let mut out = vec![0.0; data.len() * d];
        for (zr, o) in z.data().chunks(d).zip(out.chunks_mut(d)) {
            self.destandardize(zr, o);
        }
        Ok(out)
    }

    /// Ancestral sample of `n` rows.
    pub fn sample_observational(&self, n: usize, seed: u64) -> Result<DataTable, ScmError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = self.sex_prob();
        let sites = WeightedIndex::new(self.site_probs()).map_err(|e| ScmError::Invalid(e.to_string()))?;
        let d = self.spec.feature_dim;
        let noise: Vec<NoiseVector> = (0..n)
            .map(|_| NoiseVector {
                sex: u8::from(rng.random_bool(p)),
                site: sites.sample(&mut rng),
                age: rng.sample(StandardNormal),
                x: (0..d).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect();
        self.predict(&noise)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Splits row indices into train and validation sets, stratified by site.
fn stratified_split(data: &DataTable, k: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for t in 0..k {
        let mut rows = data.rows_at_site(t);
        rows.shuffle(rng);
        let n_val = ((rows.len() as f64 * val_fraction).round() as usize).min(rows.len() - 1);
        let n_val = if val_fraction > 0.0 { n_val.max(1).min(rows.len() - 1) } else { 0 };
        val.extend_from_slice(&rows[..n_val]);
        train.extend_from_slice(&rows[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Maximum-likelihood fit of every assignment jointly. The returned model
/// holds the parameters of the epoch with the best validation
/// log-likelihood.
pub fn fit(data: &DataTable, spec: ScmSpec, cfg: &TrainConfig) -> Result<ScmModel, ScmError> {
    fit_with_progress(data, spec, cfg, |_, _, _| {})
}

/// [`fit`] with a callback receiving `(epoch, train loss, validation log-likelihood)`.
pub fn fit_with_progress<F>(data: &DataTable, spec: ScmSpec, cfg: &TrainConfig, mut progress: F) -> Result<ScmModel, ScmError>
where
    F: FnMut(usize, f64, f64),
{
    spec.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(ScmError::Invalid("epochs, batch size and lr must be positive; val fraction in [0, 1)".into()));
    }
    let k = spec.n_sites;
    let probe = ScmModel::new(spec.clone(), Normalization::identity(spec.feature_dim), cfg.seed)?;
    probe.check_table(data)?;
    for (site, &count) in data.site_counts(k).iter().enumerate() {
        if count < 2 {
            return Err(ScmError::TooFewRows { site, count });
        }
    }
    if let Some(i) = (0..data.len()).find(|&i| probe.age_latent(data.age[i]).is_none()) {
        return Err(ScmError::Domain {
            row: i,
            detail: format!("age {} is outside the image of the age assignment", data.age[i]),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, val) = stratified_split(data, k, cfg.val_fraction, &mut rng);
    let norm = Normalization::from_rows(data, &train, spec.age_rescale);
    let mut model = ScmModel::new(spec, norm, cfg.seed)?;

    // Start the masses at their closed-form optimum on the training split.
    let n_train = train.len() as f64;
    let p_male = train.iter().map(|&i| f64::from(data.sex[i])).sum::<f64>() / n_train;
    model.store.get_mut(model.sex_logit).value = Tensor::vector(vec![logit(p_male)]);
    let mut counts = vec![0.0; k];
    for &i in &train {
        counts[data.site[i]] += 1.0;
    }
    model.store.get_mut(model.site_logits).value = Tensor::vector(counts.iter().map(|c| (c / n_train).ln()).collect());

    let val_table = (!val.is_empty()).then(|| data.subset(&val));
    let fallback_rows = train.clone();
    let val_ll = |m: &ScmModel| -> Result<f64, ScmError> {
        match &val_table {
            Some(v) => Ok(m.log_likelihood(v)?.mean),
            None => Ok(-m.train_loss_eval(data, &fallback_rows)?),
        }
    };

    let sched = MultiStepLr::new(cfg.lr, cfg.gamma, cfg.epochs, &cfg.milestones);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut best = (val_ll(&model)?, 0usize, model.store.snapshot());
    let mut meta = TrainMeta::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        opt.lr = sched.lr_at(epoch);
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in train.chunks(cfg.batch_size).enumerate() {
            tape.clear();
            let total = model.total_log_prob_tape(&mut tape, data, batch)?;
            let loss = tape.mul_scalar(total, -1.0 / batch.len() as f64)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(ScmError::NonFiniteLoss { epoch, batch: b });
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
        if let Some(name) = model.store.first_non_finite(&ids) {
            return Err(FlowError::NonFiniteParam(name.to_string()).into());
        }
        let epoch_loss = loss_sum / seen as f64;
        let v = val_ll(&model)?;
        meta.train_loss.push(epoch_loss);
        meta.val_log_likelihood.push(v);
        progress(epoch, epoch_loss, v);
        if v > best.0 {
            best = (v, epoch + 1, model.store.snapshot());
        }
    }
    model.store.restore(&best.2);
    model.store.zero_grad();
    meta.epochs = cfg.epochs;
    meta.best_epoch = best.1;
    meta.best_val_log_likelihood = best.0;
    model.meta = meta;
    Ok(model)
}

impl ScmModel {
    fn train_loss_eval(&self, data: &DataTable, rows: &[usize]) -> Result<f64, ScmError> {
        let mut tape = Tape::new();
        let total = self.total_log_prob_tape(&mut tape, data, rows)?;
        Ok(-tape.value(total).data()[0] / rows.len() as f64)
    }
}
