//! Ground-truth generators with exact counterfactuals.
//!
//! Each row draws sex `s`, site `t`, age `a`, a latent disease flag `y` and
//! feature noise `eps`, then
//! `x = warp(mu_t + beta_s s + beta_a z(a) + beta_y y + exp(lambda_t) * eps)`
//! with `z(a)` the age standardized by the generator's own age moments and
//! `warp(v) = v + alpha tanh(v)`. Keeping `(y, eps)` per row makes any
//! intervention on `t` computable exactly.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::container::{Decoder, Encoder, FormatError};
use crate::data::DataTable;

const SIDECAR_MAGIC: &[u8] = b"CFNOISE";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown preset {0:?}; known presets: {known}", known = PRESETS.join(", "))]
    UnknownPreset(String),
    #[error("invalid generator spec: {0}")]
    Invalid(String),
    #[error("row {row}: site {site} is out of range for {n_sites} sites")]
    SiteOutOfRange { row: usize, site: usize, n_sites: usize },
    #[error("noise sidecar: {0}")]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub const PRESETS: &[&str] = &[
    "null",
    "two-site-shift",
    "linear-gaussian",
    "heteroskedastic",
    "location-scale",
    "combat-hostile",
    "istaging",
    "adni",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeDist {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub preset: String,
    pub n_sites: usize,
    pub dim: usize,
    /// Unnormalized site sampling weights.
    pub site_weights: Vec<f64>,
    pub site_loc: Vec<Vec<f64>>,
    pub site_log_scale: Vec<Vec<f64>>,
    pub beta_sex: Vec<f64>,
    pub beta_age: Vec<f64>,
    pub disease_prevalence: f64,
    pub beta_disease: Vec<f64>,
    /// Strength of the `tanh` warp; zero gives a linear generator.
    pub warp: f64,
    pub age: AgeDist,
    pub sex_prob: f64,
    pub seed: u64,
}

/// Per-row exogenous draws that are not visible in the table.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub disease: Vec<u8>,
    /// Row-major `n x dim`.
    pub eps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub table: DataTable,
    pub noise: Noise,
}

impl GeneratorSpec {
    fn base(preset: &str, k: usize, dim: usize, seed: u64) -> Self {
        Self {
            preset: preset.to_string(),
            n_sites: k,
            dim,
            site_weights: vec![1.0; k],
            site_loc: vec![vec![0.0; dim]; k],
            site_log_scale: vec![vec![0.0; dim]; k],
            beta_sex: vec![0.0; dim],
            beta_age: vec![0.0; dim],
            disease_prevalence: 0.0,
            beta_disease: vec![0.0; dim],
            warp: 0.0,
            age: AgeDist {
                mean: 60.0,
                std: 10.0,
                min: 20.0,
                max: 95.0,
            },
            sex_prob: 0.5,
            seed,
        }
    }

    /// Named preset; `dim` overrides the preset's default width.
    pub fn preset(name: &str, dim: Option<usize>, seed: u64) -> Result<Self, SynthError> {
        let wave = |j: usize, phase: f64| (0.9 * j as f64 + phase).cos();
        let spec = match name {
            "null" => Self::base(name, 2, dim.unwrap_or(16), seed),
            "two-site-shift" => {
                let d = dim.unwrap_or(16);
                let mut s = Self::base(name, 2, d, seed);
                s.site_loc[1] = vec![2.0; d];
                s.beta_sex = vec![0.3; d];
                s.beta_age = (0..d).map(|j| 0.8 * (1.0 + 0.25 * wave(j, 0.0))).collect();
                s
            }
            "linear-gaussian" => {
                let d = dim.unwrap_or(16);
                let mut s = Self::base(name, 2, d, seed);
                s.site_loc[1] = vec![2.0; d];
                s.beta_sex = vec![0.5; d];
                s.beta_age = (0..d).map(|j| 0.5 * wave(j, 0.3)).collect();
                s
            }
            "heteroskedastic" => {
                let d = dim.unwrap_or(8);
                let mut s = Self::base(name, 3, d, seed);
                s.site_weights = vec![0.4, 0.35, 0.25];
                for t in 0..3 {
                    s.site_loc[t] = (0..d).map(|j| 0.8 * wave(j, t as f64 * 2.1)).collect();
                    s.site_log_scale[t] = (0..d).map(|j| 0.35 * wave(j, 1.0 + t as f64 * 1.7)).collect();
                }
                s.beta_sex = vec![0.3; d];
                s.beta_age = (0..d).map(|j| 0.6 * wave(j, 0.5)).collect();
                s.disease_prevalence = 0.4;
                s.beta_disease = (0..d).map(|j| 3.0 + 0.5 * wave(j, 2.0)).collect();
                s.warp = 0.8;
                s
            }
            "location-scale" => {
                let d = dim.unwrap_or(16);
                let mut s = Self::base(name, 3, d, seed);
                s.site_weights = vec![0.4, 0.35, 0.25];
                let shift = [0.0, 1.0, -1.0];
                let scale = [0.0, 1.5f64.ln(), 0.7f64.ln()];
                for t in 0..3 {
                    s.site_loc[t] = (0..d).map(|j| shift[t] * (1.0 + 0.3 * wave(j, 0.0))).collect();
                    s.site_log_scale[t] = vec![scale[t]; d];
                }
                s.beta_sex = vec![2.0; d];
                s.beta_age = (0..d).map(|j| 0.8 * wave(j, 0.7)).collect();
                s
            }
            "combat-hostile" => {
                // Site 0 sits in the linear regime of the warp and site 1 on
                // its steep part, so the site effect bends differently for
                // each sex. An additive sex term plus per-site location and
                // scale cannot undo that; a per-site quantile map can.
                let d = dim.unwrap_or(8);
                let mut s = Self::base(name, 2, d, seed);
                s.site_loc[0] = vec![-12.0; d];
                s.site_loc[1] = vec![-1.0; d];
                s.site_log_scale = vec![vec![0.3; d]; 2];
                s.beta_sex = (0..d).map(|j| if j % 2 == 0 { 2.0 } else { -2.0 }).collect();
                s.disease_prevalence = 0.3;
                s.beta_disease = vec![1.0; d];
                s.warp = 6.0;
                s
            }
            "istaging" => {
                let d = dim.unwrap_or(145);
                let mut s = Self::base(name, 4, d, seed);
                s.site_weights = vec![157.0, 960.0, 2202.0, 2739.0];
                s.age = AgeDist {
                    mean: 58.7,
                    std: 12.6,
                    min: 21.2,
                    max: 93.0,
                };
                s.sex_prob = 2787.0 / 6058.0;
                let mut rng = ChaCha8Rng::seed_from_u64(0x15_7a61);
                for t in 0..4 {
                    s.site_loc[t] = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    s.site_log_scale[t] = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
                }
                s.beta_sex = (0..d).map(|_| rng.random_range(0.0..0.6)).collect();
                s.beta_age = (0..d).map(|_| rng.random_range(-1.0..0.2)).collect();
                s.warp = 0.5;
                s
            }
            "adni" => {
                let d = dim.unwrap_or(145);
                let mut s = Self::base(name, 2, d, seed);
                s.site_weights = vec![422.0, 441.0];
                s.age = AgeDist {
                    mean: 74.4,
                    std: 6.6,
                    min: 55.0,
                    max: 90.9,
                };
                s.sex_prob = 441.0 / 863.0;
                s.disease_prevalence = 340.0 / 863.0;
                let mut rng = ChaCha8Rng::seed_from_u64(0xad_a1);
                for t in 0..2 {
                    s.site_loc[t] = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                    s.site_log_scale[t] = (0..d).map(|_| rng.random_range(-0.4..0.4)).collect();
                }
                s.beta_sex = (0..d).map(|_| rng.random_range(0.0..0.5)).collect();
                s.beta_age = (0..d).map(|_| rng.random_range(-0.6..0.1)).collect();
                s.beta_disease = (0..d).map(|_| rng.random_range(-0.8..0.0)).collect();
                s.warp = 0.5;
                s
            }
            other => return Err(SynthError::UnknownPreset(other.to_string())),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        let (k, d) = (self.n_sites, self.dim);
        if k == 0 || d == 0 {
            return bad("need at least one site and one feature".into());
        }
        if self.site_weights.len() != k || self.site_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("site weights must be positive, one per site".into());
        }
        for (name, rows) in [("site_loc", &self.site_loc), ("site_log_scale", &self.site_log_scale)] {
            if rows.len() != k || rows.iter().any(|r| r.len() != d) {
                return bad(format!("{name} must be {k} x {d}"));
            }
        }
        for (name, v) in [
            ("beta_sex", &self.beta_sex),
            ("beta_age", &self.beta_age),
            ("beta_disease", &self.beta_disease),
        ] {
            if v.len() != d {
                return bad(format!("{name} must have {d} entries"));
            }
        }
        if !(0.0..=1.0).contains(&self.disease_prevalence) || !(0.0..=1.0).contains(&self.sex_prob) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if self.warp < 0.0 {
            return bad("warp strength must be non-negative".into());
        }
        let a = &self.age;
        if !(a.std > 0.0 && a.min < a.max) {
            return bad("age distribution needs std > 0 and min < max".into());
        }
        Ok(())
    }

    fn age_normal(&self) -> Normal {
        Normal::new(self.age.mean, self.age.std).expect("validated age distribution")
    }

    pub fn generate(&self, n: usize) -> Generated {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sites = WeightedIndex::new(&self.site_weights).expect("validated weights");
        let normal = self.age_normal();
        let (p_lo, p_hi) = (normal.cdf(self.age.min), normal.cdf(self.age.max));
        let d = self.dim;
        let mut table = DataTable::empty(d);
        let mut noise = Noise {
            disease: Vec::with_capacity(n),
            eps: Vec::with_capacity(n * d),
        };
        let mut x = vec![0.0; d];
        for i in 0..n {
            let s = u8::from(rng.random_bool(self.sex_prob));
            let t = sites.sample(&mut rng);
            let u: f64 = rng.random();
            let a = normal
                .inverse_cdf(p_lo + u * (p_hi - p_lo))
                .clamp(self.age.min, self.age.max);
            let y = u8::from(rng.random_bool(self.disease_prevalence));
            let start = noise.eps.len();
            noise.eps.extend((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            self.features(s, a, t, y, &noise.eps[start..], &mut x);
            noise.disease.push(y);
            table.push(format!("s{i:06}"), s, a, t, &x);
        }
        Generated { table, noise }
    }

    pub fn standardized_age(&self, a: f64) -> f64 {
        (a - self.age.mean) / self.age.std
    }

    fn pre_warp_mean(&self, s: u8, a: f64, t: usize, y: u8, j: usize) -> f64 {
        self.site_loc[t][j]
            + self.beta_sex[j] * f64::from(s)
            + self.beta_age[j] * self.standardized_age(a)
            + self.beta_disease[j] * f64::from(y)
    }

    /// Structural assignment for the features given all exogenous inputs.
    pub fn features(&self, s: u8, a: f64, t: usize, y: u8, eps: &[f64], out: &mut [f64]) {
        for j in 0..self.dim {
            let v = self.pre_warp_mean(s, a, t, y, j) + self.site_log_scale[t][j].exp() * eps[j];
            out[j] = self.warp_fn(v);
        }
    }

    fn warp_fn(&self, v: f64) -> f64 {
        v + self.warp * v.tanh()
    }

    /// Solves `v + alpha tanh(v) = x`; the root lies within `alpha` of `x`.
    fn unwarp(&self, x: f64) -> f64 {
        if self.warp == 0.0 {
            return x;
        }
        let (mut lo, mut hi) = (x - self.warp, x + self.warp);
        let mut v = x - self.warp * x.tanh();
        for _ in 0..100 {
            let g = self.warp_fn(v) - x;
            if g == 0.0 {
                break;
            }
            if g > 0.0 {
                hi = v;
            } else {
                lo = v;
            }
            let slope = 1.0 + self.warp * (1.0 - v.tanh().powi(2));
            let mut next = v - g / slope;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - v).abs() <= 1e-15 * v.abs().max(1.0) {
                v = next;
                break;
            }
            v = next;
        }
        v
    }

    /// Features of row `i` had it been acquired at site `tau`.
    pub fn oracle_counterfactual(&self, table: &DataTable, noise: &Noise, i: usize, tau: usize) -> Result<Vec<f64>, SynthError> {
        if tau >= self.n_sites {
            return Err(SynthError::SiteOutOfRange {
                row: i,
                site: tau,
                n_sites: self.n_sites,
            });
        }
        let d = self.dim;
        let mut out = vec![0.0; d];
        self.features(
            table.sex[i],
            table.age[i],
            tau,
            noise.disease[i],
            &noise.eps[i * d..(i + 1) * d],
            &mut out,
        );
        Ok(out)
    }

    /// Oracle counterfactuals for every row.
    pub fn oracle_table(&self, gen: &Generated, tau: usize) -> Result<DataTable, SynthError> {
        let mut out = gen.table.clone();
        for i in 0..out.len() {
            let x = self.oracle_counterfactual(&gen.table, &gen.noise, i, tau)?;
            out.row_mut(i).copy_from_slice(&x);
            out.site[i] = tau;
        }
        out.orig_site = Some(gen.table.site.clone());
        Ok(out)
    }

    /// Exact log-density of one observed row, marginalizing the disease flag.
    pub fn log_likelihood_row(&self, s: u8, a: f64, t: usize, x: &[f64]) -> f64 {
        let lp_s = if s == 1 { self.sex_prob.ln() } else { (1.0 - self.sex_prob).ln() };
        let total: f64 = self.site_weights.iter().sum();
        let lp_t = (self.site_weights[t] / total).ln();
        let normal = self.age_normal();
        let mass = normal.cdf(self.age.max) - normal.cdf(self.age.min);
        let lp_a = if a < self.age.min || a > self.age.max {
            f64::NEG_INFINITY
        } else {
            normal.ln_pdf(a) - mass.ln()
        };

        let v: Vec<f64> = x.iter().map(|&xi| self.unwarp(xi)).collect();
        let log_jac: f64 = v.iter().map(|&vj| -(1.0 + self.warp * (1.0 - vj.tanh().powi(2))).ln()).sum();
        let component = |y: u8| -> f64 {
            (0..self.dim)
                .map(|j| {
                    let ls = self.site_log_scale[t][j];
                    let z = (v[j] - self.pre_warp_mean(s, a, t, y, j)) / ls.exp();
                    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - ls
                })
                .sum()
        };
        let p = self.disease_prevalence;
        let lp_x = if p == 0.0 {
            component(0)
        } else if p == 1.0 {
            component(1)
        } else {
            let (l0, l1) = ((1.0 - p).ln() + component(0), p.ln() + component(1));
            let m = l0.max(l1);
            m + ((l0 - m).exp() + (l1 - m).exp()).ln()
        };
        lp_s + lp_t + lp_a + lp_x + log_jac
    }

    pub fn mean_log_likelihood(&self, table: &DataTable) -> f64 {
        let n = table.len();
        (0..n)
            .map(|i| self.log_likelihood_row(table.sex[i], table.age[i], table.site[i], table.row(i)))
            .sum::<f64>()
            / n as f64
    }

    pub fn write_sidecar(&self, path: &Path, noise: &Noise) -> Result<(), SynthError> {
        std::fs::write(path, self.encode_sidecar(noise)).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn encode_sidecar(&self, noise: &Noise) -> Vec<u8> {
        let mut e = Encoder::new(SIDECAR_MAGIC, SIDECAR_VERSION);
        e.bytes(&serde_json::to_vec(self).expect("spec serializes"));
        e.u64(noise.disease.len() as u64);
        e.u64(self.dim as u64);
        for (i, &y) in noise.disease.iter().enumerate() {
            e.u8(y);
            e.f64s(&noise.eps[i * self.dim..(i + 1) * self.dim]);
        }
        e.finish()
    }

    pub fn read_sidecar(path: &Path) -> Result<(Self, Noise), SynthError> {
        let data = std::fs::read(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode_sidecar(&data)
    }

    pub fn decode_sidecar(data: &[u8]) -> Result<(Self, Noise), SynthError> {
        let mut dec = Decoder::open(data, SIDECAR_MAGIC, "noise sidecar", SIDECAR_VERSION)?;
        let spec: GeneratorSpec = serde_json::from_slice(dec.bytes()?)
            .map_err(|e| FormatError::Malformed(format!("generator spec: {e}")))?;
        spec.validate()?;
        let n = dec.usize()?;
        let d = dec.usize()?;
        if d != spec.dim {
            return Err(FormatError::Malformed(format!("noise width {d} does not match spec width {}", spec.dim)).into());
        }
        let mut noise = Noise {
            disease: Vec::with_capacity(n),
            eps: Vec::with_capacity(n * d),
        };
        for _ in 0..n {
            noise.disease.push(dec.u8()?);
            noise.eps.extend(dec.f64s(d)?);
        }
        dec.finish()?;
        Ok((spec, noise))
    }
}
