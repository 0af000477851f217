//! The downstream predictor: `d -> d/2 -> d/4 -> 1` with LeakyReLU(0.1).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numkit::loss::{bce_with_logits, huber, HUBER_DELTA};
use crate::numkit::nn::Linear;
use crate::numkit::optim::SgdMomentum;
use crate::numkit::{sigmoid, ParamStore, Tape, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    AgeRegression,
    BinaryClassification,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "age-regression" | "regression" => Ok(Task::AgeRegression),
            "binary-classification" | "classification" => Ok(Task::BinaryClassification),
            other => Err(format!("unknown task {other:?} (expected age-regression or binary-classification)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::AgeRegression => "age-regression",
            Task::BinaryClassification => "binary-classification",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Hidden widths for input width `d`; 145 gives the 72 and 36 of the
/// reference architecture.
pub fn layer_widths(d: usize) -> [usize; 4] {
    [d, (d / 2).max(2), (d / 4).max(2), 1]
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub task: Task,
    store: ParamStore,
    layers: Vec<Linear>,
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Mlp {
    fn new(task: Task, d: usize, in_mean: Vec<f64>, in_std: Vec<f64>, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let w = layer_widths(d);
        let layers = (0..3)
            .map(|l| Linear::uniform(&mut store, &format!("mlp.{l}"), w[l], w[l + 1], rng))
            .collect();
        Self {
            task,
            store,
            layers,
            in_mean,
            in_std,
            best_epoch: 0,
            best_val_loss: f64::INFINITY,
        }
    }

    pub fn dim(&self) -> usize {
        self.in_mean.len()
    }

    fn standardize(&self, features: &[f64], rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend(
                features[i * d..(i + 1) * d]
                    .iter()
                    .zip(self.in_mean.iter().zip(&self.in_std))
                    .map(|(x, (m, s))| (x - m) / s),
            );
        }
        Tensor::new(vec![rows.len(), d], out).expect("shape")
    }

    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var, EvalError> {
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h)?;
            if l + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        let n = tape.value(h).shape()[0];
        Ok(tape.reshape(h, &[n])?)
    }

    fn loss(&self, tape: &mut Tape, features: &[f64], labels: &[f64], rows: &[usize]) -> Result<Var, EvalError> {
        let x = tape.constant(self.standardize(features, rows));
        let out = self.logits(tape, x)?;
        let y = tape.constant(Tensor::vector(rows.iter().map(|&i| labels[i]).collect()));
        Ok(match self.task {
            Task::AgeRegression => huber(tape, out, y, HUBER_DELTA)?,
            Task::BinaryClassification => bce_with_logits(tape, out, y)?,
        })
    }

    /// Regression outputs, or probabilities of the positive class.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>, EvalError> {
        let d = self.dim();
        if features.len() % d != 0 {
            return Err(EvalError::Invalid(format!("feature buffer is not a multiple of width {d}")));
        }
        let rows: Vec<usize> = (0..features.len() / d).collect();
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(1024) {
            let mut tape = Tape::new();
            let x = tape.constant(self.standardize(features, chunk));
            let o = self.logits(&mut tape, x)?;
            out.extend(tape.value(o).data().iter().map(|&v| match self.task {
                Task::AgeRegression => v,
                Task::BinaryClassification => sigmoid(v),
            }));
        }
        Ok(out)
    }
}

/// Trains with SGD + momentum, keeping the epoch with the lowest loss on a
/// held-out tenth of the rows.
pub fn train_mlp(features: &[f64], dim: usize, labels: &[f64], task: Task, cfg: &MlpConfig) -> Result<Mlp, EvalError> {
    let n = labels.len();
    if dim == 0 || features.len() != n * dim {
        return Err(EvalError::Invalid(format!("{} values for {n} rows of width {dim}", features.len())));
    }
    if n < 2 {
        return Err(EvalError::Invalid("need at least two training rows".into()));
    }
    if features.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(EvalError::Invalid("non-finite feature or label".into()));
    }
    if task == Task::BinaryClassification {
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(EvalError::Invalid("classification labels must be 0 or 1".into()));
        }
        if labels.iter().all(|&y| y == labels[0]) {
            return Err(EvalError::SingleClass);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();

    let mut in_mean = vec![0.0; dim];
    let mut in_std = vec![0.0; dim];
    for j in 0..dim {
        let col: Vec<f64> = train.iter().map(|&i| features[i * dim + j]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        in_mean[j] = m;
        in_std[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
    }
    let mut model = Mlp::new(task, dim, in_mean, in_std, &mut rng);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum);
    let eval_rows: Vec<usize> = if val.is_empty() { train.clone() } else { val.to_vec() };
    let mut best = (f64::INFINITY, 0, model.store.snapshot());
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(cfg.batch_size) {
            tape.clear();
            let loss = model.loss(&mut tape, features, labels, batch)?;
            if !tape.value(loss).data()[0].is_finite() {
                return Err(EvalError::NonFinite { epoch });
            }
            model.store.zero_grad();
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store);
        }
        tape.clear();
        let v = model.loss(&mut tape, features, labels, &eval_rows)?;
        let v = tape.value(v).data()[0];
        if v < best.0 {
            best = (v, epoch + 1, model.store.snapshot());
        }
    }
    model.store.restore(&best.2);
    model.store.zero_grad();
    model.best_val_loss = best.0;
    model.best_epoch = best.1;
    Ok(model)
}

/// MAE for regression, accuracy at threshold 0.5 for classification.
pub fn metric(predictions: &[f64], labels: &[f64], task: Task) -> f64 {
    let n = labels.len() as f64;
    match task {
        Task::AgeRegression => predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n,
        Task::BinaryClassification => {
            predictions
                .iter()
                .zip(labels)
                .filter(|(p, y)| (**p >= 0.5) == (**y >= 0.5))
                .count() as f64
                / n
        }
    }
}

pub fn evaluate(model: &Mlp, features: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    Ok(metric(&model.predict(features)?, labels, model.task))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn widths() {
        assert_eq!(layer_widths(145), [145, 72, 36, 1]);
        assert_eq!(layer_widths(16), [16, 8, 4, 1]);
        assert_eq!(layer_widths(3), [3, 2, 2, 1]);
    }

    #[test]
    fn metrics() {
        let y = [1.0, 0.0, 1.0, 0.0];
        assert_eq!(metric(&y, &y, Task::BinaryClassification), 1.0);
        assert_eq!(metric(&[0.9, 0.2, 0.3, 0.1], &y, Task::BinaryClassification), 0.75);
        let ages = [30.0, 40.0, 70.0];
        assert_eq!(metric(&ages, &ages, Task::AgeRegression), 0.0);
        let m = ages.iter().sum::<f64>() / 3.0;
        let mad = ages.iter().map(|a| (a - m).abs()).sum::<f64>() / 3.0;
        assert!((metric(&[m; 3], &ages, Task::AgeRegression) - mad).abs() < 1e-12);
    }

    fn blobs(n: usize, d: usize, gap: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i % 2) as f64;
            y.push(c);
            for j in 0..d {
                let shift = if j == 0 { gap * (c - 0.5) } else { 0.0 };
                x.push(shift + rng.sample::<f64, _>(StandardNormal));
            }
        }
        (x, y)
    }

    #[test]
    fn separable_classes() {
        let (x, y) = blobs(1000, 4, 12.0, 1);
        let m = train_mlp(&x, 4, &y, Task::BinaryClassification, &MlpConfig::default()).unwrap();
        assert!(evaluate(&m, &x, &y).unwrap() >= 0.99);
    }

    #[test]
    fn permuted_labels_give_chance() {
        let (x, mut y) = blobs(2000, 4, 4.0, 2);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let (xt, yt) = blobs(2000, 4, 4.0, 3);
        let cfg = MlpConfig {
            epochs: 20,
            ..MlpConfig::default()
        };
        let m = train_mlp(&x, 4, &y, Task::BinaryClassification, &cfg).unwrap();
        let acc = evaluate(&m, &xt, &yt).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "{acc}");
    }

    #[test]
    fn constant_regression_target() {
        let (x, _) = blobs(800, 3, 0.0, 4);
        let y = vec![42.0; 800];
        let m = train_mlp(&x, 3, &y, Task::AgeRegression, &MlpConfig::default()).unwrap();
        assert!(evaluate(&m, &x, &y).unwrap() < 0.01);
    }

    #[test]
    fn rejects_single_class() {
        let (x, _) = blobs(10, 2, 1.0, 5);
        let y = vec![1.0; 10];
        assert!(matches!(
            train_mlp(&x, 2, &y, Task::BinaryClassification, &MlpConfig::default()),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn deterministic() {
        let (x, y) = blobs(300, 3, 2.0, 6);
        let a = train_mlp(&x, 3, &y, Task::BinaryClassification, &MlpConfig::default()).unwrap();
        let b = train_mlp(&x, 3, &y, Task::BinaryClassification, &MlpConfig::default()).unwrap();
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }
}
