//! Finite-difference gradient checking and a random composite-graph builder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares tape gradients with central differences for every scalar of
/// every parameter in `store`. `build` receives the store and one leaf per
/// parameter, in store order, and must return a scalar.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    build: F,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheck, NumError>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, NumError>,
{
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let eval = |store: &ParamStore| -> Result<f64, NumError> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let root = build(&mut tape, store, &leaves)?;
        Ok(tape.value(root).data()[0])
    };

    store.zero_grad();
    let mut tape = Tape::new();
    let leaves: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
    let root = build(&mut tape, store, &leaves)?;
    tape.backward(root, store)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    for &id in &ids {
        let n = store.value(id).len();
        let analytic = store
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let abs_err = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs_err);
            if abs_err > abs_floor {
                let rel = abs_err / a.abs().max(numeric.abs());
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= rel_tol {
                    report.failures += 1;
                }
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

/// A seeded random composite graph over every differentiable primitive.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    seed: u64,
    rows: usize,
    cols: usize,
    steps: usize,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            seed,
            rows: rng.random_range(1..=4),
            cols: rng.random_range(2..=5),
            steps: rng.random_range(3..=10),
        }
    }

    /// Parameters: two `[rows, cols]` inputs, a `[cols, cols]` weight and a
    /// `[cols]` bias.
    pub fn params(&self) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
        let (r, c) = (self.rows, self.cols);
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![r, c], draw(r * c)).unwrap());
        store.add("b", Tensor::new(vec![r, c], draw(r * c)).unwrap());
        store.add("w", Tensor::new(vec![c, c], draw(c * c)).unwrap());
        store.add("v", Tensor::vector(draw(c)));
        store
    }

    pub fn build(&self, tape: &mut Tape, leaves: &[Var]) -> Result<Var, NumError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let (r, c) = (self.rows, self.cols);
        let (w, v) = (leaves[2], leaves[3]);
        let mut pool = vec![leaves[0], leaves[1]];
        for _ in 0..self.steps {
            let x = *pool.choose(&mut rng).unwrap();
            let y = *pool.choose(&mut rng).unwrap();
            let out = match rng.random_range(0..21) {
                0 => tape.add(x, y)?,
                1 => tape.sub(x, y)?,
                2 => tape.mul(x, y)?,
                3 => {
                    let t = tape.tanh(y)?;
                    let den = tape.add_scalar(t, 1.5)?;
                    tape.div(x, den)?
                }
                4 => {
                    let t = tape.tanh(x)?;
                    tape.exp(t)?
                }
                5 => {
                    let s = tape.softplus(x)?;
                    let s = tape.add_scalar(s, 0.1)?;
                    tape.log(s)?
                }
                6 => tape.tanh(x)?,
                7 => tape.sigmoid(x)?,
                8 => tape.softplus(x)?,
                9 => {
                    let sq = tape.square(x)?;
                    let sq = tape.add_scalar(sq, 0.5)?;
                    tape.sqrt(sq)?
                }
                10 => tape.abs(x)?,
                11 => tape.leaky_relu(x, 0.1)?,
                12 => tape.clamp(x, -1.0, 1.0)?,
                13 => tape.log_softmax_last(x)?,
                14 => tape.cumsum_last(x)?,
                15 => {
                    let m = tape.matmul(x, w)?;
                    tape.mul_scalar(m, 0.5)?
                }
                16 => tape.add(x, v)?,
                17 => {
                    let k = rng.random_range(1..c);
                    let lo = tape.narrow_last(x, 0, k)?;
                    let hi = tape.narrow_last(x, k, c - k)?;
                    tape.concat_last(hi, lo)?
                }
                18 => {
                    let idx = (0..r).map(|_| rng.random_range(0..r)).collect();
                    tape.index_select(x, idx)?
                }
                19 => {
                    let p = tape.pad_last(x, 1, 2, 0.3)?;
                    let p = tape.exp(p)?;
                    let p = tape.narrow_last(p, 1, c)?;
                    tape.log(p)?
                }
                _ => {
                    let flat = tape.reshape(x, &[r * c])?;
                    let flat = tape.mul_scalar(flat, -0.7)?;
                    let b = tape.broadcast_to(flat, &[2, r * c])?;
                    let s = tape.sum_last(b)?;
                    let s = tape.reshape(s, &[2, 1])?;
                    let s = tape.broadcast_to(s, &[r, 2, 1])?;
                    let s = tape.reshape(s, &[r, 2])?;
                    let s = tape.sum_last(s)?;
                    let s = tape.reshape(s, &[r, 1])?;
                    let s = tape.concat_last(s, x)?;
                    tape.narrow_last(s, 1, c)?
                }
            };
            pool.push(out);
        }
        let last = *pool.last().unwrap();
        match rng.random_range(0..3) {
            0 => tape.sum(last),
            1 => tape.mean(last),
            _ => {
                let idx = (0..r).map(|_| rng.random_range(0..c)).collect();
                let g = tape.gather_last(last, idx)?;
                tape.sum(g)
            }
        }
    }
}

/// Runs the finite-difference check on `count` random graphs and returns
/// the worst result together with the number of failing graphs.
pub fn random_graph_suite(first_seed: u64, count: usize) -> Result<(GradCheck, usize), NumError> {
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: 0,
    };
    let mut failed_graphs = 0;
    for seed in first_seed..first_seed + count as u64 {
        let graph = RandomGraph::new(seed);
        let mut store = graph.params();
        let res = check_gradients(&mut store, |t, _, l| graph.build(t, l), 1e-5, 1e-4, 1e-6)?;
        if !res.passed() {
            failed_graphs += 1;
        }
        worst.max_rel_err = worst.max_rel_err.max(res.max_rel_err);
        worst.max_abs_err = worst.max_abs_err.max(res.max_abs_err);
        worst.checked += res.checked;
        worst.failures += res.failures;
    }
    Ok((worst, failed_graphs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_random_graphs_match_finite_differences() {
        let (worst, failed) = random_graph_suite(0, 100).unwrap();
        assert_eq!(failed, 0, "{worst:?}");
        assert!(worst.checked > 100);
    }

    #[test]
    fn each_primitive_alone() {
        // Leaf values kept away from the kinks of abs/leaky_relu/clamp.
        let x0 = Tensor::matrix(2, 3, vec![0.3, -0.7, 1.2, -1.4, 0.55, 0.9]).unwrap();
        type Op = fn(&mut Tape, Var) -> Result<Var, NumError>;
        let ops: Vec<(&str, Op)> = vec![
            ("neg", |t, x| t.neg(x)),
            ("exp", |t, x| t.exp(x)),
            ("log", |t, x| {
                let e = t.exp(x)?;
                t.log(e)
            }),
            ("tanh", |t, x| t.tanh(x)),
            ("sigmoid", |t, x| t.sigmoid(x)),
            ("softplus", |t, x| t.softplus(x)),
            ("sqrt", |t, x| {
                let e = t.exp(x)?;
                t.sqrt(e)
            }),
            ("abs", |t, x| t.abs(x)),
            ("leaky_relu", |t, x| t.leaky_relu(x, 0.1)),
            ("clamp", |t, x| t.clamp(x, -1.0, 1.0)),
            ("square", |t, x| t.square(x)),
            ("div", |t, x| {
                let e = t.exp(x)?;
                t.div(x, e)
            }),
            ("matmul", |t, x| {
                let w = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 0.25, 3.0]).unwrap());
                t.matmul(x, w)
            }),
            ("log_softmax", |t, x| t.log_softmax_last(x)),
            ("cumsum", |t, x| t.cumsum_last(x)),
            ("sum_last", |t, x| t.sum_last(x)),
            ("index_select", |t, x| t.index_select(x, vec![1, 1, 0])),
            ("gather", |t, x| t.gather_last(x, vec![2, 0])),
            ("pad", |t, x| t.pad_last(x, 2, 1, 1.0)),
        ];
        for (name, op) in ops {
            let mut store = ParamStore::new();
            store.add("x", x0.clone());
            let res = check_gradients(
                &mut store,
                |t, _, l| {
                    let y = op(t, l[0])?;
                    // Weighted sum so every output entry carries a distinct cotangent.
                    let n = t.value(y).len();
                    let wts = Tensor::new(t.value(y).shape().to_vec(), (0..n).map(|i| 1.0 + 0.37 * i as f64).collect())?;
                    let w = t.constant(wts);
                    let p = t.mul(y, w)?;
                    t.sum(p)
                },
                1e-5,
                1e-4,
                1e-6,
            )
            .unwrap();
            assert!(res.passed(), "{name}: {res:?}");
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let graph = RandomGraph::new(17);
        let run = || {
            let mut store = graph.params();
            let mut tape = Tape::new();
            let leaves: Vec<Var> = store.iter().map(|(id, _)| id).collect::<Vec<_>>().into_iter().map(|id| tape.param(&store, id)).collect();
            let root = graph.build(&mut tape, &leaves).unwrap();
            let v = tape.value(root).data()[0];
            tape.backward(root, &mut store).unwrap();
            (v.to_bits(), store.iter().map(|(_, p)| p.grad.clone().unwrap_or_else(|| Tensor::scalar(0.0)).into_data()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_is_linear_over_independent_subgraphs() {
        let mut joint = ParamStore::new();
        let a = joint.add("a", Tensor::vector(vec![0.4, -0.2]));
        let b = joint.add("b", Tensor::vector(vec![1.1, 0.3]));
        let mut separate = joint.clone();

        let f = |t: &mut Tape, x: Var| -> Result<Var, NumError> {
            let e = t.tanh(x)?;
            let s = t.square(e)?;
            t.sum(s)
        };
        let g = |t: &mut Tape, x: Var| -> Result<Var, NumError> {
            let e = t.exp(x)?;
            t.sum(e)
        };

        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&joint, a), tape.param(&joint, b));
        let la = f(&mut tape, va).unwrap();
        let lb = g(&mut tape, vb).unwrap();
        let l = tape.add(la, lb).unwrap();
        tape.backward(l, &mut joint).unwrap();

        let mut t1 = Tape::new();
        let va = t1.param(&separate, a);
        let la = f(&mut t1, va).unwrap();
        t1.backward(la, &mut separate).unwrap();
        let mut t2 = Tape::new();
        let vb = t2.param(&separate, b);
        let lb = g(&mut t2, vb).unwrap();
        t2.backward(lb, &mut separate).unwrap();

        for id in [a, b] {
            let x = joint.get(id).grad.as_ref().unwrap().data();
            let y = separate.get(id).grad.as_ref().unwrap().data();
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-14);
            }
        }
    }
}
