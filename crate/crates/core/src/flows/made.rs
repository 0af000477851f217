//! Conditioner networks: tanh MLPs with a linear skip path, optionally
//! masked MADE-style so that outputs for dimension `k` only see `x_<k`.

use rand::Rng;

use crate::numkit::nn::Linear;
use crate::numkit::{NumError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MaskedNet {
    hidden: Vec<Linear>,
    out: Linear,
    skip: Linear,
    /// Output columns per event dimension (column `k * block + j`).
    block: usize,
    masked: bool,
}

impl MaskedNet {
    /// Autoregressive network over `d` event dims plus `c` context inputs.
    /// The input layout is `[x (d), context (c)]` and outputs are `d`
    /// blocks of `block` values, initialized to `init_block`.
    pub fn made<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        c: usize,
        init_block: &[f64],
        masked: bool,
        rng: &mut R,
    ) -> Self {
        let block = init_block.len();
        let width = 2 * d;
        let inputs: Vec<usize> = (1..=d).chain(std::iter::repeat_n(0, c)).collect();
        let hidden_deg: Vec<usize> = (0..width).map(|j| j % d).collect();
        let outputs: Vec<usize> = (0..d).flat_map(|k| std::iter::repeat_n(k, block)).collect();

        let l1 = Linear::uniform(store, &format!("{name}.h0"), d + c, width, rng);
        let l2 = Linear::uniform(store, &format!("{name}.h1"), width, width, rng);
        let out = Linear::from_tensors(
            store,
            &format!("{name}.out"),
            Tensor::zeros(vec![width, d * block]),
            Tensor::vector(init_block.repeat(d)),
        );
        let skip = Linear::zeros(store, &format!("{name}.skip"), d + c, d * block);

        let (l1, l2, out, skip) = if masked {
            (
                l1.with_mask(degree_mask(&inputs, &hidden_deg)),
                l2.with_mask(degree_mask(&hidden_deg, &hidden_deg)),
                out.with_mask(degree_mask(&hidden_deg, &outputs)),
                skip.with_mask(degree_mask(&inputs, &outputs)),
            )
        } else {
            (l1, l2, out, skip)
        };
        Self {
            hidden: vec![l1, l2],
            out,
            skip,
            block,
            masked,
        }
    }

    /// Plain network from context only: `c` inputs to `outputs` values,
    /// initialized to `init`.
    pub fn context<R: Rng>(store: &mut ParamStore, name: &str, c: usize, width: usize, init: &[f64], rng: &mut R) -> Self {
        let l1 = Linear::uniform(store, &format!("{name}.h0"), c, width, rng);
        let l2 = Linear::uniform(store, &format!("{name}.h1"), width, width, rng);
        let out = Linear::from_tensors(
            store,
            &format!("{name}.out"),
            Tensor::zeros(vec![width, init.len()]),
            Tensor::vector(init.to_vec()),
        );
        let skip = Linear::zeros(store, &format!("{name}.skip"), c, init.len());
        Self {
            hidden: vec![l1, l2],
            out,
            skip,
            block: init.len(),
            masked: false,
        }
    }

    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.hidden
            .iter()
            .chain([&self.out, &self.skip])
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    fn trunk(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var, NumError> {
        let mut h = input;
        for layer in &self.hidden {
            let z = layer.forward(tape, store, h)?;
            h = tape.tanh(z)?;
        }
        Ok(h)
    }

    /// Full output `[n, blocks * block]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var, NumError> {
        let h = self.trunk(tape, store, input)?;
        let a = self.out.forward(tape, store, h)?;
        let b = self.skip.forward(tape, store, input)?;
        tape.add(a, b)
    }

    /// Output block `k` only, `[n, block]`; bit-identical to the matching
    /// columns of [`MaskedNet::forward`].
    pub fn forward_block(&self, tape: &mut Tape, store: &ParamStore, input: Var, k: usize) -> Result<Var, NumError> {
        let h = self.trunk(tape, store, input)?;
        let a = narrow_linear(tape, store, &self.out, h, k * self.block, self.block)?;
        let b = narrow_linear(tape, store, &self.skip, input, k * self.block, self.block)?;
        tape.add(a, b)
    }
}

fn narrow_linear(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &Linear,
    x: Var,
    start: usize,
    len: usize,
) -> Result<Var, NumError> {
    let mut w = tape.param(store, layer.weight);
    if let Some(mask) = layer.mask() {
        let m = tape.constant(mask.clone());
        w = tape.mul(m, w)?;
    }
    let w = tape.narrow_last(w, start, len)?;
    let b = tape.param(store, layer.bias);
    let b = tape.narrow_last(b, start, len)?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// `mask[i, j] = 1` iff `deg_in[i] <= deg_out[j]`.
fn degree_mask(deg_in: &[usize], deg_out: &[usize]) -> Tensor {
    let data = deg_in
        .iter()
        .flat_map(|&a| deg_out.iter().map(move |&b| if a <= b { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(vec![deg_in.len(), deg_out.len()], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_k_ignores_later_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, c) = (4, 2);
        let net = MaskedNet::made(&mut store, "m", d, c, &[0.0, 0.0, 0.0], true, &mut rng);
        // Randomize the zero-initialized layers so the check is not vacuous.
        for (_, p) in store.clone().iter() {
            let id = store.find(&p.name).unwrap();
            for v in store.get_mut(id).value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let eval = |x: Vec<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::matrix(1, d + c, x).unwrap());
            let y = net.forward(&mut tape, &store, xv).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = vec![0.3, -0.2, 0.8, 0.1, 1.0, -1.0];
        let y0 = eval(base.clone());
        for i in 0..d {
            let mut x = base.clone();
            x[i] += 0.5;
            let y = eval(x);
            for k in 0..d {
                let same = (0..3).all(|j| y[k * 3 + j] == y0[k * 3 + j]);
                if k <= i {
                    assert!(same, "output {k} depends on x_{i}");
                }
            }
        }
    }

    #[test]
    fn block_forward_matches_full_forward() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = MaskedNet::made(&mut store, "m", 3, 1, &[0.5, -0.5], true, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 1.0, -0.4, 0.5, 0.6, 0.0]).unwrap());
        let full = net.forward(&mut tape, &store, x).unwrap();
        let full = tape.value(full).clone();
        for k in 0..3 {
            let b = net.forward_block(&mut tape, &store, x, k).unwrap();
            for r in 0..2 {
                assert_eq!(tape.value(b).row(r), &full.row(r)[k * 2..k * 2 + 2]);
            }
        }
    }
}
