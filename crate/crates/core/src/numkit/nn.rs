//! Fully connected layers with optional connectivity masks.

use rand::Rng;

use super::{NumError, ParamId, ParamStore, Tape, Tensor, Var};

/// `y = x W + b` with `W: [in, out]`. A mask, if present, is multiplied into
/// `W` on every forward pass so that masked weights never influence outputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    mask: Option<Tensor>,
}

impl Linear {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and bias.
    pub fn uniform<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let b = Tensor::vector(draw(fan_out));
        Self::from_tensors(store, name, w, b)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = Tensor::zeros(vec![fan_in, fan_out]);
        let b = Tensor::zeros(vec![fan_out]);
        Self::from_tensors(store, name, w, b)
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        assert_eq!(bias.shape(), &[fan_out], "bias width");
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            fan_in,
            fan_out,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Tensor) -> Self {
        assert_eq!(mask.shape(), &[self.fan_in, self.fan_out], "mask shape");
        self.mask = Some(mask);
        self
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let mut w = tape.param(store, self.weight);
        if let Some(mask) = &self.mask {
            let m = tape.constant(mask.clone());
            w = tape.mul(m, w)?;
        }
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    /// Plain evaluation of a single row outside any tape.
    pub fn apply_row(&self, store: &ParamStore, x: &[f64], out: &mut Vec<f64>) {
        let w = store.value(self.weight).data();
        out.clear();
        out.extend_from_slice(store.value(self.bias).data());
        for (i, &xi) in x.iter().enumerate() {
            let row = &w[i * self.fan_out..(i + 1) * self.fan_out];
            match &self.mask {
                Some(m) => {
                    let mrow = &m.data()[i * self.fan_out..(i + 1) * self.fan_out];
                    for ((o, wv), mv) in out.iter_mut().zip(row).zip(mrow) {
                        *o += xi * wv * mv;
                    }
                }
                None => {
                    for (o, wv) in out.iter_mut().zip(row) {
                        *o += xi * wv;
                    }
                }
            }
        }
    }
}
