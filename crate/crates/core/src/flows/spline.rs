//! Monotone rational-spline transforms on `[-B, B]` with identity tails.
//!
//! Raw parameters come in per element as a trailing block laid out as
//! `[widths (K), heights (K), interior derivatives (K-1), lambdas (K)]`,
//! the last group only for the linear-rational kind.

use crate::numkit::{NumError, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplineKind {
    LinearRational,
    QuadraticRational,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
    pub min_lambda: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 3.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
            min_lambda: 0.025,
        }
    }
}

impl SplineConfig {
    pub fn params_per_dim(&self, kind: SplineKind) -> usize {
        let k = self.bins;
        match kind {
            SplineKind::LinearRational => 4 * k - 1,
            SplineKind::QuadraticRational => 3 * k - 1,
        }
    }

    /// Raw parameter block that makes the spline the identity map.
    pub fn identity_params(&self, kind: SplineKind) -> Vec<f64> {
        let k = self.bins;
        let mut raw = vec![0.0; self.params_per_dim(kind)];
        let u = (1.0 - self.min_derivative).exp_m1().ln();
        raw[2 * k..3 * k - 1].fill(u);
        raw
    }
}

/// Knot positions and slopes, all on the tape.
struct Knots {
    xs: Var,
    ys: Var,
    derivs: Var,
    lambdas: Option<Var>,
}

fn normalized_knots(tape: &mut Tape, raw: Var, k: usize, min_size: f64, b: f64) -> Result<Var, NumError> {
    let ls = tape.log_softmax_last(raw)?;
    let p = tape.exp(ls)?;
    let p = tape.mul_scalar(p, 1.0 - k as f64 * min_size)?;
    let p = tape.add_scalar(p, min_size)?;
    let cum = tape.cumsum_last(p)?;
    // Pin both ends exactly so the outer knots sit at -B and B.
    let interior = tape.narrow_last(cum, 0, k - 1)?;
    let full = tape.pad_last(interior, 1, 0, 0.0)?;
    let full = tape.pad_last(full, 0, 1, 1.0)?;
    let full = tape.mul_scalar(full, 2.0 * b)?;
    tape.add_scalar(full, -b)
}

fn knots(tape: &mut Tape, raw: Var, kind: SplineKind, cfg: &SplineConfig) -> Result<Knots, NumError> {
    let k = cfg.bins;
    let uw = tape.narrow_last(raw, 0, k)?;
    let uh = tape.narrow_last(raw, k, k)?;
    let ud = tape.narrow_last(raw, 2 * k, k - 1)?;
    let xs = normalized_knots(tape, uw, k, cfg.min_bin_width, cfg.tail_bound)?;
    let ys = normalized_knots(tape, uh, k, cfg.min_bin_height, cfg.tail_bound)?;
    let d = tape.softplus(ud)?;
    let d = tape.add_scalar(d, cfg.min_derivative)?;
    let d = tape.pad_last(d, 1, 1, 1.0)?;
    let lambdas = match kind {
        SplineKind::LinearRational => {
            let ul = tape.narrow_last(raw, 3 * k - 1, k)?;
            let s = tape.sigmoid(ul)?;
            let s = tape.mul_scalar(s, 1.0 - 2.0 * cfg.min_lambda)?;
            Some(tape.add_scalar(s, cfg.min_lambda)?)
        }
        SplineKind::QuadraticRational => None,
    };
    Ok(Knots {
        xs,
        ys,
        derivs: d,
        lambdas,
    })
}

/// Bin index of each value: number of knots at or below it, minus one,
/// clamped to the valid range.
fn search(knots: &Tensor, values: &[f64], bins: usize) -> Vec<usize> {
    let stride = bins + 1;
    values
        .iter()
        .enumerate()
        .map(|(e, &v)| {
            let row = &knots.data()[e * stride..(e + 1) * stride];
            let count = row.iter().filter(|&&kx| kx <= v).count();
            count.saturating_sub(1).min(bins - 1)
        })
        .collect()
}

fn inside_mask(values: &[f64], shape: &[usize], b: f64) -> Tensor {
    let data = values.iter().map(|v| if v.abs() <= b { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

fn one_minus(tape: &mut Tape, x: Var) -> Result<Var, NumError> {
    let n = tape.mul_scalar(x, -1.0)?;
    tape.add_scalar(n, 1.0)
}

/// Quantities of the active bin for every element.
struct Bin {
    xa: Var,
    w: Var,
    ya: Var,
    h: Var,
    d0: Var,
    d1: Var,
    delta: Var,
    lambda: Option<Var>,
}

fn gather_bin(tape: &mut Tape, kn: &Knots, idx: &[usize]) -> Result<Bin, NumError> {
    let next: Vec<usize> = idx.iter().map(|i| i + 1).collect();
    let xa = tape.gather_last(kn.xs, idx.to_vec())?;
    let xb = tape.gather_last(kn.xs, next.clone())?;
    let ya = tape.gather_last(kn.ys, idx.to_vec())?;
    let yb = tape.gather_last(kn.ys, next.clone())?;
    let d0 = tape.gather_last(kn.derivs, idx.to_vec())?;
    let d1 = tape.gather_last(kn.derivs, next)?;
    let w = tape.sub(xb, xa)?;
    let h = tape.sub(yb, ya)?;
    let delta = tape.div(h, w)?;
    let lambda = match kn.lambdas {
        Some(l) => Some(tape.gather_last(l, idx.to_vec())?),
        None => None,
    };
    Ok(Bin {
        xa,
        w,
        ya,
        h,
        d0,
        d1,
        delta,
        lambda,
    })
}

/// Shape bookkeeping shared by both directions. `input` is `[.., d]` and
/// `raw` is `[.., d, P]`.
fn prepare(
    tape: &mut Tape,
    input: Var,
    raw: Var,
    kind: SplineKind,
    cfg: &SplineConfig,
    search_on_y: bool,
) -> Result<(Tensor, Var, Bin), NumError> {
    let shape = tape.value(input).shape().to_vec();
    let values = tape.value(input).data().to_vec();
    let inside = inside_mask(&values, &shape, cfg.tail_bound);
    let clamped = tape.clamp(input, -cfg.tail_bound, cfg.tail_bound)?;
    let kn = knots(tape, raw, kind, cfg)?;
    let cvals = tape.value(clamped).data().to_vec();
    let grid = if search_on_y { kn.ys } else { kn.xs };
    let idx = search(tape.value(grid), &cvals, cfg.bins);
    let bin = gather_bin(tape, &kn, &idx)?;
    Ok((inside, clamped, bin))
}

fn finish(
    tape: &mut Tape,
    inside: &Tensor,
    input: Var,
    inner: Var,
    inner_logdet: Var,
) -> Result<(Var, Var), NumError> {
    let out = tape.select(inside, inner, input)?;
    let zero = tape.constant(Tensor::zeros(inside.shape().to_vec()));
    let ld = tape.select(inside, inner_logdet, zero)?;
    Ok((out, ld))
}

/// `x -> y` with elementwise log-derivative.
pub fn forward(
    tape: &mut Tape,
    x: Var,
    raw: Var,
    kind: SplineKind,
    cfg: &SplineConfig,
) -> Result<(Var, Var), NumError> {
    let (inside, xc, bin) = prepare(tape, x, raw, kind, cfg, false)?;
    let off = tape.sub(xc, bin.xa)?;
    let theta = tape.div(off, bin.w)?;
    let (yn_or_y, ld) = match kind {
        SplineKind::QuadraticRational => {
            let (num, den) = quadratic_ratio(tape, &bin, theta)?;
            let r = tape.div(num, den)?;
            let ld = quadratic_logdet(tape, &bin, theta, den)?;
            (r, ld)
        }
        SplineKind::LinearRational => {
            let lambda = bin.lambda.expect("linear spline has lambdas");
            let left = mask_le(tape, theta, lambda);
            let lin = LinearBin::new(tape, &bin, lambda)?;
            let tl = tape.select(&left, theta, lambda)?;
            let tr = tape.select(&left, lambda, theta)?;
            let (yl, yr) = lin.values(tape, tl, tr)?;
            let yn = tape.select(&left, yl, yr)?;
            let ld = lin.logdet(tape, &left, tl, tr, bin.delta)?;
            (yn, ld)
        }
    };
    let scaled = tape.mul(yn_or_y, bin.h)?;
    let y = tape.add(bin.ya, scaled)?;
    finish(tape, &inside, x, y, ld)
}

/// `y -> x` with the elementwise log-derivative of the inverse map.
pub fn inverse(
    tape: &mut Tape,
    y: Var,
    raw: Var,
    kind: SplineKind,
    cfg: &SplineConfig,
) -> Result<(Var, Var), NumError> {
    let (inside, yc, bin) = prepare(tape, y, raw, kind, cfg, true)?;
    let off = tape.sub(yc, bin.ya)?;
    let (theta, fwd_ld) = match kind {
        SplineKind::QuadraticRational => {
            // a θ² + b θ + c = 0, stable root form.
            let s = tape.add(bin.d0, bin.d1)?;
            let two_delta = tape.mul_scalar(bin.delta, 2.0)?;
            let curv = tape.sub(s, two_delta)?;
            let oc = tape.mul(off, curv)?;
            let dd = tape.sub(bin.delta, bin.d0)?;
            let hd = tape.mul(bin.h, dd)?;
            let a = tape.add(oc, hd)?;
            let hd0 = tape.mul(bin.h, bin.d0)?;
            let b = tape.sub(hd0, oc)?;
            let c = tape.mul(bin.delta, off)?;
            let c = tape.neg(c)?;
            let b2 = tape.square(b)?;
            let ac = tape.mul(a, c)?;
            let ac4 = tape.mul_scalar(ac, 4.0)?;
            let disc = tape.sub(b2, ac4)?;
            let disc = tape.clamp(disc, f64::MIN_POSITIVE, f64::INFINITY)?;
            let sq = tape.sqrt(disc)?;
            let nb = tape.neg(b)?;
            let den = tape.sub(nb, sq)?;
            let c2 = tape.mul_scalar(c, 2.0)?;
            let theta = tape.div(c2, den)?;
            let (_, qden) = quadratic_ratio(tape, &bin, theta)?;
            let ld = quadratic_logdet(tape, &bin, theta, qden)?;
            (theta, ld)
        }
        SplineKind::LinearRational => {
            let lambda = bin.lambda.expect("linear spline has lambdas");
            let lin = LinearBin::new(tape, &bin, lambda)?;
            let yn = tape.div(off, bin.h)?;
            let left = mask_le(tape, yn, lin.yc);
            let yl = tape.select(&left, yn, lin.yc)?;
            let yr = tape.select(&left, lin.yc, yn)?;
            // Left piece: θ = λ y / (wc yc - (wc - 1) y).
            let num_l = tape.mul(lambda, yl)?;
            let wcm1 = tape.add_scalar(lin.wc, -1.0)?;
            let t = tape.mul(wcm1, yl)?;
            let den_l = tape.sub(lin.wc_yc, t)?;
            let tl = tape.div(num_l, den_l)?;
            // Right piece: θ = ((wc - λ wb) y + λ wb - wc yc) / ((wc - wb) y + wb - wc yc).
            let lwb = tape.mul(lambda, lin.wb)?;
            let a = tape.sub(lin.wc, lwb)?;
            let ay = tape.mul(a, yr)?;
            let num_r = tape.add(ay, lwb)?;
            let num_r = tape.sub(num_r, lin.wc_yc)?;
            let cw = tape.sub(lin.wc, lin.wb)?;
            let cy = tape.mul(cw, yr)?;
            let den_r = tape.add(cy, lin.wb)?;
            let den_r = tape.sub(den_r, lin.wc_yc)?;
            let tr = tape.div(num_r, den_r)?;
            let theta = tape.select(&left, tl, tr)?;
            let ld = lin.logdet(tape, &left, tl, tr, bin.delta)?;
            (theta, ld)
        }
    };
    let step = tape.mul(theta, bin.w)?;
    let x = tape.add(bin.xa, step)?;
    let ld = tape.neg(fwd_ld)?;
    finish(tape, &inside, y, x, ld)
}

fn mask_le(tape: &Tape, a: Var, b: Var) -> Tensor {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let data = ta
        .data()
        .iter()
        .zip(tb.data())
        .map(|(x, y)| if x <= y { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(ta.shape().to_vec(), data).expect("mask shape")
}

/// Normalized output `(δθ² + d0 θ(1-θ)) / (δ + (d0 + d1 - 2δ) θ(1-θ))` split
/// into numerator and denominator.
fn quadratic_ratio(tape: &mut Tape, bin: &Bin, theta: Var) -> Result<(Var, Var), NumError> {
    let omt = one_minus(tape, theta)?;
    let t1m = tape.mul(theta, omt)?;
    let t2 = tape.square(theta)?;
    let a = tape.mul(bin.delta, t2)?;
    let b = tape.mul(bin.d0, t1m)?;
    let num = tape.add(a, b)?;
    let s = tape.add(bin.d0, bin.d1)?;
    let two_delta = tape.mul_scalar(bin.delta, 2.0)?;
    let curv = tape.sub(s, two_delta)?;
    let c = tape.mul(curv, t1m)?;
    let den = tape.add(bin.delta, c)?;
    Ok((num, den))
}

fn quadratic_logdet(tape: &mut Tape, bin: &Bin, theta: Var, den: Var) -> Result<Var, NumError> {
    let omt = one_minus(tape, theta)?;
    let t1m = tape.mul(theta, omt)?;
    let t2 = tape.square(theta)?;
    let omt2 = tape.square(omt)?;
    let a = tape.mul(bin.d1, t2)?;
    let b = tape.mul(bin.delta, t1m)?;
    let b = tape.mul_scalar(b, 2.0)?;
    let c = tape.mul(bin.d0, omt2)?;
    let s = tape.add(a, b)?;
    let s = tape.add(s, c)?;
    let l1 = tape.log(s)?;
    let l2 = tape.log(bin.delta)?;
    let l2 = tape.mul_scalar(l2, 2.0)?;
    let l3 = tape.log(den)?;
    let l3 = tape.mul_scalar(l3, -2.0)?;
    let ld = tape.add(l1, l2)?;
    tape.add(ld, l3)
}

/// Per-bin constants of the linear-rational form with the left weight fixed to 1.
struct LinearBin {
    lambda: Var,
    wb: Var,
    wc: Var,
    yc: Var,
    wc_yc: Var,
}

impl LinearBin {
    fn new(tape: &mut Tape, bin: &Bin, lambda: Var) -> Result<Self, NumError> {
        let ratio = tape.div(bin.d0, bin.d1)?;
        let wb = tape.sqrt(ratio)?;
        let oml = one_minus(tape, lambda)?;
        let a = tape.mul(lambda, bin.d0)?;
        let b = tape.mul(oml, wb)?;
        let b = tape.mul(b, bin.d1)?;
        let wc = tape.add(a, b)?;
        let wc = tape.div(wc, bin.delta)?;
        let lwb = tape.mul(lambda, wb)?;
        let den = tape.add(oml, lwb)?;
        let yc = tape.div(lwb, den)?;
        let wc_yc = tape.mul(wc, yc)?;
        Ok(Self {
            lambda,
            wb,
            wc,
            yc,
            wc_yc,
        })
    }

    fn denominators(&self, tape: &mut Tape, tl: Var, tr: Var) -> Result<(Var, Var), NumError> {
        let lmt = tape.sub(self.lambda, tl)?;
        let wt = tape.mul(self.wc, tl)?;
        let den_l = tape.add(lmt, wt)?;
        let omt = one_minus(tape, tr)?;
        let a = tape.mul(self.wc, omt)?;
        let tml = tape.sub(tr, self.lambda)?;
        let b = tape.mul(self.wb, tml)?;
        let den_r = tape.add(a, b)?;
        Ok((den_l, den_r))
    }

    /// Normalized outputs of the left and right pieces.
    fn values(&self, tape: &mut Tape, tl: Var, tr: Var) -> Result<(Var, Var), NumError> {
        let (den_l, den_r) = self.denominators(tape, tl, tr)?;
        let num_l = tape.mul(self.wc_yc, tl)?;
        let yl = tape.div(num_l, den_l)?;
        let omt = one_minus(tape, tr)?;
        let a = tape.mul(self.wc_yc, omt)?;
        let tml = tape.sub(tr, self.lambda)?;
        let b = tape.mul(self.wb, tml)?;
        let num_r = tape.add(a, b)?;
        let yr = tape.div(num_r, den_r)?;
        Ok((yl, yr))
    }

    /// log dy/dx, combining the pieces with the constant `left` mask.
    fn logdet(&self, tape: &mut Tape, left: &Tensor, tl: Var, tr: Var, delta: Var) -> Result<Var, NumError> {
        let (den_l, den_r) = self.denominators(tape, tl, tr)?;
        // Left: wc λ yc / den²; right: wb wc (1 - λ)(1 - yc) / den².
        let nl = tape.mul(self.wc_yc, self.lambda)?;
        let oml = one_minus(tape, self.lambda)?;
        let omy = one_minus(tape, self.yc)?;
        let nr = tape.mul(self.wb, self.wc)?;
        let nr = tape.mul(nr, oml)?;
        let nr = tape.mul(nr, omy)?;
        let num = tape.select(left, nl, nr)?;
        let den = tape.select(left, den_l, den_r)?;
        let ln_num = tape.log(num)?;
        let ln_den = tape.log(den)?;
        let ln_den = tape.mul_scalar(ln_den, -2.0)?;
        let ln_delta = tape.log(delta)?;
        let s = tape.add(ln_num, ln_den)?;
        tape.add(s, ln_delta)
    }
}
