//! Small network building blocks: linear layers, an LSTM cell, embeddings
//! and the sinusoidal timestep embedding used by the denoiser.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;

/// Weight-matrix initialization: zero-mean normal, std 1/√fan_in.
pub fn init_weight(
    params: &mut ParamSet,
    name: &str,
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let std = 1.0 / (cols as f64).sqrt();
    params.insert(name, Tensor::randn(&[rows, cols], std, rng))
}

/// Embedding-table initialization: zero-mean normal with a given std.
pub fn init_embedding(
    params: &mut ParamSet,
    name: &str,
    rows: usize,
    dim: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert(name, Tensor::randn(&[rows, dim], std, rng))
}

pub fn init_bias(params: &mut ParamSet, name: &str, len: usize) -> Result<()> {
    params.insert(name, Tensor::zeros(&[len]))
}

/// y = W·x + b over named parameters.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Name-and-shape view without touching parameter storage.
    pub fn layout(prefix: &str, din: usize, dout: usize) -> Self {
        Linear { w: format!("{prefix}.w"), b: format!("{prefix}.b"), din, dout }
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let lin = Self::layout(prefix, din, dout);
        init_weight(params, &lin.w, dout, din, rng)?;
        init_bias(params, &lin.b, dout)?;
        Ok(lin)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.w)?;
        let b = tape.param(params, &self.b)?;
        let wx = tape.matvec(w, x)?;
        tape.add(wx, b)
    }
}

/// Single LSTM cell with gate order (input, forget, cell, output) packed
/// into one 4H×(I+H) weight matrix. The forget-gate bias starts at 1.0.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: String,
    pub b: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Name-and-shape view without touching parameter storage.
    pub fn layout(prefix: &str, input_dim: usize, hidden: usize) -> Self {
        LstmCell { w: format!("{prefix}.w"), b: format!("{prefix}.b"), input_dim, hidden }
    }

    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cell = Self::layout(prefix, input_dim, hidden);
        init_weight(params, &cell.w, 4 * hidden, input_dim + hidden, rng)?;
        // Forget-gate bias starts at one so early training does not erase state.
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        params.insert(&cell.b, Tensor::vector(bias))?;
        Ok(cell)
    }

    /// One step: (x, h, c) → (h', c').
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w = tape.param(params, &self.w)?;
        let b = tape.param(params, &self.b)?;
        let xh = tape.concat(x, h)?;
        let lin = tape.matvec(w, xh)?;
        let gates = tape.add(lin, b)?;
        let i_pre = tape.slice_vec(gates, 0, hd)?;
        let f_pre = tape.slice_vec(gates, hd, hd)?;
        let g_pre = tape.slice_vec(gates, 2 * hd, hd)?;
        let o_pre = tape.slice_vec(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        Ok((h_new, c_new))
    }

    /// Zero-filled (h, c) starting state.
    pub fn zero_state(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let h = tape.input(Tensor::zeros(&[self.hidden]))?;
        let c = tape.input(Tensor::zeros(&[self.hidden]))?;
        Ok((h, c))
    }
}

/// Sinusoidal timestep embedding: pairs of sin/cos at geometric frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Tensor {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::vector(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads_default;
    use crate::rng::rng_from_seed;

    #[test]
    fn linear_shapes_and_grads() {
        let mut rng = rng_from_seed(5);
        let mut params = ParamSet::new();
        let lin = Linear::init(&mut params, "l", 3, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let check = check_grads_default(&mut params, |tape, ps| {
            let xv = tape.input(x.clone())?;
            let y = lin.forward(tape, ps, xv)?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-6, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn lstm_cell_grads_pass_fd() {
        let mut rng = rng_from_seed(6);
        let mut params = ParamSet::new();
        let cell = LstmCell::init(&mut params, "lstm", 3, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[3], 1.0, &mut rng);
        let check = check_grads_default(&mut params, |tape, ps| {
            let xv = tape.input(x.clone())?;
            let (h, c) = cell.zero_state(tape)?;
            let (h1, c1) = cell.step(tape, ps, xv, h, c)?;
            let (h2, _) = cell.step(tape, ps, xv, h1, c1)?;
            let sq = tape.square(h2)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(check.max_rel_err <= 1e-4, "rel err {}", check.max_rel_err);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = rng_from_seed(7);
        let mut params = ParamSet::new();
        let cell = LstmCell::init(&mut params, "lstm", 2, 3, &mut rng).unwrap();
        let b = params.get(&cell.b).unwrap().data();
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[0..3].iter().all(|&v| v == 0.0));
        assert!(b[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let a = time_embedding(1, 32);
        let b = time_embedding(2, 32);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        let dist: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(dist > 0.1, "steps 1 and 2 should embed apart, got {dist}");
    }
}
