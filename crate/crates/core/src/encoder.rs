//! The uncertainty-aware state encoder (Gaussian LSTM with calibrated
//! output) and the goal-oriented concept encoder (self-attention over the
//! concept table plus goal conditioning).

use crate::error::{Error, Result};
use crate::nn::{init_bias, init_embedding, init_weight, Linear, LstmCell};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How the mean state is damped by the predicted scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// ĥ = μ ⊙ max(0, 1 − σ²) — the default; never flips sign.
    #[default]
    Clamped,
    /// ĥ = μ ⊙ (1 − σ²) — the literal form; can invert coordinates.
    Literal,
    /// ĥ = μ — uncertainty machinery disabled (ablation).
    NoUncertainty,
}

/// Which residual the attention output is added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    /// Ĉ_a = V + Ĉ (default).
    #[default]
    Value,
    /// Ĉ_a = C + Ĉ.
    Raw,
}

/// One per-step output of the state encoder.
#[derive(Debug, Clone, Copy)]
pub struct CognitiveState {
    pub mu: Var,
    pub sigma: Var,
    pub h_cal: Var,
}

/// LSTM over interaction embeddings (concept ⊕ correctness, each width d)
/// with mean and scale heads.
#[derive(Debug, Clone)]
pub struct GaussianLstmEncoder {
    pub d: usize,
    lstm: LstmCell,
    mu: Linear,
    sigma: Linear,
}

impl GaussianLstmEncoder {
    /// Name-and-shape view over already-allocated parameters.
    pub fn attach(d: usize) -> Self {
        GaussianLstmEncoder {
            d,
            lstm: LstmCell::layout("enc.lstm", 2 * d, d),
            mu: Linear::layout("enc.mu", d, d),
            sigma: Linear::layout("enc.sigma", d, d),
        }
    }

    pub fn init(params: &mut ParamSet, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        init_embedding(params, "enc.correct", 2, d, 0.02, rng)?;
        let lstm = LstmCell::init(params, "enc.lstm", 2 * d, d, rng)?;
        let mu = Linear::init(params, "enc.mu", d, d, rng)?;
        let sigma = Linear::init(params, "enc.sigma", d, d, rng)?;
        Ok(GaussianLstmEncoder { d, lstm, mu, sigma })
    }

    fn state_from_hidden(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        h: Var,
        calibration: Calibration,
    ) -> Result<CognitiveState> {
        let mu = self.mu.forward(tape, params, h)?;
        let pre = self.sigma.forward(tape, params, h)?;
        let sigma = tape.softplus(pre)?;
        let h_cal = match calibration {
            Calibration::NoUncertainty => mu,
            _ => {
                let sq = tape.square(sigma)?;
                let one = tape.input(Tensor::full(&[self.d], 1.0))?;
                let damp = tape.sub(one, sq)?;
                let damp = match calibration {
                    Calibration::Clamped => tape.relu(damp)?,
                    _ => damp,
                };
                tape.mul(mu, damp)?
            }
        };
        Ok(CognitiveState { mu, sigma, h_cal })
    }

    /// One CognitiveState per history step; an empty history yields a single
    /// prior state read off the zero hidden state.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        history: &[(usize, u8)],
        calibration: Calibration,
    ) -> Result<Vec<CognitiveState>> {
        let concepts = tape.param(params, "ce.embed")?;
        let correct = tape.param(params, "enc.correct")?;
        let (mut h, mut c) = self.lstm.zero_state(tape)?;
        if history.is_empty() {
            return Ok(vec![self.state_from_hidden(tape, params, h, calibration)?]);
        }
        let mut out = Vec::with_capacity(history.len());
        for &(concept, y) in history {
            let ce = tape.select_row(concepts, concept)?;
            let ye = tape.select_row(correct, y as usize)?;
            let x = tape.concat(ce, ye)?;
            (h, c) = self.lstm.step(tape, params, x, h, c)?;
            out.push(self.state_from_hidden(tape, params, h, calibration)?);
        }
        Ok(out)
    }
}

/// Self-attention over the concept table with goal conditioning.
#[derive(Debug, Clone)]
pub struct ConceptEncoder {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
}

impl ConceptEncoder {
    /// Name-and-shape view over already-allocated parameters.
    pub fn attach(n: usize, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!("heads {heads} must divide d {d}")));
        }
        Ok(ConceptEncoder { n, d, heads })
    }

    pub fn init(
        params: &mut ParamSet,
        n: usize,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidConfig(format!("heads {heads} must divide d {d}")));
        }
        init_embedding(params, "ce.embed", n, d, 0.02, rng)?;
        for name in ["ce.wq", "ce.wk", "ce.wv", "ce.wv2", "ce.goal.w"] {
            init_weight(params, name, d, d, rng)?;
        }
        init_bias(params, "ce.goal.b", d)?;
        Ok(ConceptEncoder { n, d, heads })
    }

    /// Ĉ_a: residual self-attention over the concept rows (N × d).
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        residual: Residual,
    ) -> Result<Var> {
        let c = tape.param(params, "ce.embed")?;
        let wq = tape.param(params, "ce.wq")?;
        let wk = tape.param(params, "ce.wk")?;
        let wv = tape.param(params, "ce.wv")?;
        let q = tape.matmul(c, wq)?;
        let k = tape.matmul(c, wk)?;
        let v = tape.matmul(c, wv)?;
        let dh = self.d / self.heads;
        let mut head_outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.affine_const(scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
            let attn = tape.softmax_rows(scaled)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let mut attended = head_outs[0];
        for &h in &head_outs[1..] {
            attended = tape.hconcat(attended, h)?;
        }
        match residual {
            Residual::Value => tape.add(v, attended),
            Residual::Raw => tape.add(c, attended),
        }
    }

    /// G: the transformed mean of the goal concepts' embeddings.
    pub fn goal_vector(&self, tape: &mut Tape, params: &ParamSet, goals: &[usize]) -> Result<Var> {
        if goals.is_empty() {
            return Err(Error::BadData("goal set is empty".into()));
        }
        let c = tape.param(params, "ce.embed")?;
        let mean = tape.subset_rows_mean(c, goals)?;
        let wg = tape.param(params, "ce.goal.w")?;
        let bg = tape.param(params, "ce.goal.b")?;
        let proj = tape.matvec(wg, mean)?;
        tape.add(proj, bg)
    }

    /// Ĉ_b = (Ĉ_a + broadcast(G) + broadcast(rowmean(Ĉ_a)))·W_V2. Passing
    /// `goal: None` drops the G term (goal-free ablation) but keeps the pool.
    pub fn goal_condition(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        c_a: Var,
        goal: Option<Var>,
    ) -> Result<Var> {
        let pooled = tape.mean_rows(c_a)?;
        let mut sum = tape.add_row_broadcast(c_a, pooled)?;
        if let Some(g) = goal {
            sum = tape.add_row_broadcast(sum, g)?;
        }
        let wv2 = tape.param(params, "ce.wv2")?;
        tape.matmul(sum, wv2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grads_default;
    use crate::rng::rng_stream;

    fn setup(n: usize, d: usize, heads: usize, seed: u64) -> (ParamSet, GaussianLstmEncoder, ConceptEncoder) {
        let mut params = ParamSet::new();
        let mut rng = rng_stream(seed, 0);
        let ce = ConceptEncoder::init(&mut params, n, d, heads, &mut rng).unwrap();
        let enc = GaussianLstmEncoder::init(&mut params, d, &mut rng).unwrap();
        (params, enc, ce)
    }

    #[test]
    fn sigma_is_strictly_positive() {
        let (params, enc, _) = setup(6, 8, 1, 3);
        let mut tape = Tape::new();
        let states = enc
            .encode(&mut tape, &params, &[(0, 1), (3, 0), (5, 1)], Calibration::Clamped)
            .unwrap();
        assert_eq!(states.len(), 3);
        for s in &states {
            for &v in tape.value(s.sigma).data() {
                assert!(v > 0.0);
            }
        }
    }

    #[test]
    fn tiny_sigma_leaves_mu_uncalibrated() {
        let (mut params, enc, _) = setup(4, 6, 1, 4);
        // Push the scale pre-activation far negative: softplus → ~0.
        for v in params.get_mut("enc.sigma.b").unwrap().data_mut() {
            *v = -40.0;
        }
        for v in params.get_mut("enc.sigma.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let states =
            enc.encode(&mut tape, &params, &[(1, 1), (2, 0)], Calibration::Clamped).unwrap();
        for s in &states {
            let mu = tape.value(s.mu).data();
            let cal = tape.value(s.h_cal).data();
            for (a, b) in mu.iter().zip(cal) {
                assert!((a - b).abs() < 1e-9, "h_cal should equal mu, {a} vs {b}");
            }
        }
    }

    #[test]
    fn half_sigma_damps_mu_by_three_quarters() {
        let (mut params, enc, _) = setup(4, 6, 1, 5);
        for v in params.get_mut("enc.sigma.w").unwrap().data_mut() {
            *v = 0.0;
        }
        // softplus(b) = 0.5  ⇔  b = ln(e^0.5 − 1)
        let b = (0.5f64.exp() - 1.0).ln();
        for v in params.get_mut("enc.sigma.b").unwrap().data_mut() {
            *v = b;
        }
        let mut tape = Tape::new();
        let states = enc.encode(&mut tape, &params, &[(0, 1)], Calibration::Clamped).unwrap();
        let mu = tape.value(states[0].mu).data().to_vec();
        let cal = tape.value(states[0].h_cal).data().to_vec();
        for (m, c) in mu.iter().zip(&cal) {
            assert!((c - 0.75 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_history_yields_single_prior_state() {
        let (params, enc, _) = setup(4, 6, 1, 6);
        let mut tape = Tape::new();
        let states = enc.encode(&mut tape, &params, &[], Calibration::Clamped).unwrap();
        assert_eq!(states.len(), 1);
        tape.value(states[0].h_cal).check_finite("prior state").unwrap();
    }

    #[test]
    fn out_of_range_concept_errors() {
        let (params, enc, _) = setup(4, 6, 1, 7);
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &params, &[(4, 1)], Calibration::Clamped).is_err());
    }

    #[test]
    fn calibrated_state_never_exceeds_mu() {
        let (params, enc, _) = setup(8, 10, 1, 8);
        let mut tape = Tape::new();
        let history: Vec<(usize, u8)> = (0..12).map(|i| (i % 8, (i % 3 == 0) as u8)).collect();
        let states = enc.encode(&mut tape, &params, &history, Calibration::Clamped).unwrap();
        for s in &states {
            let mu = tape.value(s.mu).data();
            let cal = tape.value(s.h_cal).data();
            for (m, c) in mu.iter().zip(cal) {
                assert!(c.abs() <= m.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn encoder_gradients_pass_fd() {
        let (mut params, enc, _) = setup(5, 6, 1, 9);
        let history = [(0usize, 1u8), (2, 0), (4, 1)];
        let report = check_grads_default(&mut params, |tape, params| {
            let states = enc.encode(tape, params, &history, Calibration::Clamped)?;
            tape.mean(states.last().unwrap().h_cal)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }

    #[test]
    fn identical_keys_attend_uniformly() {
        let (mut params, _, ce) = setup(5, 8, 1, 10);
        for v in params.get_mut("ce.wk").unwrap().data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let c_a = ce.self_attention(&mut tape, &params, Residual::Value).unwrap();
        // With uniform attention every attended row is the mean of V's rows,
        // so Ĉ_a − V must be row-constant.
        let c = tape.param(&params, "ce.embed").unwrap();
        let wv = tape.param(&params, "ce.wv").unwrap();
        let v = tape.matmul(c, wv).unwrap();
        let diff = tape.sub(c_a, v).unwrap();
        let t = tape.value(diff);
        let (rows, cols) = t.dims2().unwrap();
        for r in 1..rows {
            for j in 0..cols {
                let a = t.data()[j];
                let b = t.data()[r * cols + j];
                assert!((a - b).abs() < 1e-12, "row {r} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (params, _, ce) = setup(6, 8, 2, 11);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = ParamSet::new();
        for (name, p) in params.iter() {
            if name == "ce.embed" {
                let src = &p.value;
                let (n, d) = src.dims2().unwrap();
                let mut data = vec![0.0; n * d];
                for (i, &pi) in perm.iter().enumerate() {
                    data[i * d..(i + 1) * d].copy_from_slice(&src.data()[pi * d..(pi + 1) * d]);
                }
                permuted.insert(name, Tensor::new(vec![n, d], data).unwrap()).unwrap();
            } else {
                permuted.insert(name, p.value.clone()).unwrap();
            }
        }
        let mut t1 = Tape::new();
        let base = ce.self_attention(&mut t1, &params, Residual::Value).unwrap();
        let mut t2 = Tape::new();
        let shuf = ce.self_attention(&mut t2, &permuted, Residual::Value).unwrap();
        let base = t1.value(base);
        let shuf = t2.value(shuf);
        let d = ce.d;
        for (i, &pi) in perm.iter().enumerate() {
            for j in 0..d {
                let a = shuf.data()[i * d + j];
                let b = base.data()[pi * d + j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_goal_mean_is_that_embedding() {
        let (mut params, _, ce) = setup(5, 4, 1, 12);
        // W_G = I, b_G = 0 ⇒ G = mean of goal embeddings.
        let wg = params.get_mut("ce.goal.w").unwrap();
        let d = 4;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        wg.data_mut().copy_from_slice(&eye);
        let mut tape = Tape::new();
        let g = ce.goal_vector(&mut tape, &params, &[3]).unwrap();
        let g = tape.value(g).data().to_vec();
        let row = &params.get("ce.embed").unwrap().data()[3 * d..4 * d];
        for (a, b) in g.iter().zip(row) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn goal_sets_shift_output_by_rank_one_constant() {
        let (mut params, _, ce) = setup(6, 4, 1, 13);
        let d = 4;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        params.get_mut("ce.wv2").unwrap().data_mut().copy_from_slice(&eye);

        let mut tape = Tape::new();
        let c_a = ce.self_attention(&mut tape, &params, Residual::Value).unwrap();
        let ga = ce.goal_vector(&mut tape, &params, &[0, 1]).unwrap();
        let gb = ce.goal_vector(&mut tape, &params, &[4, 5]).unwrap();
        let out_a = ce.goal_condition(&mut tape, &params, c_a, Some(ga)).unwrap();
        let out_b = ce.goal_condition(&mut tape, &params, c_a, Some(gb)).unwrap();
        let expect = tape.sub(ga, gb).unwrap();
        let diff = tape.sub(out_a, out_b).unwrap();
        let diff = tape.value(diff);
        let expect = tape.value(expect).data();
        let (rows, cols) = diff.dims2().unwrap();
        for r in 0..rows {
            for j in 0..cols {
                assert!((diff.data()[r * cols + j] - expect[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn goal_order_does_not_matter() {
        let (params, _, ce) = setup(7, 6, 1, 14);
        let mut tape = Tape::new();
        let a = ce.goal_vector(&mut tape, &params, &[1, 4, 6]).unwrap();
        let b = ce.goal_vector(&mut tape, &params, &[6, 1, 4]).unwrap();
        let (a, b) = (tape.value(a).data().to_vec(), tape.value(b).data().to_vec());
        assert_eq!(a, b);
    }

    #[test]
    fn shapes_hold_across_random_configs() {
        for seed in 0..6u64 {
            let mut rng = rng_stream(100 + seed, 0);
            use rand::Rng;
            let heads = [1usize, 2, 4][rng.random_range(0..3)];
            let d = heads * rng.random_range(2..5);
            let n = rng.random_range(3..9);
            let (params, _, ce) = setup(n, d, heads, 200 + seed);
            let mut tape = Tape::new();
            let c_a = ce.self_attention(&mut tape, &params, Residual::Raw).unwrap();
            let g = ce.goal_vector(&mut tape, &params, &[0, n - 1]).unwrap();
            let c_b = ce.goal_condition(&mut tape, &params, c_a, Some(g)).unwrap();
            assert_eq!(tape.value(c_b).shape(), &[n, d]);
        }
    }

    #[test]
    fn concept_encoder_gradients_pass_fd() {
        let (mut params, _, ce) = setup(4, 4, 2, 15);
        let report = check_grads_default(&mut params, |tape, params| {
            let c_a = ce.self_attention(tape, params, Residual::Value)?;
            let g = ce.goal_vector(tape, params, &[1, 3])?;
            let c_b = ce.goal_condition(tape, params, c_a, Some(g))?;
            tape.mean(c_b)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report:?}");
    }
}
