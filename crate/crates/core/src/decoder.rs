//! Diffusion decoder: noise schedule, conditional noise-prediction network,
//! reverse-process latent sampling, and masked concept scoring.

use crate::error::{Error, Result};
use crate::nn::{time_embedding, Linear};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::{ParamSet, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sinusoidal timestep-embedding width fed to the noise net.
pub const TIME_DIM: usize = 32;
/// Hidden width of the noise-net trunk and of the conditioning projection.
pub const TRUNK_WIDTH: usize = 128;

/// Linear variance schedule for the forward noising process.
///
/// `beta[t-1]` is the variance added at step `t` (1-based). `alpha_bar` has
/// length `steps + 1` with `alpha_bar[0] = 1`, so `alpha_bar[t]` is the
/// retained signal fraction after `t` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Build a linear schedule from `beta_start` to `beta_end` over `steps`
/// steps. Requires `steps >= 1` and `0 < beta_start <= beta_end < 1`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::InvalidConfig("diffusion steps must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for (t, &a) in alpha.iter().enumerate() {
        acc *= a;
        if !(acc > 0.0 && acc < alpha_bar[t]) {
            return Err(Error::NonFinite { context: format!("alpha_bar at t={}", t + 1) });
        }
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { steps, beta, alpha, alpha_bar })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Variance added at step `t` (1-based).
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Retained signal fraction after `t` steps; `alpha_bar_t(0) == 1`.
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Full retained-signal table, length `steps + 1`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Reverse-step noise scale sigma_t; zero at `t = 1` because
    /// `alpha_bar_t(0) = 1`.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        let var = self.beta_t(t) * (1.0 - self.alpha_bar_t(t - 1)) / (1.0 - self.alpha_bar_t(t));
        var.max(0.0).sqrt()
    }

    fn check_step(&self, t: usize, op: &'static str) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::IndexOutOfBounds { what: op, index: t, len: self.steps });
        }
        Ok(())
    }
}

/// Forward noising: `c_t = sqrt(alpha_bar_t) * c0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(
    c0: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    sched.check_step(t, "forward_noise step")?;
    if c0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            op: "forward_noise",
            detail: format!("c0 len {} vs eps len {}", c0.len(), eps.len()),
        });
    }
    let ab = sched.alpha_bar_t(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(c0.iter().zip(eps).map(|(&c, &e)| s * c + n * e).collect())
}

/// Taped version of [`forward_noise`] for training the noise net.
pub fn forward_noise_taped(
    tape: &mut Tape,
    c0: Var,
    t: usize,
    sched: &DiffusionSchedule,
    eps: Var,
) -> Result<Var> {
    sched.check_step(t, "forward_noise step")?;
    let ab = sched.alpha_bar_t(t);
    let signal = tape.affine_const(c0, ab.sqrt(), 0.0)?;
    let noise = tape.affine_const(eps, (1.0 - ab).sqrt(), 0.0)?;
    tape.add(signal, noise)
}

/// One reverse step: given `c_t` and a noise estimate, produce `c_{t-1}`.
///
/// `z` is the fresh Gaussian draw for the stochastic part; it is ignored at
/// `t = 1` where the posterior scale is exactly zero.
pub fn denoise_step(
    c_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    z: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t, "denoise step")?;
    if c_t.len() != eps_hat.len() || c_t.len() != z.len() {
        return Err(Error::ShapeMismatch {
            op: "denoise_step",
            detail: format!("c_t len {} vs eps len {} vs z len {}", c_t.len(), eps_hat.len(), z.len()),
        });
    }
    let inv_sqrt_a = 1.0 / sched.alpha_t(t).sqrt();
    let coef = sched.beta_t(t) / (1.0 - sched.alpha_bar_t(t)).sqrt();
    let sig = if t == 1 { 0.0 } else { sched.posterior_sigma(t) };
    Ok(c_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((&c, &e), &zv)| inv_sqrt_a * (c - coef * e) + sig * zv)
        .collect())
}

/// Run the reverse chain from `init = c_T` down to `c_0`.
///
/// `eps_hat(c_t, t)` supplies the noise estimate for each step and `noise(t)`
/// the Gaussian draw (queried only for `t > 1`). Any non-finite intermediate
/// aborts with the step index in the error.
pub fn sample_chain(
    sched: &DiffusionSchedule,
    init: Vec<f64>,
    mut eps_hat: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
    mut noise: impl FnMut(usize) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let d = init.len();
    let mut c = init;
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: format!("sample_chain init at t={}", sched.steps) });
    }
    for t in (1..=sched.steps).rev() {
        let eps = eps_hat(&c, t)?;
        let z = if t > 1 { noise(t) } else { vec![0.0; d] };
        c = denoise_step(&c, t, &eps, &z, sched)?;
        if !c.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("sample_chain at t={}", t - 1) });
        }
    }
    Ok(c)
}

/// Noise-prediction network.
///
/// The trunk consumes the noisy latent, a sinusoidal timestep embedding, the
/// projected learner state, and the goal vector, concatenated in that order.
/// The goal enters here rather than only at scoring time: a goal term added
/// uniformly to every concept logit cancels inside the softmax, so routing
/// it through the denoiser is what lets the sampled latent depend on the
/// goal at all. Ablations that drop goal conditioning pass a zero vector.
#[derive(Debug, Clone)]
pub struct NoiseNet {
    pub d: usize,
    pub d_cond: usize,
    fp1: Linear,
    fp2: Linear,
    t1: Linear,
    t2: Linear,
    t3: Linear,
}

impl NoiseNet {
    /// Name-and-shape view over already-allocated parameters.
    pub fn attach(d: usize, d_cond: usize) -> Result<Self> {
        if d == 0 || d_cond == 0 {
            return Err(Error::InvalidConfig("noise net dims must be positive".into()));
        }
        let din = d + TIME_DIM + d_cond + d;
        Ok(NoiseNet {
            d,
            d_cond,
            fp1: Linear::layout("dec.fp1", d, TRUNK_WIDTH),
            fp2: Linear::layout("dec.fp2", TRUNK_WIDTH, d_cond),
            t1: Linear::layout("dec.t1", din, TRUNK_WIDTH),
            t2: Linear::layout("dec.t2", TRUNK_WIDTH, TRUNK_WIDTH),
            t3: Linear::layout("dec.t3", TRUNK_WIDTH, d),
        })
    }

    pub fn init(
        params: &mut ParamSet,
        d: usize,
        d_cond: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let net = Self::attach(d, d_cond)?;
        Linear::init(params, "dec.fp1", net.fp1.din, net.fp1.dout, rng)?;
        Linear::init(params, "dec.fp2", net.fp2.din, net.fp2.dout, rng)?;
        Linear::init(params, "dec.t1", net.t1.din, net.t1.dout, rng)?;
        Linear::init(params, "dec.t2", net.t2.din, net.t2.dout, rng)?;
        Linear::init(params, "dec.t3", net.t3.din, net.t3.dout, rng)?;
        Ok(net)
    }

    /// Conditioning projection of a learner state (one hidden layer, silu).
    pub fn condition(&self, tape: &mut Tape, params: &ParamSet, h: Var) -> Result<Var> {
        let hidden = self.fp1.forward(tape, params, h)?;
        let hidden = tape.silu(hidden)?;
        self.fp2.forward(tape, params, hidden)
    }

    /// Predict the noise in `c_t` given the step, condition and goal.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        c_t: Var,
        t: usize,
        cond: Var,
        goal: Var,
    ) -> Result<Var> {
        let temb = tape.input(time_embedding(t, TIME_DIM))?;
        let x = tape.concat(c_t, temb)?;
        let x = tape.concat(x, cond)?;
        let x = tape.concat(x, goal)?;
        let x = self.t1.forward(tape, params, x)?;
        let x = tape.silu(x)?;
        let x = self.t2.forward(tape, params, x)?;
        let x = tape.silu(x)?;
        self.t3.forward(tape, params, x)
    }

    /// Tape-free forward pass for reverse-process sampling; matches the taped
    /// forward bit for bit.
    pub fn forward_plain(
        &self,
        params: &ParamSet,
        c_t: &[f64],
        t: usize,
        cond: &[f64],
        goal: &[f64],
    ) -> Result<Vec<f64>> {
        if c_t.len() != self.d || cond.len() != self.d_cond || goal.len() != self.d {
            return Err(Error::ShapeMismatch {
                op: "noise_net",
                detail: format!(
                    "c_t {} cond {} goal {} vs dims d={} d_cond={}",
                    c_t.len(),
                    cond.len(),
                    goal.len(),
                    self.d,
                    self.d_cond
                ),
            });
        }
        let temb = time_embedding(t, TIME_DIM);
        let mut x = Vec::with_capacity(self.d + TIME_DIM + self.d_cond + self.d);
        x.extend_from_slice(c_t);
        x.extend_from_slice(temb.data());
        x.extend_from_slice(cond);
        x.extend_from_slice(goal);
        let x = linear_plain(params, &self.t1, &x)?;
        let x = silu_plain(&x);
        let x = linear_plain(params, &self.t2, &x)?;
        let x = silu_plain(&x);
        linear_plain(params, &self.t3, &x)
    }

    /// Tape-free conditioning projection; matches [`NoiseNet::condition`].
    pub fn condition_plain(&self, params: &ParamSet, h: &[f64]) -> Result<Vec<f64>> {
        let hidden = linear_plain(params, &self.fp1, h)?;
        let hidden = silu_plain(&hidden);
        linear_plain(params, &self.fp2, &hidden)
    }
}

fn linear_plain(params: &ParamSet, lin: &Linear, x: &[f64]) -> Result<Vec<f64>> {
    let w = params.get(&lin.w)?;
    let b = params.get(&lin.b)?;
    let (rows, cols) = w.dims2()?;
    if cols != x.len() {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("{}: {}x{} vs input {}", lin.w, rows, cols, x.len()),
        });
    }
    let wd = w.data();
    let bd = b.data();
    Ok((0..rows)
        .map(|r| {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += wd[r * cols + c] * x[c];
            }
            acc + bd[r]
        })
        .collect())
}

fn silu_plain(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Draw a latent by running the reverse process under the noise net, seeded
/// entirely by `rng`: one d-vector for `c_T`, then one per step above 1.
pub fn sample_latent(
    net: &NoiseNet,
    params: &ParamSet,
    sched: &DiffusionSchedule,
    cond: &[f64],
    goal: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let d = net.d;
    let init = Tensor::randn(&[d], 1.0, rng).data().to_vec();
    let mut draws: Vec<Vec<f64>> = (2..=sched.steps())
        .rev()
        .map(|_| Tensor::randn(&[d], 1.0, rng).data().to_vec())
        .collect();
    sample_chain(
        sched,
        init,
        |c, t| net.forward_plain(params, c, t, cond, goal),
        |_| draws.pop().unwrap_or_else(|| vec![0.0; d]),
    )
}

/// Taped version of [`denoise_step`]: the Gaussian draw enters as a constant
/// input, so gradients flow through `c_t` and `eps_hat` only. `z` is required
/// for `t > 1` and ignored at `t = 1` (zero posterior scale).
pub fn denoise_step_taped(
    tape: &mut Tape,
    c_t: Var,
    t: usize,
    eps_hat: Var,
    z: Option<&[f64]>,
    sched: &DiffusionSchedule,
) -> Result<Var> {
    sched.check_step(t, "denoise step")?;
    let inv_sqrt_a = 1.0 / sched.alpha_t(t).sqrt();
    let coef = sched.beta_t(t) / (1.0 - sched.alpha_bar_t(t)).sqrt();
    let scaled = tape.affine_const(eps_hat, coef, 0.0)?;
    let centered = tape.sub(c_t, scaled)?;
    let mean = tape.affine_const(centered, inv_sqrt_a, 0.0)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = z.ok_or_else(|| Error::BadData(format!("denoise step {t} needs a Gaussian draw")))?;
    let zt = tape.input(Tensor::vector(z.to_vec()))?;
    let noise = tape.affine_const(zt, sched.posterior_sigma(t), 0.0)?;
    tape.add(mean, noise)
}

/// Reverse chain built on the tape, so losses on the sampled latent reach
/// the noise net and its conditioning (the Gaussian draws stay fixed).
/// Consumes `rng` exactly like [`sample_latent`] and returns the draws for
/// exact replay.
pub fn sample_latent_taped(
    tape: &mut Tape,
    net: &NoiseNet,
    params: &ParamSet,
    sched: &DiffusionSchedule,
    cond: Var,
    goal: Var,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Vec<Vec<f64>>)> {
    let draws: Vec<Vec<f64>> = (0..sched.steps())
        .map(|_| Tensor::randn(&[net.d], 1.0, rng).data().to_vec())
        .collect();
    let latent = sample_latent_taped_with(tape, net, params, sched, cond, goal, &draws)?;
    Ok((latent, draws))
}

/// Rebuild the taped reverse chain from recorded draws: `draws[0]` starts the
/// chain as `c_T`, later entries are the per-step Gaussians consumed from the
/// back (the last entry belongs to `t = T`), matching [`sample_latent`].
pub fn sample_latent_taped_with(
    tape: &mut Tape,
    net: &NoiseNet,
    params: &ParamSet,
    sched: &DiffusionSchedule,
    cond: Var,
    goal: Var,
    draws: &[Vec<f64>],
) -> Result<Var> {
    if draws.len() != sched.steps() {
        return Err(Error::ShapeMismatch {
            op: "sample_latent_taped",
            detail: format!("{} draws for a {}-step chain", draws.len(), sched.steps()),
        });
    }
    let mut zs: Vec<&[f64]> = draws[1..].iter().map(|v| v.as_slice()).collect();
    let mut c = tape.input(Tensor::vector(draws[0].clone()))?;
    for t in (1..=sched.steps()).rev() {
        let eps_hat = net.forward(tape, params, c, t, cond, goal)?;
        c = denoise_step_taped(tape, c, t, eps_hat, zs.pop(), sched)?;
        if !tape.value(c).data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { context: format!("sample_chain at t={}", t - 1) });
        }
    }
    Ok(c)
}

/// How a sampled latent is turned into per-concept logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `logit_j = c_b[j] . (W c~)` with a learned square matrix.
    #[default]
    Bilinear,
    /// `logit_j = v . (c~ + c_b[j])` with a learned vector.
    Additive,
}

/// Allocate the scoring parameters for both variants.
pub fn init_scoring(params: &mut ParamSet, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    crate::nn::init_weight(params, "dec.score.w", d, d, rng)?;
    params.insert("dec.score.v", Tensor::randn(&[d], 1.0 / (d as f64).sqrt(), rng))
}

/// Per-concept logits from goal-conditioned embeddings `c_b` (N x d), a
/// sampled latent (d), and the goal vector (d).
///
/// The bilinear form scores each row against `W_d (c~ + G)`: the goal shifts
/// the matching key, which is the one place a goal term survives the softmax
/// (anything added uniformly to every logit cancels). The additive form has
/// only such uniform shifts available, so the goal is omitted there.
pub fn score_logits(
    tape: &mut Tape,
    params: &ParamSet,
    c_b: Var,
    latent: Var,
    goal: Var,
    scoring: Scoring,
) -> Result<Var> {
    match scoring {
        Scoring::Bilinear => {
            let w = tape.param(params, "dec.score.w")?;
            let query = tape.add(latent, goal)?;
            let key = tape.matvec(w, query)?;
            tape.matvec(c_b, key)
        }
        Scoring::Additive => {
            let v = tape.param(params, "dec.score.v")?;
            let per_row = tape.matvec(c_b, v)?;
            let shift = tape.dot(v, latent)?;
            tape.add(per_row, shift)
        }
    }
}

/// Masked selection distribution over concepts: visited entries get exactly
/// zero probability. Errors with "path exhausted" when nothing is left.
pub fn score_concepts(
    tape: &mut Tape,
    params: &ParamSet,
    c_b: Var,
    latent: Var,
    goal: Var,
    visited: &[bool],
    scoring: Scoring,
) -> Result<Var> {
    if visited.iter().all(|&v| v) {
        return Err(Error::BadData("path exhausted: every concept already visited".into()));
    }
    let logits = score_logits(tape, params, c_b, latent, goal, scoring)?;
    tape.masked_softmax(logits, visited)
}
