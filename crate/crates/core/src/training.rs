//! Episode rollout, the combined policy/denoising loss, and the training
//! loop.
//!
//! An episode records every random draw it makes (reverse-chain Gaussians,
//! concept choices, simulated responses, and the per-step denoising triples)
//! in an [`EpisodeTrace`]. Replaying a trace freezes all sampling, which
//! makes the loss a smooth function of the parameters — that is what lets
//! finite differences validate the full-loss gradient, and what defines the
//! gradient semantics: the draws are constants, the latent is a
//! differentiable function of the parameters given those draws, and the
//! discrete concept choices contribute through the score function.

use crate::data::Session;
use crate::decoder::{forward_noise_taped, sample_latent_taped, sample_latent_taped_with, score_logits};
use crate::encoder::Calibration;
use crate::error::{Error, Result};
use crate::model::UGlad;
use crate::optim::{clip_global_norm, Adam};
use crate::rng::rng_stream;
use crate::sim::{improvement_rate, DktInfer, LearnerEnv};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamSet, Tensor};
use crate::data::PrereqDag;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// Stream-index bases keeping training draws disjoint from data-generation
// streams under a shared seed.
const EPISODE_STREAM: u64 = 1 << 40;
const PROBE_STREAM: u64 = 1 << 41;
const SHUFFLE_STREAM: u64 = 1 << 42;

/// Which model components are switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Ablation {
    /// Use the raw mean state: no variance head influence.
    #[serde(default)]
    pub no_uncertainty: bool,
    /// Replace the reverse-diffusion sampler with a feed-forward map.
    #[serde(default)]
    pub no_diffusion: bool,
    /// Drop the denoising loss (forces lambda to zero).
    #[serde(default)]
    pub no_noise_loss: bool,
    /// Remove goal conditioning from concept scoring and the denoiser.
    #[serde(default)]
    pub no_goal: bool,
}

impl Ablation {
    /// Parse a comma-separated flag list; "none" and "full" mean no ablation.
    pub fn parse(s: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" | "full" => {}
                "no_uncertainty" => a.no_uncertainty = true,
                "no_diffusion" => a.no_diffusion = true,
                "no_noise_loss" => a.no_noise_loss = true,
                "no_goal" => a.no_goal = true,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown ablation {other:?}; expected one of \
                         no_uncertainty, no_diffusion, no_noise_loss, no_goal"
                    )))
                }
            }
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.no_uncertainty {
            parts.push("no_uncertainty");
        }
        if self.no_diffusion {
            parts.push("no_diffusion");
        }
        if self.no_noise_loss {
            parts.push("no_noise_loss");
        }
        if self.no_goal {
            parts.push("no_goal");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(",")
        }
    }
}

fn default_lambda() -> f64 {
    0.5
}
fn default_path_len() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    32
}
fn default_clip() -> f64 {
    5.0
}

/// Optimization settings for the recommender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the denoising loss in the total objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Path length K decoded per episode.
    #[serde(default = "default_path_len")]
    pub path_len: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// Momentum of an optional moving-average reward baseline subtracted
    /// from the improvement rate in the policy loss (variance reduction).
    /// The average is kept per session — most reward variance is session
    /// difficulty — with a global fallback before a session's first episode.
    /// `None` trains on the raw rate.
    #[serde(default)]
    pub baseline_momentum: Option<f64>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: default_lambda(),
            path_len: default_path_len(),
            lr: default_lr(),
            epochs: default_epochs(),
            batch: default_batch(),
            seed: 0,
            clip: default_clip(),
            baseline_momentum: None,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.path_len == 0 {
            return Err(Error::InvalidConfig("path_len must be >= 1".into()));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch == 0 || !(self.clip > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad optimizer settings: lr {} epochs {} batch {} clip {}",
                self.lr, self.epochs, self.batch, self.clip
            )));
        }
        if let Some(m) = self.baseline_momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::InvalidConfig(format!(
                    "baseline_momentum must be in [0, 1), got {m}"
                )));
            }
        }
        Ok(())
    }

    /// Denoising-loss weight after applying the ablation switch.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_noise_loss {
            0.0
        } else {
            self.lambda
        }
    }
}

/// Recipe for building a fresh learner environment per episode.
#[derive(Debug, Clone)]
pub enum EnvSpec {
    Oracle { dag: Arc<PrereqDag>, alpha: f64, slip: f64, guess: f64 },
    Dkt { infer: Arc<DktInfer> },
}

impl EnvSpec {
    pub fn fresh(&self) -> LearnerEnv {
        match self {
            EnvSpec::Oracle { dag, alpha, slip, guess } => {
                LearnerEnv::oracle(dag.clone(), *alpha, *slip, *guess)
            }
            EnvSpec::Dkt { infer } => LearnerEnv::dkt(infer.clone()),
        }
    }

    pub fn n_concepts(&self) -> usize {
        match self {
            EnvSpec::Oracle { dag, .. } => dag.n(),
            EnvSpec::Dkt { infer } => infer.n_concepts,
        }
    }
}

/// Everything an episode drew at random, keyed by decoded step. Replaying a
/// trace reproduces the episode exactly and keeps it differentiable.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeTrace {
    /// Per decoded step: the reverse-chain draws (start plus per-step
    /// Gaussians) that produced its latent.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub choices: Vec<usize>,
    pub responses: Vec<u8>,
    pub ld_steps: Vec<usize>,
    pub ld_eps: Vec<Vec<f64>>,
    /// Detached denoising targets. The policy treats them as constants, so a
    /// replay must hold them fixed for finite differences to agree.
    pub ld_targets: Vec<Vec<f64>>,
}

/// Randomness source for an episode: draw fresh or replay a trace.
pub enum Draws<'a> {
    Fresh(&'a mut ChaCha8Rng),
    Replay(&'a EpisodeTrace),
}

/// Per-episode decode and loss settings.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub path_len: usize,
    pub lambda: f64,
    pub ablation: Ablation,
    /// Argmax decode instead of sampling from the selection distribution.
    pub greedy: bool,
    /// Collect the denoising terms (training) or skip them (evaluation).
    pub train: bool,
    /// Threshold simulated responses at 0.5 instead of sampling them.
    pub deterministic_env: bool,
    /// Reward baseline subtracted from the improvement rate in the policy
    /// loss; zero recovers the raw-reward gradient.
    pub baseline: f64,
}

impl EpisodeOptions {
    pub fn training(cfg: &TrainConfig) -> Self {
        EpisodeOptions {
            path_len: cfg.path_len,
            lambda: cfg.effective_lambda(),
            ablation: cfg.ablation,
            greedy: false,
            train: true,
            deterministic_env: false,
            baseline: 0.0,
        }
    }

    pub fn evaluation(path_len: usize, ablation: Ablation) -> Self {
        EpisodeOptions {
            path_len,
            lambda: 0.0,
            ablation,
            greedy: true,
            train: false,
            deterministic_env: false,
            baseline: 0.0,
        }
    }

    fn probe(cfg: &TrainConfig) -> Self {
        Self::evaluation(cfg.path_len, cfg.ablation)
    }
}

/// Observable outcome of one decoded episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub path: Vec<usize>,
    pub responses: Vec<u8>,
    pub logprobs: Vec<f64>,
    pub e_b: f64,
    pub e_e: f64,
    pub e_t: f64,
    pub l_r: f64,
    pub l_d: f64,
    pub l_total: f64,
}

/// An episode plus its loss node and recorded randomness.
#[derive(Debug)]
pub struct Episode {
    pub result: EpisodeResult,
    pub trace: EpisodeTrace,
    pub loss: Var,
}

/// Policy loss from an episode outcome: scaled negative log-likelihood of
/// the decoded path, weighted by the improvement rate.
pub fn loss_policy(e_t: f64, logprobs: &[f64]) -> f64 {
    -e_t * logprobs.iter().sum::<f64>()
}

/// Mean squared error between a noise prediction and its target.
pub fn loss_noise(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "loss_noise",
            detail: format!("pred len {} vs target len {}", pred.len(), target.len()),
        });
    }
    let n = pred.len().max(1);
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64)
}

pub fn loss_total(l_r: f64, lambda: f64, l_d: f64) -> f64 {
    l_r + lambda * l_d
}

/// Decode one path against the environment and assemble the episode loss on
/// the tape.
///
/// Draw order per decoded step (fresh mode): latent chain draws, concept
/// choice (sampling decode only), simulated response, denoising step index,
/// denoising noise vector. Replay mode consumes the trace instead and makes
/// no RNG calls.
pub fn run_episode(
    tape: &mut Tape,
    model: &UGlad,
    params: &ParamSet,
    session: &Session,
    env: &mut LearnerEnv,
    opts: &EpisodeOptions,
    draws: &mut Draws,
) -> Result<Episode> {
    let n = model.cfg.n_concepts;
    let d = model.cfg.d;
    if env.n_concepts() != n {
        return Err(Error::InvalidConfig(format!(
            "environment has {} concepts, model has {n}",
            env.n_concepts()
        )));
    }
    if opts.path_len == 0 || opts.path_len > n {
        return Err(Error::InvalidConfig(format!(
            "path length {} exceeds the {n} unvisited concepts",
            opts.path_len
        )));
    }
    if session.goals.is_empty() || session.goals.iter().any(|&g| g >= n) {
        return Err(Error::BadData(format!(
            "session {} has invalid goals {:?}",
            session.student_id, session.goals
        )));
    }

    // Baseline goal mastery after replaying the prefix.
    env.ingest(&session.history);
    let e_b = env.goal_score(&session.goals);

    // Learner state from the interaction prefix.
    let calibration = if opts.ablation.no_uncertainty {
        Calibration::NoUncertainty
    } else {
        model.cfg.calibration
    };
    let states = model.encoder.encode(tape, params, &session.history, calibration)?;
    let mut h = states.last().expect("encode returns at least one state").h_cal;
    let mut cell = tape.input(Tensor::zeros(&[d]))?;

    // Concept embeddings, optionally conditioned on the goal set.
    let c_a = model.concepts.self_attention(tape, params, model.cfg.residual)?;
    let goal = if opts.ablation.no_goal {
        None
    } else {
        Some(model.concepts.goal_vector(tape, params, &session.goals)?)
    };
    let c_b = model.concepts.goal_condition(tape, params, c_a, goal)?;
    let goal_slot = match goal {
        Some(g) => g,
        None => tape.input(Tensor::zeros(&[d]))?,
    };

    let sched = model.schedule();
    let mut visited = vec![false; n];
    let mut path = Vec::with_capacity(opts.path_len);
    let mut responses = Vec::with_capacity(opts.path_len);
    let mut logprob_vals = Vec::with_capacity(opts.path_len);
    let mut trace = EpisodeTrace::default();
    let mut logprob_sum: Option<Var> = None;
    let mut ld_terms: Vec<Var> = Vec::new();

    for k in 0..opts.path_len {
        let cond = model.noise.condition(tape, params, h)?;

        // Latent plan for this step: a taped reverse chain, so the policy
        // loss trains the noise net through the latent it scored.
        let latent = if opts.ablation.no_diffusion {
            model.direct_latent(tape, params, cond, goal_slot)?
        } else {
            match draws {
                Draws::Fresh(rng) => {
                    let (latent, chain) = sample_latent_taped(
                        tape,
                        &model.noise,
                        params,
                        sched,
                        cond,
                        goal_slot,
                        rng,
                    )?;
                    trace.chains.push(chain);
                    latent
                }
                Draws::Replay(tr) => {
                    let chain = tr
                        .chains
                        .get(k)
                        .ok_or_else(|| Error::BadData(format!("trace has no chain for step {k}")))?;
                    trace.chains.push(chain.clone());
                    sample_latent_taped_with(
                        tape,
                        &model.noise,
                        params,
                        sched,
                        cond,
                        goal_slot,
                        chain,
                    )?
                }
            }
        };

        // Score the unvisited concepts and pick one.
        let logits = score_logits(tape, params, c_b, latent, goal_slot, model.cfg.scoring)?;
        let probs = tape.masked_softmax(logits, &visited)?;
        let chosen = match draws {
            Draws::Replay(tr) => *tr
                .choices
                .get(k)
                .ok_or_else(|| Error::BadData(format!("trace has no choice for step {k}")))?,
            Draws::Fresh(rng) => {
                if opts.greedy {
                    argmax(tape.value(probs).data())
                } else {
                    sample_index(tape.value(probs).data(), rng.random::<f64>())
                }
            }
        };
        if visited.get(chosen).copied() != Some(false) {
            return Err(Error::BadData(format!("invalid concept {chosen} chosen at step {k}")));
        }
        let lp = tape.masked_logprob(logits, &visited, chosen)?;
        logprob_vals.push(tape.value(lp).item());
        logprob_sum = Some(match logprob_sum {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
        visited[chosen] = true;
        trace.choices.push(chosen);
        path.push(chosen);

        // The environment answers the recommended concept.
        let y = match draws {
            Draws::Replay(tr) => {
                let y = *tr
                    .responses
                    .get(k)
                    .ok_or_else(|| Error::BadData(format!("trace has no response for step {k}")))?;
                env.observe(chosen, y);
                y
            }
            Draws::Fresh(rng) => {
                if opts.deterministic_env {
                    env.respond_deterministic(chosen)
                } else {
                    env.respond(chosen, rng)
                }
            }
        };
        trace.responses.push(y);
        responses.push(y);

        // One denoising triple per decoded step: the clean target is the
        // (detached) embedding of the concept the policy just chose.
        if opts.train && !opts.ablation.no_diffusion {
            let (t, eps) = match draws {
                Draws::Fresh(rng) => {
                    let t = rng.random_range(1..=sched.steps());
                    (t, Tensor::randn(&[d], 1.0, rng).data().to_vec())
                }
                Draws::Replay(tr) => (
                    *tr.ld_steps.get(k).ok_or_else(|| {
                        Error::BadData(format!("trace has no denoise step for step {k}"))
                    })?,
                    tr.ld_eps
                        .get(k)
                        .ok_or_else(|| {
                            Error::BadData(format!("trace has no denoise noise for step {k}"))
                        })?
                        .clone(),
                ),
            };
            trace.ld_steps.push(t);
            trace.ld_eps.push(eps.clone());
            let c0 = match draws {
                Draws::Fresh(_) => {
                    let row = tape.select_row(c_b, chosen)?;
                    tape.detach(row)?
                }
                Draws::Replay(tr) => {
                    let vals = tr.ld_targets.get(k).ok_or_else(|| {
                        Error::BadData(format!("trace has no denoise target for step {k}"))
                    })?;
                    tape.input(Tensor::vector(vals.clone()))?
                }
            };
            trace.ld_targets.push(tape.value(c0).data().to_vec());
            let eps_v = tape.input(Tensor::vector(eps))?;
            let c_t = forward_noise_taped(tape, c0, t, sched, eps_v)?;
            let pred = model.noise.forward(tape, params, c_t, t, cond, goal_slot)?;
            ld_terms.push(tape.mse(pred, eps_v)?);
        }

        // Advance the rollout state with the consumed interaction.
        let u = model.interaction_embedding(tape, params, chosen, y)?;
        (h, cell) = model.rollout.step(tape, params, u, h, cell)?;
    }

    let e_e = env.goal_score(&session.goals);
    let e_t = improvement_rate(e_b, e_e)?;

    let sum_lp = logprob_sum.expect("path_len >= 1");
    let l_r = tape.affine_const(sum_lp, -(e_t - opts.baseline), 0.0)?;
    let l_d = match ld_terms.len() {
        0 => tape.scalar_input(0.0)?,
        m => {
            let mut acc = ld_terms[0];
            for &term in &ld_terms[1..] {
                acc = tape.add(acc, term)?;
            }
            tape.affine_const(acc, 1.0 / m as f64, 0.0)?
        }
    };
    let weighted = tape.affine_const(l_d, opts.lambda, 0.0)?;
    let loss = tape.add(l_r, weighted)?;

    let result = EpisodeResult {
        e_b,
        e_e,
        e_t,
        l_r: tape.value(l_r).item(),
        l_d: tape.value(l_d).item(),
        l_total: tape.value(loss).item(),
        path,
        responses,
        logprobs: logprob_vals,
    };
    if !result.l_total.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "episode loss for session {}: path {:?}, e_b {}, e_e {}, l_r {}, l_d {}, logprobs {:?}",
                session.student_id,
                result.path,
                result.e_b,
                result.e_e,
                result.l_r,
                result.l_d,
                result.logprobs
            ),
        });
    }
    Ok(Episode { result, trace, loss })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector; masked entries are exact
/// zeros and can never be hit. Falls through to the last positive entry.
fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_e_t: f64,
    pub mean_l_r: f64,
    pub mean_l_d: f64,
    /// Mean improvement rate of greedy decodes on the held-out probe set.
    pub probe_e_t: f64,
}

/// Minibatch REINFORCE + denoising training over the given sessions.
/// Returns one stats row per epoch; `params` is updated in place.
pub fn train(
    model: &UGlad,
    params: &mut ParamSet,
    sessions: &[Session],
    probe: &[Session],
    env: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::BadData("no training sessions".into()));
    }
    let opts = EpisodeOptions::training(cfg);
    let mut adam = Adam::new(cfg.lr);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut reward_avg: Option<f64> = None;
    let mut session_avg: Vec<Option<f64>> = vec![None; sessions.len()];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        let mut shuffle_rng = rng_stream(cfg.seed, SHUFFLE_STREAM + epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }
        let (mut sum_et, mut sum_lr, mut sum_ld) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let mut tape = Tape::new();
                let mut episode_env = env.fresh();
                let mut rng = rng_stream(
                    cfg.seed,
                    EPISODE_STREAM + ((epoch as u64) << 24) + idx as u64,
                );
                let ep_opts = EpisodeOptions {
                    baseline: if cfg.baseline_momentum.is_some() {
                        session_avg[idx].or(reward_avg).unwrap_or(0.0)
                    } else {
                        0.0
                    },
                    ..opts
                };
                let ep = run_episode(
                    &mut tape,
                    model,
                    params,
                    &sessions[idx],
                    &mut episode_env,
                    &ep_opts,
                    &mut Draws::Fresh(&mut rng),
                )?;
                if let Some(m) = cfg.baseline_momentum {
                    let blend = |avg: Option<f64>| match avg {
                        None => ep.result.e_t,
                        Some(a) => m * a + (1.0 - m) * ep.result.e_t,
                    };
                    reward_avg = Some(blend(reward_avg));
                    session_avg[idx] = Some(blend(session_avg[idx]));
                }
                tape.backward_scaled(ep.loss, scale, params)?;
                sum_et += ep.result.e_t;
                sum_lr += ep.result.l_r;
                sum_ld += ep.result.l_d;
            }
            clip_global_norm(params, cfg.clip);
            adam.step(params)?;
        }
        let inv = 1.0 / sessions.len() as f64;
        stats.push(EpochStats {
            epoch,
            mean_e_t: sum_et * inv,
            mean_l_r: sum_lr * inv,
            mean_l_d: sum_ld * inv,
            probe_e_t: probe_mean_e_t(model, params, probe, env, cfg)?,
        });
    }
    Ok(stats)
}

/// Mean improvement rate of greedy decodes over a probe set, responses
/// drawn from a fixed per-session stream. Empty probe sets score zero.
pub fn probe_mean_e_t(
    model: &UGlad,
    params: &ParamSet,
    probe: &[Session],
    env: &EnvSpec,
    cfg: &TrainConfig,
) -> Result<f64> {
    if probe.is_empty() {
        return Ok(0.0);
    }
    let opts = EpisodeOptions::probe(cfg);
    let mut total = 0.0;
    for (si, session) in probe.iter().enumerate() {
        let mut tape = Tape::new();
        let mut episode_env = env.fresh();
        let mut rng = rng_stream(cfg.seed, PROBE_STREAM + si as u64);
        let ep = run_episode(
            &mut tape,
            model,
            params,
            session,
            &mut episode_env,
            &opts,
            &mut Draws::Fresh(&mut rng),
        )?;
        total += ep.result.e_t;
    }
    Ok(total / probe.len() as f64)
}
