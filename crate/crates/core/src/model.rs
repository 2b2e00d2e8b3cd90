//! The assembled recommender: configuration, parameter allocation, and
//! checkpoint-compatible reattachment.

use crate::decoder::{
    init_scoring, make_schedule, DiffusionSchedule, NoiseNet, Scoring, TIME_DIM, TRUNK_WIDTH,
};
use crate::encoder::{Calibration, ConceptEncoder, GaussianLstmEncoder, Residual};
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell};
use crate::rng::rng_stream;
use crate::tape::{Tape, Var};
use crate::tensor::ParamSet;
use serde::{Deserialize, Serialize};

fn default_d() -> usize {
    64
}
fn default_heads() -> usize {
    1
}
fn default_steps() -> usize {
    10
}
fn default_beta_start() -> f64 {
    0.1
}
fn default_beta_end() -> f64 {
    0.5
}

/// Architecture hyperparameters; everything needed to rebuild a model around
/// a saved parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_concepts: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_d")]
    pub d_cond: usize,
    #[serde(default = "default_steps")]
    pub diffusion_steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub residual: Residual,
    #[serde(default)]
    pub scoring: Scoring,
    #[serde(default)]
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(n_concepts: usize) -> Self {
        ModelConfig {
            n_concepts,
            d: default_d(),
            heads: default_heads(),
            d_cond: default_d(),
            diffusion_steps: default_steps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
            calibration: Calibration::default(),
            residual: Residual::default(),
            scoring: Scoring::default(),
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_concepts < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 concepts, got {}",
                self.n_concepts
            )));
        }
        if self.d == 0 || self.d_cond == 0 {
            return Err(Error::InvalidConfig("embedding dims must be positive".into()));
        }
        if !(1..=4).contains(&self.heads) || self.d % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads must be in 1..=4 and divide d, got heads={} d={}",
                self.heads, self.d
            )));
        }
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// All model components plus the noise schedule, over one shared `ParamSet`.
#[derive(Debug, Clone)]
pub struct UGlad {
    pub cfg: ModelConfig,
    pub encoder: GaussianLstmEncoder,
    pub concepts: ConceptEncoder,
    pub noise: NoiseNet,
    pub rollout: LstmCell,
    direct1: Linear,
    direct2: Linear,
    sched: DiffusionSchedule,
}

impl UGlad {
    /// Allocate fresh parameters (seeded by `cfg.init_seed`) and the model
    /// views over them. The set always includes the feed-forward latent map
    /// used by the diffusion-free ablation, so checkpoints have one layout
    /// per config regardless of training flags.
    pub fn init(cfg: ModelConfig) -> Result<(ParamSet, UGlad)> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut rng = rng_stream(cfg.init_seed, 0x0DE1);
        GaussianLstmEncoder::init(&mut params, cfg.d, &mut rng)?;
        ConceptEncoder::init(&mut params, cfg.n_concepts, cfg.d, cfg.heads, &mut rng)?;
        NoiseNet::init(&mut params, cfg.d, cfg.d_cond, &mut rng)?;
        init_scoring(&mut params, cfg.d, &mut rng)?;
        LstmCell::init(&mut params, "dec.lstm", 2 * cfg.d, cfg.d, &mut rng)?;
        Linear::init(&mut params, "dec.direct1", cfg.d_cond + cfg.d, TRUNK_WIDTH, &mut rng)?;
        Linear::init(&mut params, "dec.direct2", TRUNK_WIDTH, cfg.d, &mut rng)?;
        let model = Self::attach_unchecked(cfg)?;
        Ok((params, model))
    }

    /// Rebuild the model views over an existing parameter set (e.g. loaded
    /// from a checkpoint), verifying that shapes match the config.
    pub fn attach(cfg: ModelConfig, params: &ParamSet) -> Result<UGlad> {
        cfg.validate()?;
        expect_shape(params, "ce.embed", &[cfg.n_concepts, cfg.d])?;
        expect_shape(params, "enc.correct", &[2, cfg.d])?;
        expect_shape(params, "enc.lstm.w", &[4 * cfg.d, 3 * cfg.d])?;
        expect_shape(params, "enc.mu.w", &[cfg.d, cfg.d])?;
        expect_shape(
            params,
            "dec.t1.w",
            &[TRUNK_WIDTH, cfg.d + TIME_DIM + cfg.d_cond + cfg.d],
        )?;
        expect_shape(params, "dec.fp2.w", &[cfg.d_cond, TRUNK_WIDTH])?;
        expect_shape(params, "dec.score.w", &[cfg.d, cfg.d])?;
        expect_shape(params, "dec.lstm.w", &[4 * cfg.d, 3 * cfg.d])?;
        expect_shape(params, "dec.direct1.w", &[TRUNK_WIDTH, cfg.d_cond + cfg.d])?;
        Self::attach_unchecked(cfg)
    }

    fn attach_unchecked(cfg: ModelConfig) -> Result<UGlad> {
        let sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
        Ok(UGlad {
            encoder: GaussianLstmEncoder::attach(cfg.d),
            concepts: ConceptEncoder::attach(cfg.n_concepts, cfg.d, cfg.heads)?,
            noise: NoiseNet::attach(cfg.d, cfg.d_cond)?,
            rollout: LstmCell::layout("dec.lstm", 2 * cfg.d, cfg.d),
            direct1: Linear::layout("dec.direct1", cfg.d_cond + cfg.d, TRUNK_WIDTH),
            direct2: Linear::layout("dec.direct2", TRUNK_WIDTH, cfg.d),
            sched,
            cfg,
        })
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    /// Interaction embedding u: concept row next to the correctness row,
    /// shared between the history encoder and the rollout cell.
    pub fn interaction_embedding(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        concept: usize,
        correct: u8,
    ) -> Result<Var> {
        if concept >= self.cfg.n_concepts {
            return Err(Error::IndexOutOfBounds {
                what: "concept",
                index: concept,
                len: self.cfg.n_concepts,
            });
        }
        let concepts = tape.param(params, "ce.embed")?;
        let table = tape.param(params, "enc.correct")?;
        let ce = tape.select_row(concepts, concept)?;
        let ye = tape.select_row(table, (correct > 0) as usize)?;
        tape.concat(ce, ye)
    }

    /// Feed-forward condition-to-latent map used when the diffusion sampler
    /// is ablated away. Stays on the tape so the policy loss can train it.
    pub fn direct_latent(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        cond: Var,
        goal: Var,
    ) -> Result<Var> {
        let x = tape.concat(cond, goal)?;
        let h = self.direct1.forward(tape, params, x)?;
        let h = tape.silu(h)?;
        self.direct2.forward(tape, params, h)
    }
}

fn expect_shape(params: &ParamSet, name: &str, expect: &[usize]) -> Result<()> {
    let t = params
        .get(name)
        .map_err(|_| Error::BadCheckpoint(format!("missing parameter {name}")))?;
    if t.shape() != expect {
        return Err(Error::BadCheckpoint(format!(
            "parameter {name} has shape {:?}, config implies {:?}",
            t.shape(),
            expect
        )));
    }
    Ok(())
}
