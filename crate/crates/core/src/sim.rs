//! Learner simulation: a rule-based oracle mastery model, a trainable DKT
//! (LSTM knowledge-tracing) environment, and the improvement-rate metric
//! shared by training and evaluation.

use crate::data::{Dataset, PrereqDag, StudentSeq};
use crate::error::{Error, Result};
use crate::nn::{init_embedding, Linear, LstmCell};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::rng_stream;
use crate::tape::{self, Tape};
use crate::tensor::{ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

// ---- rule-based oracle ----

/// Per-concept mastery in [0, 1] evolving under a gated learning rule: a
/// correct answer closes a fraction of the remaining gap, scaled by how well
/// the prerequisites are mastered; a wrong answer decays mastery slightly.
#[derive(Debug, Clone)]
pub struct OracleState {
    m: Vec<f64>,
    alpha: f64,
}

impl OracleState {
    pub fn new(n: usize, alpha: f64) -> Self {
        OracleState { m: vec![0.0; n], alpha }
    }

    pub fn mastery(&self, c: usize) -> f64 {
        self.m[c]
    }

    pub fn masteries(&self) -> &[f64] {
        &self.m
    }

    /// Product of parent masteries; 1 when the concept has no prerequisites.
    pub fn prereq_product(&self, dag: &PrereqDag, c: usize) -> f64 {
        dag.parents(c).iter().map(|&p| self.m[p]).product()
    }

    pub fn response_prob(&self, c: usize, slip: f64, guess: f64) -> f64 {
        self.m[c] * (1.0 - slip) + (1.0 - self.m[c]) * guess
    }

    pub fn update(&mut self, dag: &PrereqDag, c: usize, correct: u8) {
        if correct == 1 {
            let gate = self.prereq_product(dag, c);
            self.m[c] += self.alpha * gate * (1.0 - self.m[c]);
        } else {
            self.m[c] *= 1.0 - self.alpha / 2.0;
        }
    }

    /// Mean mastery over the goal concepts only.
    pub fn goal_score(&self, goals: &[usize]) -> f64 {
        goals.iter().map(|&g| self.m[g]).sum::<f64>() / goals.len().max(1) as f64
    }
}

// ---- DKT (LSTM knowledge tracing) ----

/// Hyperparameters of the DKT environment model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DktConfig {
    /// Interaction-embedding width.
    pub d_in: usize,
    /// LSTM hidden width.
    pub d_h: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied after each epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Student-level train fraction; the rest is held out for AUC.
    pub split_ratio: f64,
    /// Weight of the prediction-consistency term (also score the event just
    /// consumed); keeps single-event responses coherent.
    pub recon_weight: f64,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            d_in: 24,
            d_h: 32,
            lr: 5e-3,
            lr_decay: 0.9,
            epochs: 20,
            batch: 8,
            seed: 0,
            split_ratio: 0.8,
            recon_weight: 0.3,
        }
    }
}

/// Parameter layout of the DKT: one embedding row per (concept, label) pair
/// (index = concept + label·N), an LSTM cell, and a per-concept logit head.
#[derive(Debug, Clone)]
pub struct DktModel {
    pub n_concepts: usize,
    pub d_in: usize,
    pub d_h: usize,
    lstm: LstmCell,
    head: Linear,
}

impl DktModel {
    pub fn init(
        params: &mut ParamSet,
        n_concepts: usize,
        d_in: usize,
        d_h: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        init_embedding(params, "dkt.embed", 2 * n_concepts, d_in, 0.1, rng)?;
        let lstm = LstmCell::init(params, "dkt.lstm", d_in, d_h, rng)?;
        let head = Linear::init(params, "dkt.head", d_h, n_concepts, rng)?;
        Ok(DktModel { n_concepts, d_in, d_h, lstm, head })
    }

    /// Mean next-step BCE over one student's sequence (predict event t+1
    /// from the hidden state after consuming events 0..=t), plus an optional
    /// prediction-consistency term that also scores the event just consumed.
    fn episode_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        student: &StudentSeq,
        recon_weight: f64,
    ) -> Result<Var> {
        let steps = &student.steps;
        debug_assert!(steps.len() >= 2);
        let embed = tape.param(params, "dkt.embed")?;
        let (mut h, mut c) = self.lstm.zero_state(tape)?;
        let mut total: Option<Var> = None;
        let mut add_term = |tape: &mut Tape, term: Var| -> Result<()> {
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
            Ok(())
        };
        let bce = |tape: &mut Tape, logits: Var, concept: usize, y: u8| -> Result<Var> {
            let z = tape.select_elem(logits, concept)?;
            let sp = tape.softplus(z)?;
            if y == 1 {
                tape.sub(sp, z)
            } else {
                Ok(sp)
            }
        };
        for t in 0..steps.len() - 1 {
            let (concept, y) = steps[t];
            let x = tape.select_row(embed, concept + y as usize * self.n_concepts)?;
            (h, c) = self.lstm.step(tape, params, x, h, c)?;
            let logits = self.head.forward(tape, params, h)?;
            let (next_c, next_y) = steps[t + 1];
            let main = bce(tape, logits, next_c, next_y)?;
            add_term(tape, main)?;
            if recon_weight > 0.0 {
                let rec = bce(tape, logits, concept, y)?;
                let rec = tape.affine_const(rec, recon_weight, 0.0)?;
                add_term(tape, rec)?;
            }
        }
        let total = total.expect("sequence has at least one prediction");
        tape.affine_const(total, 1.0 / (steps.len() - 1) as f64, 0.0)
    }
}

use crate::tape::Var;

/// Training summary for the DKT environment.
#[derive(Debug, Clone, Serialize)]
pub struct DktReport {
    pub train_students: usize,
    pub test_students: usize,
    pub epoch_loss: Vec<f64>,
    pub auc: f64,
}

/// Train a DKT on the dataset with a student-disjoint split and report
/// held-out next-step AUC.
pub fn train_dkt(dataset: &Dataset, cfg: &DktConfig) -> Result<(ParamSet, DktModel, DktReport)> {
    let usable: Vec<usize> =
        (0..dataset.students.len()).filter(|&i| dataset.students[i].steps.len() >= 2).collect();
    if usable.len() < 2 {
        return Err(Error::BadData("need at least two students with ≥2 events".into()));
    }
    if !(0.0..1.0).contains(&cfg.split_ratio) || cfg.split_ratio == 0.0 {
        return Err(Error::InvalidConfig(format!("split_ratio {} outside (0,1)", cfg.split_ratio)));
    }
    if !(0.0..=1.0).contains(&cfg.lr_decay) || cfg.lr_decay == 0.0 {
        return Err(Error::InvalidConfig(format!("lr_decay {} outside (0,1]", cfg.lr_decay)));
    }
    if !cfg.recon_weight.is_finite() || cfg.recon_weight < 0.0 {
        return Err(Error::InvalidConfig(format!("recon_weight {} must be ≥ 0", cfg.recon_weight)));
    }
    let mut order = usable;
    let mut shuffle_rng = rng_stream(cfg.seed, 0xD57);
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train_count =
        ((cfg.split_ratio * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
    let (train_idx, test_idx) = order.split_at(train_count);

    let mut params = ParamSet::new();
    let mut init_rng = rng_stream(cfg.seed, 0xD1);
    let model = DktModel::init(&mut params, dataset.n_concepts, cfg.d_in, cfg.d_h, &mut init_rng)?;
    let mut adam = Adam::new(cfg.lr);

    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut train = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_stream(cfg.seed, 0x100 + epoch as u64);
        for i in (1..train.len()).rev() {
            let j = rng.random_range(0..=i);
            train.swap(i, j);
        }
        let mut sum = 0.0;
        for chunk in train.chunks(cfg.batch.max(1)) {
            params.zero_grads();
            for &si in chunk {
                let mut tape = Tape::new();
                let loss =
                    model.episode_loss(&mut tape, &params, &dataset.students[si], cfg.recon_weight)?;
                sum += tape.value(loss).item();
                tape.backward_scaled(loss, 1.0 / chunk.len() as f64, &mut params)?;
            }
            clip_global_norm(&mut params, 5.0);
            adam.step(&mut params)?;
        }
        epoch_loss.push(sum / train.len() as f64);
        adam.lr *= cfg.lr_decay;
    }

    let infer = DktInfer::from_params(&params)?;
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for &si in test_idx {
        let student = &dataset.students[si];
        let (mut h, mut c) = infer.zero_state();
        for t in 0..student.steps.len() - 1 {
            let (concept, y) = student.steps[t];
            infer.observe(&mut h, &mut c, concept, y);
            let (next_c, next_y) = student.steps[t + 1];
            labels.push(next_y);
            scores.push(infer.predict(&h)[next_c]);
        }
    }
    let auc = auc(&labels, &scores)?;
    let report = DktReport {
        train_students: train_idx.len(),
        test_students: test_idx.len(),
        epoch_loss,
        auc,
    };
    Ok((params, model, report))
}

/// Area under the ROC curve via average ranks (ties handled).
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(Error::BadData("auc needs matching non-empty labels and scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::BadData("auc undefined: labels contain a single class".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            rank[k] = avg;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 =
        labels.iter().zip(&rank).filter(|(&y, _)| y == 1).map(|(_, &r)| r).sum();
    let u = pos_rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Tape-free DKT forward pass for fast environment stepping; the math is
/// identical to the taped model.
#[derive(Debug, Clone)]
pub struct DktInfer {
    pub n_concepts: usize,
    pub d_in: usize,
    pub d_h: usize,
    embed: Tensor,
    w_lstm: Tensor,
    b_lstm: Vec<f64>,
    w_head: Tensor,
    b_head: Vec<f64>,
}

fn matvec_plain(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let (_rows, cols) = w.dims2().expect("weight is a matrix");
    debug_assert_eq!(cols, x.len());
    let data = w.data();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &data[r * cols..(r + 1) * cols];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

impl DktInfer {
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let embed = params.get("dkt.embed")?.clone();
        let w_lstm = params.get("dkt.lstm.w")?.clone();
        let b_lstm = params.get("dkt.lstm.b")?.data().to_vec();
        let w_head = params.get("dkt.head.w")?.clone();
        let b_head = params.get("dkt.head.b")?.data().to_vec();
        let (rows, d_in) = embed.dims2()?;
        let (n_concepts, d_h) = w_head.dims2()?;
        if rows != 2 * n_concepts || w_lstm.dims2()? != (4 * d_h, d_in + d_h) {
            return Err(Error::BadData("dkt parameter shapes are inconsistent".into()));
        }
        Ok(DktInfer { n_concepts, d_in, d_h, embed, w_lstm, b_lstm, w_head, b_head })
    }

    pub fn zero_state(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.d_h], vec![0.0; self.d_h])
    }

    /// Advance the hidden state with one observed (concept, label) event.
    pub fn observe(&self, h: &mut Vec<f64>, c: &mut Vec<f64>, concept: usize, y: u8) {
        let hd = self.d_h;
        let row = concept + y as usize * self.n_concepts;
        let x = &self.embed.data()[row * self.d_in..(row + 1) * self.d_in];
        let mut xh = Vec::with_capacity(self.d_in + hd);
        xh.extend_from_slice(x);
        xh.extend_from_slice(h);
        let mut gates = vec![0.0; 4 * hd];
        matvec_plain(&self.w_lstm, &xh, &mut gates);
        for (g, b) in gates.iter_mut().zip(&self.b_lstm) {
            *g += b;
        }
        for k in 0..hd {
            let i = tape::sigmoid(gates[k]);
            let f = tape::sigmoid(gates[hd + k]);
            let g = gates[2 * hd + k].tanh();
            let o = tape::sigmoid(gates[3 * hd + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
    }

    /// Per-concept predicted success probabilities from the current state.
    pub fn predict(&self, h: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.n_concepts];
        matvec_plain(&self.w_head, h, &mut logits);
        logits
            .iter()
            .zip(&self.b_head)
            .map(|(z, b)| tape::sigmoid(z + b))
            .collect()
    }
}

/// Fraction of (state, concept) probes in which one observed correct answer
/// on concept c strictly raises c's predicted success probability. Each
/// context is a history replayed before probing every concept once.
pub fn probe_monotonicity(infer: &DktInfer, contexts: &[Vec<(usize, u8)>]) -> f64 {
    let mut up = 0usize;
    let mut total = 0usize;
    for ctx in contexts {
        let (mut h, mut c) = infer.zero_state();
        for &(concept, y) in ctx {
            infer.observe(&mut h, &mut c, concept, y);
        }
        for concept in 0..infer.n_concepts {
            let before = infer.predict(&h)[concept];
            let (mut h2, mut c2) = (h.clone(), c.clone());
            infer.observe(&mut h2, &mut c2, concept, 1);
            total += 1;
            if infer.predict(&h2)[concept] > before {
                up += 1;
            }
        }
    }
    up as f64 / total.max(1) as f64
}

// ---- unified learner environment ----

/// The environment a recommender interacts with: answers study actions and
/// scores goal mastery before/after an episode.
#[derive(Debug, Clone)]
pub enum LearnerEnv {
    Oracle { state: OracleState, dag: Arc<PrereqDag>, slip: f64, guess: f64 },
    Dkt { infer: Arc<DktInfer>, h: Vec<f64>, c: Vec<f64> },
}

impl LearnerEnv {
    pub fn oracle(dag: Arc<PrereqDag>, alpha: f64, slip: f64, guess: f64) -> Self {
        let state = OracleState::new(dag.n(), alpha);
        LearnerEnv::Oracle { state, dag, slip, guess }
    }

    pub fn dkt(infer: Arc<DktInfer>) -> Self {
        let (h, c) = infer.zero_state();
        LearnerEnv::Dkt { infer, h, c }
    }

    pub fn n_concepts(&self) -> usize {
        match self {
            LearnerEnv::Oracle { dag, .. } => dag.n(),
            LearnerEnv::Dkt { infer, .. } => infer.n_concepts,
        }
    }

    /// Replay an interaction history to reach the student's current state.
    pub fn ingest(&mut self, history: &[(usize, u8)]) {
        for &(concept, y) in history {
            self.observe(concept, y);
        }
    }

    /// Probability the learner answers `concept` correctly right now.
    pub fn predict_correct(&self, concept: usize) -> f64 {
        match self {
            LearnerEnv::Oracle { state, slip, guess, .. } => {
                state.response_prob(concept, *slip, *guess)
            }
            LearnerEnv::Dkt { infer, h, .. } => infer.predict(h)[concept],
        }
    }

    /// Update the learner state with a forced outcome.
    pub fn observe(&mut self, concept: usize, y: u8) {
        match self {
            LearnerEnv::Oracle { state, dag, .. } => state.update(dag, concept, y),
            LearnerEnv::Dkt { infer, h, c } => infer.observe(h, c, concept, y),
        }
    }

    /// Recommend `concept`, sample the learner's answer, update, return it.
    pub fn respond<R: Rng>(&mut self, concept: usize, rng: &mut R) -> u8 {
        let p = self.predict_correct(concept);
        let y = u8::from(rng.random::<f64>() < p);
        self.observe(concept, y);
        y
    }

    /// Deterministic variant (threshold at 0.5); consumes no randomness.
    pub fn respond_deterministic(&mut self, concept: usize) -> u8 {
        let y = u8::from(self.predict_correct(concept) >= 0.5);
        self.observe(concept, y);
        y
    }

    /// Mean goal attainment: oracle mastery, or DKT predicted success.
    pub fn goal_score(&self, goals: &[usize]) -> f64 {
        match self {
            LearnerEnv::Oracle { state, .. } => state.goal_score(goals),
            LearnerEnv::Dkt { infer, h, .. } => {
                let p = infer.predict(h);
                goals.iter().map(|&g| p[g]).sum::<f64>() / goals.len().max(1) as f64
            }
        }
    }
}

/// Normalized improvement (E_e − E_b) / (1 − E_b); zero when there is no
/// headroom. Both inputs must lie in [0, 1].
pub fn improvement_rate(e_b: f64, e_e: f64) -> Result<f64> {
    for (name, v) in [("E_b", e_b), ("E_e", e_e)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::BadData(format!("{name}={v} outside [0, 1]")));
        }
    }
    if e_b >= 1.0 - 1e-9 {
        Ok(0.0)
    } else {
        Ok((e_e - e_b) / (1.0 - e_b))
    }
}
