//! Benchmark harness: reference recommenders, seed-averaged comparisons,
//! ablation and sensitivity studies, and the encoder-stability analysis.

use crate::data::{build_sessions, Dataset, PrereqDag, Session, SessionConfig};
use crate::encoder::Calibration;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UGlad};
use crate::rng::rng_stream;
use crate::sim::improvement_rate;
use crate::tape::Tape;
use crate::tensor::ParamSet;
use crate::training::{
    run_episode, train, Ablation, Draws, EnvSpec, EpisodeOptions, TrainConfig,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Base stream index for evaluation-time draws; disjoint from training.
const EVAL_STREAM: u64 = 1 << 43;

/// Hex SHA-256 of a serialized configuration, recorded in every report.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// One labeled row of a report: the per-seed improvement rates and their
/// summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub label: String,
    /// Denoising-loss weight in effect for trained rows; absent for
    /// training-free baselines.
    pub lambda: Option<f64>,
    pub mean_e_t: f64,
    pub std_e_t: f64,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
}

impl BenchCell {
    fn new(label: &str, lambda: Option<f64>, per_seed: Vec<f64>, seeds: &[u64]) -> Self {
        let (mean, std) = mean_std(&per_seed);
        BenchCell {
            label: label.into(),
            lambda,
            mean_e_t: mean,
            std_e_t: std,
            seeds: seeds.to_vec(),
            per_seed,
        }
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Seed-averaged comparison or ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config_hash: String,
    pub path_len: usize,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,lambda,mean_e_t,std_e_t,n_seeds,seeds,per_seed\n");
        for c in &self.cells {
            let lambda = c.lambda.map(|l| l.to_string()).unwrap_or_default();
            let seeds: Vec<String> = c.seeds.iter().map(|s| s.to_string()).collect();
            let vals: Vec<String> = c.per_seed.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.label,
                lambda,
                c.mean_e_t,
                c.std_e_t,
                c.seeds.len(),
                seeds.join(";"),
                vals.join(";")
            ));
        }
        out
    }
}

/// Everything a benchmark run needs: data splits, environment, model and
/// training settings, and the evaluation path length.
#[derive(Debug, Clone)]
pub struct BenchSetup<'a> {
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub train_sessions: &'a [Session],
    pub test_sessions: &'a [Session],
    pub env: &'a EnvSpec,
    /// Prerequisite graph for the topological baseline.
    pub dag: Option<&'a PrereqDag>,
    pub path_len: usize,
    /// Worker threads for per-seed runs; 0 and 1 both mean serial. Results
    /// are collected by seed position, so parallelism never changes them.
    pub jobs: usize,
}

impl BenchSetup<'_> {
    fn check(&self) -> Result<()> {
        if self.test_sessions.is_empty() {
            return Err(Error::BadData("no test sessions to evaluate".into()));
        }
        Ok(())
    }

    /// Fingerprint of the run settings, included in every report.
    fn hash(&self) -> String {
        let snapshot = serde_json::json!({
            "model": self.model_cfg,
            "train": self.train_cfg,
            "path_len": self.path_len,
            "n_train": self.train_sessions.len(),
            "n_test": self.test_sessions.len(),
            "env": match self.env {
                EnvSpec::Oracle { alpha, slip, guess, .. } =>
                    format!("oracle(alpha={alpha},slip={slip},guess={guess})"),
                EnvSpec::Dkt { .. } => "dkt".into(),
            },
        });
        config_hash(snapshot.to_string().as_bytes())
    }
}

/// Map seeds to per-seed outcomes, optionally on a bounded worker pool.
/// Output order follows the seed list whatever the execution order.
fn run_seeds<T, F>(jobs: usize, seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if jobs > 1 && seeds.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.min(seeds.len()))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
    } else {
        seeds.iter().map(|&s| f(s)).collect()
    }
}

/// Train one model variant from scratch under a given seed.
pub fn train_for_seed(
    setup: &BenchSetup,
    ablation: Ablation,
    lambda: Option<f64>,
    seed: u64,
) -> Result<(ParamSet, UGlad)> {
    let mut mc = setup.model_cfg.clone();
    mc.init_seed = seed;
    let mut tc = setup.train_cfg.clone();
    tc.seed = seed;
    tc.ablation = ablation;
    if let Some(l) = lambda {
        tc.lambda = l;
    }
    let (mut params, model) = UGlad::init(mc)?;
    train(&model, &mut params, setup.train_sessions, &[], setup.env, &tc)?;
    Ok((params, model))
}

/// Mean improvement rate of greedy decodes over the test sessions.
pub fn evaluate_model(
    model: &UGlad,
    params: &ParamSet,
    sessions: &[Session],
    path_len: usize,
    ablation: Ablation,
    env: &EnvSpec,
    seed: u64,
) -> Result<f64> {
    if sessions.is_empty() {
        return Err(Error::BadData("no test sessions to evaluate".into()));
    }
    let opts = EpisodeOptions::evaluation(path_len, ablation);
    let mut total = 0.0;
    for (si, session) in sessions.iter().enumerate() {
        let mut tape = Tape::new();
        let mut episode_env = env.fresh();
        let mut rng = rng_stream(seed, EVAL_STREAM + si as u64);
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
    Ok(total / sessions.len() as f64)
}

/// Training-free reference recommenders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Uniform over unvisited concepts.
    Random,
    /// Pick the unvisited concept with the best expected one-step gain in
    /// goal mastery, reading the environment directly.
    GreedyGain,
    /// Prerequisite order: goal ancestors first, in topological order.
    Topo,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Baseline> {
        match s.trim() {
            "random" => Ok(Baseline::Random),
            "greedy_gain" => Ok(Baseline::GreedyGain),
            "topo" => Ok(Baseline::Topo),
            other => Err(Error::InvalidConfig(format!(
                "unknown baseline {other:?}; expected random, greedy_gain, or topo"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Baseline::Random => "random",
            Baseline::GreedyGain => "greedy_gain",
            Baseline::Topo => "topo",
        }
    }
}

/// Mean improvement rate of a baseline policy over the test sessions.
pub fn evaluate_baseline(
    baseline: Baseline,
    sessions: &[Session],
    path_len: usize,
    env: &EnvSpec,
    dag: Option<&PrereqDag>,
    seed: u64,
) -> Result<f64> {
    if sessions.is_empty() {
        return Err(Error::BadData("no test sessions to evaluate".into()));
    }
    if baseline == Baseline::Topo && dag.is_none() {
        return Err(Error::InvalidConfig("topo baseline needs a prerequisite graph".into()));
    }
    let n = env.n_concepts();
    if path_len == 0 || path_len > n {
        return Err(Error::InvalidConfig(format!(
            "path length {path_len} exceeds the {n} unvisited concepts"
        )));
    }
    let mut total = 0.0;
    for (si, session) in sessions.iter().enumerate() {
        let mut episode_env = env.fresh();
        let mut rng = rng_stream(seed, EVAL_STREAM + si as u64);
        episode_env.ingest(&session.history);
        let e_b = episode_env.goal_score(&session.goals);
        let mut visited = vec![false; n];
        // The topological plan is fixed per session; others pick per step.
        let topo_plan = if baseline == Baseline::Topo {
            topo_plan(dag.expect("checked above"), &session.goals)
        } else {
            Vec::new()
        };
        for _ in 0..path_len {
            let chosen = match baseline {
                Baseline::Random => {
                    let open: Vec<usize> =
                        (0..n).filter(|&c| !visited[c]).collect();
                    open[rng.random_range(0..open.len())]
                }
                Baseline::GreedyGain => pick_greedy_gain(&episode_env, &visited, &session.goals),
                Baseline::Topo => topo_plan
                    .iter()
                    .copied()
                    .find(|&c| !visited[c])
                    .expect("path_len <= n leaves an open concept"),
            };
            visited[chosen] = true;
            episode_env.respond(chosen, &mut rng);
        }
        let e_e = episode_env.goal_score(&session.goals);
        total += improvement_rate(e_b, e_e)?;
    }
    Ok(total / sessions.len() as f64)
}

/// Goal ancestors in topological order, then everything else.
fn topo_plan(dag: &PrereqDag, goals: &[usize]) -> Vec<usize> {
    let anc = dag.ancestors_of(goals);
    let is_anc = |c: usize| anc.binary_search(&c).is_ok();
    let mut plan: Vec<usize> =
        dag.topo_order().iter().copied().filter(|&c| is_anc(c)).collect();
    plan.extend(dag.topo_order().iter().copied().filter(|&c| !is_anc(c)));
    plan
}

/// Expected one-step goal-mastery gain, maximized over open concepts.
/// Ties break toward the smallest concept index.
fn pick_greedy_gain(
    env: &crate::sim::LearnerEnv,
    visited: &[bool],
    goals: &[usize],
) -> usize {
    let mut best = usize::MAX;
    let mut best_gain = f64::NEG_INFINITY;
    for c in 0..visited.len() {
        if visited[c] {
            continue;
        }
        let p = env.predict_correct(c);
        let mut right = env.clone();
        right.observe(c, 1);
        let mut wrong = env.clone();
        wrong.observe(c, 0);
        let expect = p * right.goal_score(goals) + (1.0 - p) * wrong.goal_score(goals);
        if expect > best_gain {
            best_gain = expect;
            best = c;
        }
    }
    best
}

/// Train the full model per seed and pit it against the requested baselines
/// on the shared test split.
pub fn compare(
    setup: &BenchSetup,
    baselines: &[Baseline],
    seeds: &[u64],
) -> Result<BenchReport> {
    setup.check()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let mut cells = Vec::with_capacity(1 + baselines.len());
    let per_seed = run_seeds(setup.jobs, seeds, |s| {
        let (params, model) = train_for_seed(setup, setup.train_cfg.ablation, None, s)?;
        evaluate_model(
            &model,
            &params,
            setup.test_sessions,
            setup.path_len,
            setup.train_cfg.ablation,
            setup.env,
            s,
        )
    })?;
    cells.push(BenchCell::new(
        "uglad",
        Some(setup.train_cfg.effective_lambda()),
        per_seed,
        seeds,
    ));
    for &b in baselines {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            per_seed.push(evaluate_baseline(
                b,
                setup.test_sessions,
                setup.path_len,
                setup.env,
                setup.dag,
                s,
            )?);
        }
        cells.push(BenchCell::new(b.label(), None, per_seed, seeds));
    }
    Ok(BenchReport { config_hash: setup.hash(), path_len: setup.path_len, cells })
}

/// The four single-component ablations, compared against the full model
/// under identical budgets and seeds.
pub fn ablation_suite(setup: &BenchSetup, seeds: &[u64]) -> Result<BenchReport> {
    setup.check()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    let variants: [(&str, Ablation); 5] = [
        ("full", Ablation::default()),
        ("no_uncertainty", Ablation { no_uncertainty: true, ..Default::default() }),
        ("no_diffusion", Ablation { no_diffusion: true, ..Default::default() }),
        ("no_noise_loss", Ablation { no_noise_loss: true, ..Default::default() }),
        ("no_goal", Ablation { no_goal: true, ..Default::default() }),
    ];
    let mut cells = Vec::with_capacity(variants.len());
    for (label, ablation) in variants {
        let per_seed = run_seeds(setup.jobs, seeds, |s| {
            let (params, model) = train_for_seed(setup, ablation, None, s)?;
            evaluate_model(
                &model,
                &params,
                setup.test_sessions,
                setup.path_len,
                ablation,
                setup.env,
                s,
            )
        })?;
        let lambda = if ablation.no_noise_loss || ablation.no_diffusion {
            0.0
        } else {
            setup.train_cfg.lambda
        };
        cells.push(BenchCell::new(label, Some(lambda), per_seed, seeds));
    }
    Ok(BenchReport { config_hash: setup.hash(), path_len: setup.path_len, cells })
}

/// One cell of the (diffusion steps, lambda) sensitivity grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub diffusion_steps: usize,
    pub lambda: f64,
    pub mean_e_t: f64,
    pub std_e_t: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityGrid {
    pub config_hash: String,
    pub path_len: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<SensitivityCell>,
}

impl SensitivityGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("diffusion_steps,lambda,mean_e_t,std_e_t,per_seed\n");
        for c in &self.cells {
            let vals: Vec<String> = c.per_seed.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.diffusion_steps,
                c.lambda,
                c.mean_e_t,
                c.std_e_t,
                vals.join(";")
            ));
        }
        out
    }
}

/// Full-factorial sweep over diffusion step counts and noise-loss weights.
/// Cell values are recorded as-is; no shape across the grid is asserted.
pub fn sensitivity_grid(
    setup: &BenchSetup,
    step_counts: &[usize],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<SensitivityGrid> {
    setup.check()?;
    if step_counts.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("sensitivity grid axes must be non-empty".into()));
    }
    let mut cells = Vec::with_capacity(step_counts.len() * lambdas.len());
    for &steps in step_counts {
        for &lambda in lambdas {
            let mut grid_setup = setup.clone();
            let mut mc = setup.model_cfg.clone();
            mc.diffusion_steps = steps;
            grid_setup.model_cfg = &mc;
            let per_seed = run_seeds(setup.jobs, seeds, |s| {
                let (params, model) =
                    train_for_seed(&grid_setup, setup.train_cfg.ablation, Some(lambda), s)?;
                evaluate_model(
                    &model,
                    &params,
                    setup.test_sessions,
                    setup.path_len,
                    setup.train_cfg.ablation,
                    setup.env,
                    s,
                )
            })?;
            let (mean, std) = mean_std(&per_seed);
            cells.push(SensitivityCell {
                diffusion_steps: steps,
                lambda,
                mean_e_t: mean,
                std_e_t: std,
                per_seed,
            });
        }
    }
    Ok(SensitivityGrid {
        config_hash: setup.hash(),
        path_len: setup.path_len,
        seeds: seeds.to_vec(),
        cells,
    })
}

/// Mean Euclidean distance between consecutive states; needs at least two.
pub fn instability(states: &[Vec<f64>]) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::BadData(format!(
            "instability needs at least 2 states, got {}",
            states.len()
        )));
    }
    let mut total = 0.0;
    for w in states.windows(2) {
        if w[0].len() != w[1].len() {
            return Err(Error::ShapeMismatch {
                op: "instability",
                detail: format!("state dims {} vs {}", w[0].len(), w[1].len()),
            });
        }
        total += w[0]
            .iter()
            .zip(&w[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / (states.len() - 1) as f64)
}

/// Settings for the label-noise stability study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityConfig {
    pub noise_frac: f64,
    pub goal_count: usize,
    pub split_ratio: f64,
    /// Cap on evaluated test students per seed.
    pub max_students: usize,
    pub train: TrainConfig,
    /// Worker threads for per-seed runs; 0 and 1 both mean serial.
    #[serde(default)]
    pub jobs: usize,
}

impl Default for InstabilityConfig {
    fn default() -> Self {
        InstabilityConfig {
            noise_frac: 0.2,
            goal_count: 3,
            split_ratio: 0.8,
            max_students: 40,
            train: TrainConfig::default(),
            jobs: 1,
        }
    }
}

/// Study results for one encoder variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityVariant {
    pub label: String,
    /// Mean final-quartile step distance, one entry per seed.
    pub per_seed_summary: Vec<f64>,
    /// `seed,student,step_1..step_max` rows; shorter tracks leave cells
    /// empty.
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    pub seeds: Vec<u64>,
    pub gaussian: InstabilityVariant,
    pub standard: InstabilityVariant,
    /// Seeds where the calibrated encoder drifted strictly less.
    pub gaussian_wins: usize,
}

/// Per-step hidden-state distances for every tracked student.
struct DriftTrack {
    seed: u64,
    student: String,
    distances: Vec<f64>,
}

/// Train both encoder variants on label-flipped data under identical
/// budgets, then measure how much their hidden states drift step to step on
/// held-out students.
pub fn instability_study(
    model_cfg: &ModelConfig,
    dataset: &Dataset,
    env: &EnvSpec,
    cfg: &InstabilityConfig,
    seeds: &[u64],
) -> Result<InstabilityReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    if !(0.0..=0.5).contains(&cfg.noise_frac) {
        return Err(Error::InvalidConfig(format!(
            "noise fraction must be in [0, 0.5], got {}",
            cfg.noise_frac
        )));
    }
    let variants =
        [("gaussian", Calibration::Clamped), ("standard", Calibration::NoUncertainty)];
    struct SeedOutcome {
        tracks: [Vec<DriftTrack>; 2],
        summaries: [f64; 2],
    }
    let outcomes: Vec<SeedOutcome> = run_seeds(cfg.jobs, seeds, |seed| {
        let noisy = dataset.with_label_noise(cfg.noise_frac, seed);
        let sessions = build_sessions(
            &noisy,
            &SessionConfig {
                goal_count: cfg.goal_count,
                split_ratio: cfg.split_ratio,
                seed,
            },
        )?;
        // Full (noisy) sequences of the held-out students, capped.
        let mut eval_seqs: Vec<(&str, &[(usize, u8)])> = Vec::new();
        for session in &sessions.test {
            if eval_seqs.len() >= cfg.max_students {
                break;
            }
            if let Ok(i) = noisy
                .students
                .binary_search_by(|s| s.student_id.as_str().cmp(&session.student_id))
            {
                let steps = &noisy.students[i].steps;
                if steps.len() >= 2 {
                    eval_seqs.push((&noisy.students[i].student_id, steps));
                }
            }
        }
        if eval_seqs.is_empty() {
            return Err(Error::BadData("no held-out students with 2+ events".into()));
        }
        let mut out = SeedOutcome { tracks: [Vec::new(), Vec::new()], summaries: [0.0; 2] };
        for (vi, (_, calibration)) in variants.iter().enumerate() {
            let mut mc = model_cfg.clone();
            mc.calibration = *calibration;
            mc.init_seed = seed;
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            let (mut params, model) = UGlad::init(mc)?;
            train(&model, &mut params, &sessions.train, &[], env, &tc)?;
            let mut quartile_means = Vec::new();
            for &(student, steps) in &eval_seqs {
                let mut tape = Tape::new();
                let states =
                    model.encoder.encode(&mut tape, &params, steps, *calibration)?;
                let values: Vec<Vec<f64>> = states
                    .iter()
                    .map(|st| tape.value(st.h_cal).data().to_vec())
                    .collect();
                let distances: Vec<f64> = values
                    .windows(2)
                    .map(|w| {
                        w[0].iter()
                            .zip(&w[1])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                let q = distances.len().div_ceil(4).max(1);
                let tail = &distances[distances.len() - q..];
                quartile_means.push(tail.iter().sum::<f64>() / q as f64);
                out.tracks[vi].push(DriftTrack {
                    seed,
                    student: student.to_string(),
                    distances,
                });
            }
            out.summaries[vi] =
                quartile_means.iter().sum::<f64>() / quartile_means.len() as f64;
        }
        Ok(out)
    })?;
    let mut tracks: Vec<Vec<DriftTrack>> = vec![Vec::new(), Vec::new()];
    let mut summaries: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
    let mut gaussian_wins = 0usize;
    for out in outcomes {
        let [gauss, standard] = out.tracks;
        tracks[0].extend(gauss);
        tracks[1].extend(standard);
        summaries[0].push(out.summaries[0]);
        summaries[1].push(out.summaries[1]);
        if out.summaries[0] < out.summaries[1] {
            gaussian_wins += 1;
        }
    }
    let max_steps = tracks
        .iter()
        .flat_map(|t| t.iter().map(|tr| tr.distances.len()))
        .max()
        .unwrap_or(0);
    let render = |list: &[DriftTrack]| -> String {
        let mut out = String::from("seed,student");
        for i in 1..=max_steps {
            out.push_str(&format!(",step_{i}"));
        }
        out.push('\n');
        for t in list {
            out.push_str(&format!("{},{}", t.seed, t.student));
            for i in 0..max_steps {
                out.push(',');
                if let Some(d) = t.distances.get(i) {
                    out.push_str(&d.to_string());
                }
            }
            out.push('\n');
        }
        out
    };
    Ok(InstabilityReport {
        seeds: seeds.to_vec(),
        gaussian: InstabilityVariant {
            label: "gaussian".into(),
            per_seed_summary: summaries[0].clone(),
            csv: render(&tracks[0]),
        },
        standard: InstabilityVariant {
            label: "standard".into(),
            per_seed_summary: summaries[1].clone(),
            csv: render(&tracks[1]),
        },
        gaussian_wins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{random_layered_dag, synth_generate, SynthConfig};
    use std::sync::Arc;

    fn tiny_setup() -> (ModelConfig, TrainConfig, EnvSpec, Arc<PrereqDag>, Vec<Session>) {
        let dag = Arc::new(random_layered_dag(6, 2, 2, 5));
        let mut mc = ModelConfig::new(6);
        mc.d = 8;
        mc.d_cond = 6;
        mc.diffusion_steps = 3;
        let tc = TrainConfig { path_len: 3, epochs: 1, batch: 4, ..TrainConfig::default() };
        let env = EnvSpec::Oracle { dag: dag.clone(), alpha: 0.4, slip: 0.05, guess: 0.2 };
        let sessions: Vec<Session> = (0..8)
            .map(|i| Session {
                student_id: format!("s{i}"),
                history: vec![(i % 6, 1), ((i + 1) % 6, (i % 2) as u8)],
                goals: vec![3 + (i % 3)],
            })
            .collect();
        (mc, tc, env, dag, sessions)
    }

    #[test]
    fn instability_matches_hand_values() {
        assert!(instability(&[vec![1.0]]).is_err());
        let constant = vec![vec![2.0, -1.0]; 5];
        assert_eq!(instability(&constant).unwrap(), 0.0);
        let two = vec![vec![0.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]];
        assert!((instability(&two).unwrap() - 3.0).abs() < 1e-12);
        let scaled: Vec<Vec<f64>> =
            two.iter().map(|s| s.iter().map(|v| 2.0 * v).collect()).collect();
        assert!((instability(&scaled).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config_hash(b"setup");
        assert_eq!(a, config_hash(b"setup"));
        assert_ne!(a, config_hash(b"setup2"));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn baselines_visit_distinct_concepts_and_score_finite() {
        let (_, _, env, dag, sessions) = tiny_setup();
        for b in [Baseline::Random, Baseline::GreedyGain, Baseline::Topo] {
            let v = evaluate_baseline(b, &sessions, 4, &env, Some(&dag), 3).unwrap();
            assert!(v.is_finite(), "{b:?}");
        }
        assert!(evaluate_baseline(Baseline::Topo, &sessions, 4, &env, None, 3).is_err());
        assert!(evaluate_baseline(Baseline::Random, &[], 4, &env, Some(&dag), 3).is_err());
        assert!(evaluate_baseline(Baseline::Random, &sessions, 9, &env, Some(&dag), 3).is_err());
    }

    #[test]
    fn topo_plan_orders_goal_ancestors_first() {
        // Chain 0 -> 1 -> 2 -> 3 plus isolated 4.
        let dag = PrereqDag::new(5, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let plan = topo_plan(&dag, &[2]);
        assert_eq!(&plan[..3], &[0, 1, 2]);
        assert_eq!(plan.len(), 5);
    }

    // Mastery starts at zero, so the guess rate is what lets a first
    // correct answer ever happen; slip stays zero to keep the oracle clean.
    #[test]
    fn greedy_gain_beats_random_on_a_noiseless_oracle() {
        let dag = Arc::new(random_layered_dag(8, 2, 2, 9));
        let env = EnvSpec::Oracle { dag: dag.clone(), alpha: 0.5, slip: 0.0, guess: 0.25 };
        let synth = SynthConfig {
            n_concepts: 8,
            n_students: 30,
            prereq_edges: dag.edges().to_vec(),
            learn_rate: 0.5,
            slip: 0.0,
            guess: 0.25,
            seed: 4,
            min_len: 10,
            max_len: 20,
        };
        let data = synth_generate(&synth).unwrap();
        let split = build_sessions(
            &data,
            &SessionConfig { goal_count: 2, split_ratio: 0.5, seed: 4 },
        )
        .unwrap();
        let mut greedy_total = 0.0;
        let mut random_total = 0.0;
        for seed in 0..5u64 {
            greedy_total += evaluate_baseline(
                Baseline::GreedyGain,
                &split.test,
                4,
                &env,
                Some(&dag),
                seed,
            )
            .unwrap();
            random_total +=
                evaluate_baseline(Baseline::Random, &split.test, 4, &env, Some(&dag), seed)
                    .unwrap();
        }
        assert!(
            greedy_total > random_total,
            "greedy {greedy_total} vs random {random_total}"
        );
    }

    #[test]
    fn compare_reports_are_bitwise_reproducible() {
        let (mc, tc, env, dag, sessions) = tiny_setup();
        let setup = BenchSetup {
            model_cfg: &mc,
            train_cfg: &tc,
            train_sessions: &sessions[..6],
            test_sessions: &sessions[6..],
            env: &env,
            dag: Some(&dag),
            path_len: 3,
            jobs: 1,
        };
        let a = compare(&setup, &[Baseline::Random, Baseline::Topo], &[1, 2]).unwrap();
        let b = compare(&setup, &[Baseline::Random, Baseline::Topo], &[1, 2]).unwrap();
        assert_eq!(a, b);
        let parallel = BenchSetup { jobs: 2, ..setup };
        assert_eq!(compare(&parallel, &[Baseline::Random], &[1, 2]).unwrap().cells[0], a.cells[0]);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.cells.len(), 3);
        assert_eq!(a.cells[0].label, "uglad");
        assert_eq!(a.cells[0].per_seed.len(), 2);
        assert!(a.to_csv().lines().count() == 4);
    }

    #[test]
    fn ablation_suite_covers_all_variants() {
        let (mc, tc, env, dag, sessions) = tiny_setup();
        let setup = BenchSetup {
            model_cfg: &mc,
            train_cfg: &tc,
            train_sessions: &sessions[..6],
            test_sessions: &sessions[6..],
            env: &env,
            dag: Some(&dag),
            path_len: 3,
            jobs: 1,
        };
        let report = ablation_suite(&setup, &[1]).unwrap();
        let labels: Vec<&str> = report.cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(
            labels,
            ["full", "no_uncertainty", "no_diffusion", "no_noise_loss", "no_goal"]
        );
        for c in &report.cells {
            assert!(c.mean_e_t.is_finite(), "{}", c.label);
        }
        let no_noise = &report.cells[3];
        assert_eq!(no_noise.lambda, Some(0.0));
    }

    #[test]
    fn sensitivity_grid_is_full_factorial() {
        let (mc, tc, env, dag, sessions) = tiny_setup();
        let setup = BenchSetup {
            model_cfg: &mc,
            train_cfg: &tc,
            train_sessions: &sessions[..6],
            test_sessions: &sessions[6..],
            env: &env,
            dag: Some(&dag),
            path_len: 3,
            jobs: 1,
        };
        let grid = sensitivity_grid(&setup, &[2, 3], &[0.0, 0.5], &[1]).unwrap();
        assert_eq!(grid.cells.len(), 4);
        let pairs: Vec<(usize, f64)> =
            grid.cells.iter().map(|c| (c.diffusion_steps, c.lambda)).collect();
        assert_eq!(pairs, [(2, 0.0), (2, 0.5), (3, 0.0), (3, 0.5)]);
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("diffusion_steps,lambda,"));
    }

    #[test]
    fn instability_study_produces_padded_tracks() {
        let dag = Arc::new(random_layered_dag(6, 2, 2, 7));
        let synth = SynthConfig {
            n_concepts: 6,
            n_students: 12,
            prereq_edges: dag.edges().to_vec(),
            learn_rate: 0.4,
            slip: 0.05,
            guess: 0.2,
            seed: 6,
            min_len: 6,
            max_len: 12,
        };
        let data = synth_generate(&synth).unwrap();
        let env = EnvSpec::Oracle { dag: dag.clone(), alpha: 0.4, slip: 0.05, guess: 0.2 };
        let mut mc = ModelConfig::new(6);
        mc.d = 8;
        mc.d_cond = 6;
        mc.diffusion_steps = 3;
        let cfg = InstabilityConfig {
            max_students: 3,
            train: TrainConfig { path_len: 2, epochs: 1, batch: 4, ..TrainConfig::default() },
            ..InstabilityConfig::default()
        };
        let report = instability_study(&mc, &data, &env, &cfg, &[1]).unwrap();
        assert_eq!(report.gaussian.per_seed_summary.len(), 1);
        assert!(report.gaussian.per_seed_summary[0].is_finite());
        assert!(report.standard.per_seed_summary[0].is_finite());
        assert!(report.gaussian_wins <= 1);
        let header = report.gaussian.csv.lines().next().unwrap().to_string();
        assert!(header.starts_with("seed,student,step_1"));
        for line in report.gaussian.csv.lines().skip(1) {
            assert_eq!(
                line.matches(',').count(),
                header.matches(',').count(),
                "unpadded row {line}"
            );
        }
    }
}
