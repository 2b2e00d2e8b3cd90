//! Interaction logs: CSV ingestion, a prerequisite DAG, a seeded synthetic
//! generator backed by the rule-based mastery model, and session assembly
//! (history prefix + sampled goal set) with a student-disjoint split.

use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::sim::OracleState;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// One (student, concept, correctness, time) event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub student_id: String,
    pub concept_id: usize,
    pub correct: u8,
    pub timestamp: i64,
}

/// All interactions of one student, sorted by timestamp.
#[derive(Debug, Clone)]
pub struct StudentSeq {
    pub student_id: String,
    /// (concept, label) pairs in time order.
    pub steps: Vec<(usize, u8)>,
}

/// A parsed dataset with densified concept ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub students: Vec<StudentSeq>,
    pub n_concepts: usize,
}

/// Headline statistics reported after loading.
#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub students: usize,
    pub concepts: usize,
    pub events: usize,
    pub mean_seq_len: f64,
}

impl Dataset {
    pub fn summary(&self) -> DataSummary {
        let events: usize = self.students.iter().map(|s| s.steps.len()).sum();
        DataSummary {
            students: self.students.len(),
            concepts: self.n_concepts,
            events,
            mean_seq_len: events as f64 / self.students.len().max(1) as f64,
        }
    }

    /// Flip each label with probability `frac` (seeded); models noisy logs.
    pub fn with_label_noise(&self, frac: f64, seed: u64) -> Dataset {
        let mut out = self.clone();
        for (si, student) in out.students.iter_mut().enumerate() {
            let mut rng = rng_stream(seed, 0xF11F ^ si as u64);
            for step in &mut student.steps {
                if rng.random::<f64>() < frac {
                    step.1 = 1 - step.1;
                }
            }
        }
        out
    }
}

/// Load a CSV with header `student_id,concept_id,correct,timestamp`.
/// Concept ids are densified to [0, N) in sorted order of the raw ids;
/// records are sorted by timestamp within each student (stable on ties).
pub fn load_interactions(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["student_id", "concept_id", "correct", "timestamp"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            detail: format!("expected header {expected:?}, got {got:?}"),
        });
    }

    let mut raw: Vec<(String, i64, u8, i64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or(Error::Parse { line, detail: format!("missing column {i}") })
        };
        let student = field(0)?.to_string();
        if student.is_empty() {
            return Err(Error::Parse { line, detail: "empty student_id".into() });
        }
        let concept_raw = field(1)?.trim();
        let concept: i64 = concept_raw
            .parse()
            .map_err(|_| Error::Parse { line, detail: format!("bad concept_id {concept_raw:?}") })?;
        if concept < 0 {
            return Err(Error::Parse { line, detail: format!("negative concept_id {concept}") });
        }
        let correct: u8 = match field(2)?.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Parse { line, detail: format!("correct must be 0/1, got {other:?}") })
            }
        };
        let ts_raw = field(3)?.trim();
        let ts: i64 = ts_raw
            .parse()
            .map_err(|_| Error::Parse { line, detail: format!("bad timestamp {ts_raw:?}") })?;
        raw.push((student, concept, correct, ts));
    }
    if raw.is_empty() {
        return Err(Error::BadData("interaction log holds no records".into()));
    }

    let ids: BTreeSet<i64> = raw.iter().map(|r| r.1).collect();
    let dense: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut by_student: BTreeMap<String, Vec<(i64, usize, u8)>> = BTreeMap::new();
    for (student, concept, correct, ts) in raw {
        by_student.entry(student).or_default().push((ts, dense[&concept], correct));
    }
    let students = by_student
        .into_iter()
        .map(|(student_id, mut rows)| {
            rows.sort_by_key(|r| r.0);
            StudentSeq { student_id, steps: rows.into_iter().map(|r| (r.1, r.2)).collect() }
        })
        .collect();
    Ok(Dataset { students, n_concepts: dense.len() })
}

/// Write a dataset back out in the canonical CSV schema.
pub fn write_interactions(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "student_id,concept_id,correct,timestamp")?;
    for student in &dataset.students {
        for (t, (concept, correct)) in student.steps.iter().enumerate() {
            writeln!(w, "{},{},{},{}", student.student_id, concept, correct, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- prerequisite DAG ----

/// Directed acyclic "must be learned before" graph over concepts.
#[derive(Debug, Clone)]
pub struct PrereqDag {
    n: usize,
    edges: Vec<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

impl PrereqDag {
    /// Build and validate. Edge (a, b) means a is a prerequisite of b.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::IndexOutOfBounds { what: "dag edge", index: a.max(b), len: n });
            }
            if a == b {
                return Err(Error::CyclicPrereq(a));
            }
            parents[b].push(a);
            children[a].push(b);
        }
        for list in parents.iter_mut().chain(children.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        // Kahn's algorithm with a smallest-index frontier so the topological
        // order is canonical.
        let mut indeg: Vec<usize> = parents.iter().map(|p| p.len()).collect();
        let mut frontier: BTreeSet<usize> =
            (0..n).filter(|&c| indeg[c] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(&c) = frontier.iter().next() {
            frontier.remove(&c);
            topo.push(c);
            for &child in &children[c] {
                indeg[child] -= 1;
                if indeg[child] == 0 {
                    frontier.insert(child);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&c| indeg[c] > 0).unwrap_or(0);
            return Err(Error::CyclicPrereq(stuck));
        }
        Ok(PrereqDag { n, edges: edges.to_vec(), parents, children, topo })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn parents(&self, c: usize) -> &[usize] {
        &self.parents[c]
    }

    pub fn children(&self, c: usize) -> &[usize] {
        &self.children[c]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// The given concepts plus all their (transitive) prerequisites, sorted.
    pub fn ancestors_of(&self, set: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.n];
        let mut stack: Vec<usize> = set.to_vec();
        while let Some(c) = stack.pop() {
            if seen[c] {
                continue;
            }
            seen[c] = true;
            stack.extend_from_slice(&self.parents[c]);
        }
        (0..self.n).filter(|&c| seen[c]).collect()
    }
}

/// A reproducible layered random DAG: `layers` tiers, every non-root concept
/// draws 1..=`max_parents` parents from the previous tier.
pub fn random_layered_dag(n: usize, layers: usize, max_parents: usize, seed: u64) -> PrereqDag {
    assert!(layers >= 1 && n >= layers);
    let mut rng = rng_stream(seed, 0xDA6);
    let per = n.div_ceil(layers);
    let tier = |c: usize| (c / per).min(layers - 1);
    let mut edges = Vec::new();
    for c in 0..n {
        let t = tier(c);
        if t == 0 {
            continue;
        }
        let prev: Vec<usize> = (0..n).filter(|&p| tier(p) == t - 1).collect();
        let k = rng.random_range(1..=max_parents.min(prev.len()));
        let mut pool = prev;
        for _ in 0..k {
            let i = rng.random_range(0..pool.len());
            edges.push((pool.swap_remove(i), c));
        }
    }
    edges.sort_unstable();
    PrereqDag::new(n, &edges).expect("layered construction cannot produce cycles")
}

// ---- synthetic generation ----

/// Configuration of the synthetic interaction generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub n_concepts: usize,
    pub n_students: usize,
    pub prereq_edges: Vec<(usize, usize)>,
    /// Mastery gained per correct answer (α of the rule-based model).
    pub learn_rate: f64,
    pub slip: f64,
    pub guess: f64,
    pub seed: u64,
    /// Per-student sequence length is uniform in [min_len, max_len].
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_min_len() -> usize {
    20
}

fn default_max_len() -> usize {
    60
}

impl SynthConfig {
    pub fn validate(&self) -> Result<PrereqDag> {
        if self.n_concepts == 0 || self.n_students == 0 {
            return Err(Error::InvalidConfig("n_concepts and n_students must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.learn_rate) || self.learn_rate == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learn_rate must be in (0,1), got {}",
                self.learn_rate
            )));
        }
        for (name, v) in [("slip", self.slip), ("guess", self.guess)] {
            if !(0.0..0.5).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 0.5), got {v}")));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!(
                "bad sequence length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        PrereqDag::new(self.n_concepts, &self.prereq_edges)
    }
}

/// Generate a dataset by simulating students against the rule-based mastery
/// model. Students mostly study a frontier of "ready" concepts in topological
/// order, revisit already-mastered concepts for review, and occasionally
/// explore uniformly; per-student ability scales the base learn rate.
/// Identical config ⇒ identical dataset.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    let dag = cfg.validate()?;
    let topo = dag.topo_order().to_vec();
    let mut students = Vec::with_capacity(cfg.n_students);
    for s in 0..cfg.n_students {
        let mut rng = rng_stream(cfg.seed, s as u64);
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let ability = rng.random_range(0.5..1.5);
        let mut oracle = OracleState::new(cfg.n_concepts, (cfg.learn_rate * ability).min(0.95));
        let mut steps: Vec<(usize, u8)> = Vec::with_capacity(len);
        for _ in 0..len {
            // Frontier: the first few topo-ordered concepts not yet mastered
            // whose prerequisites are mostly in place.
            let ready: Vec<usize> = topo
                .iter()
                .copied()
                .filter(|&c| oracle.mastery(c) < 0.85 && oracle.prereq_product(&dag, c) >= 0.4)
                .take(4)
                .collect();
            let mastered: Vec<usize> =
                (0..cfg.n_concepts).filter(|&c| oracle.mastery(c) >= 0.85).collect();
            let retry = match steps.last() {
                Some(&(prev, 0)) => (rng.random::<f64>() < 0.4).then_some(prev),
                _ => None,
            };
            let roll = rng.random::<f64>();
            let concept = if let Some(prev) = retry {
                prev
            } else if roll < 0.65 && !ready.is_empty() {
                ready[rng.random_range(0..ready.len())]
            } else if roll < 0.9 && !mastered.is_empty() {
                mastered[rng.random_range(0..mastered.len())]
            } else {
                rng.random_range(0..cfg.n_concepts)
            };
            let p = oracle.response_prob(concept, cfg.slip, cfg.guess);
            let correct = u8::from(rng.random::<f64>() < p);
            oracle.update(&dag, concept, correct);
            steps.push((concept, correct));
        }
        students.push(StudentSeq { student_id: format!("s{s:06}"), steps });
    }
    Ok(Dataset { students, n_concepts: cfg.n_concepts })
}

/// Write the generator's sidecar (config + DAG) next to the CSV.
pub fn write_synth_sidecar(cfg: &SynthConfig, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg)?;
    std::fs::write(path, json.as_bytes())?;
    Ok(())
}

pub fn read_synth_sidecar(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: SynthConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

// ---- session assembly ----

/// A training/evaluation unit: one student's history prefix plus goals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub student_id: String,
    pub history: Vec<(usize, u8)>,
    /// Sorted, deduplicated goal concepts; never empty.
    pub goals: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionConfig {
    pub goal_count: usize,
    pub split_ratio: f64,
    pub seed: u64,
}

/// Student-disjoint train/test sessions.
#[derive(Debug, Clone)]
pub struct SessionSplit {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    /// Students dropped for having no usable history or no eligible goals.
    pub skipped: usize,
}

/// Truncate each student's history to a random prefix (uniform length in
/// [5, min(40, full)]), sample goals from concepts the prefix has not
/// answered correctly, and split students disjointly by `split_ratio`.
pub fn build_sessions(dataset: &Dataset, cfg: &SessionConfig) -> Result<SessionSplit> {
    if cfg.goal_count == 0 || cfg.goal_count > dataset.n_concepts {
        return Err(Error::InvalidConfig(format!(
            "goal_count {} outside [1, {}]",
            cfg.goal_count, dataset.n_concepts
        )));
    }
    if !(0.0..=1.0).contains(&cfg.split_ratio) {
        return Err(Error::InvalidConfig(format!("split_ratio {} outside [0,1]", cfg.split_ratio)));
    }

    let mut order: Vec<usize> = (0..dataset.students.len()).collect();
    let mut shuffle_rng = rng_stream(cfg.seed, 0x5E55);
    // Fisher-Yates.
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train_count =
        ((cfg.split_ratio * dataset.students.len() as f64).round() as usize).min(order.len());

    let mut split = SessionSplit { train: Vec::new(), test: Vec::new(), skipped: 0 };
    for (rank, &si) in order.iter().enumerate() {
        let student = &dataset.students[si];
        if student.steps.is_empty() {
            split.skipped += 1;
            continue;
        }
        let mut rng = rng_stream(cfg.seed, 0x10_000 + si as u64);
        let full = student.steps.len();
        let hi = full.min(40);
        let lo = full.min(5);
        let prefix_len = if lo >= hi { hi } else { rng.random_range(lo..=hi) };
        let history: Vec<(usize, u8)> = student.steps[..prefix_len].to_vec();

        let mastered: BTreeSet<usize> =
            history.iter().filter(|&&(_, y)| y == 1).map(|&(c, _)| c).collect();
        let mut eligible: Vec<usize> =
            (0..dataset.n_concepts).filter(|c| !mastered.contains(c)).collect();
        if eligible.is_empty() {
            split.skipped += 1;
            continue;
        }
        let k = cfg.goal_count.min(eligible.len());
        let mut goals = Vec::with_capacity(k);
        for _ in 0..k {
            let i = rng.random_range(0..eligible.len());
            goals.push(eligible.swap_remove(i));
        }
        goals.sort_unstable();

        let session = Session { student_id: student.student_id.clone(), history, goals };
        if rank < train_count {
            split.train.push(session);
        } else {
            split.test.push(session);
        }
    }
    if split.train.is_empty() && split.test.is_empty() {
        return Err(Error::BadData("no usable sessions after filtering".into()));
    }
    Ok(split)
}
