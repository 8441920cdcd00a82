//! Simulated patients and the benchmark runner.
//!
//! A case file describes one persona; the simulated patient answers the
//! engine's questions through [`Backend::respond_as_patient`]. A benchmark
//! runs every case under every requested question policy and aggregates
//! per-iteration entropy, hit rate and turn counts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendKind};
use crate::engine::{Diagnosis, DialogueState, Engine, EngineError, Outcome, Policy, OPENING_QUESTION};
use crate::kb::KnowledgeBase;
use crate::prob::DiseaseDistribution;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: malformed case: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("duplicate case id `{id}` in {} and {}", first.display(), second.display())]
    DuplicateCase { id: String, first: PathBuf, second: PathBuf },
    #[error("case `{case}`: ground truth `{disease}` is not in the knowledge base")]
    DanglingGroundTruth { case: String, disease: String },
    #[error("no case files found in {0}")]
    NoCases(PathBuf),
    #[error("unknown policy `{0}` (expected app|random|first|oneshot)")]
    UnknownPolicy(String),
    #[error("case `{0}` has no facts; the scripted patient needs a fact table")]
    NoFacts(String),
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

/// Simulator persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientProfile {
    pub case_id: String,
    pub symptoms: Vec<String>,
    pub age: u32,
    pub intention: String,
    pub personality: String,
    /// topic -> answer. The `opening` topic answers the opening question.
    #[serde(default)]
    pub facts: BTreeMap<String, String>,
    pub ground_truth: String,
    #[serde(default)]
    pub specialty: String,
}

impl PatientProfile {
    /// Bare profile for tests and ad-hoc runs.
    pub fn minimal(case_id: &str, ground_truth: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            symptoms: Vec::new(),
            age: 40,
            intention: "find out what is wrong".to_string(),
            personality: "calm".to_string(),
            facts: BTreeMap::new(),
            ground_truth: ground_truth.to_string(),
            specialty: String::new(),
        }
    }
}

/// Reads every `*.json` case file in `dir`, sorted by case id.
pub fn load_cases(dir: &Path, kb: &KnowledgeBase) -> Result<Vec<PatientProfile>, SimError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| SimError::Io { path: dir.to_path_buf(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SimError::NoCases(dir.to_path_buf()));
    }
    let mut seen: HashMap<String, PathBuf> = HashMap::new();
    let mut out = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path).map_err(|source| SimError::Io { path: path.clone(), source })?;
        let p: PatientProfile = serde_json::from_str(&text)
            .map_err(|e| SimError::Malformed { path: path.clone(), reason: e.to_string() })?;
        if p.case_id.trim().is_empty() {
            return Err(SimError::Malformed { path, reason: "case_id is empty".into() });
        }
        if kb.disease(&p.ground_truth).is_none() {
            return Err(SimError::DanglingGroundTruth { case: p.case_id, disease: p.ground_truth });
        }
        if let Some(first) = seen.get(&p.case_id) {
            return Err(SimError::DuplicateCase { id: p.case_id, first: first.clone(), second: path });
        }
        seen.insert(p.case_id.clone(), path);
        out.push(p);
    }
    out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(out)
}

pub fn parse_policies(list: &str, seed: u64) -> Result<Vec<Policy>, SimError> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|name| match name {
            "app" => Ok(Policy::App),
            "random" => Ok(Policy::Random { seed }),
            "first" => Ok(Policy::First),
            "oneshot" => Ok(Policy::OneShot),
            other => Err(SimError::UnknownPolicy(other.to_string())),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub policy: String,
    pub ground_truth: String,
    pub diagnosis: Option<Diagnosis>,
    pub hit: bool,
    pub turns: usize,
    pub entropy_trace: Vec<f64>,
    pub distributions: Vec<DiseaseDistribution>,
    /// Engine or backend failure; the run continues with the next case.
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn final_entropy(&self) -> Option<f64> {
        self.entropy_trace.last().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: String,
    pub n: usize,
    pub failures: usize,
    /// Mean entropy per iteration 0..=horizon, carrying each case's last
    /// value forward when it ended early.
    pub mean_entropy: Vec<f64>,
    pub hit_rate: f64,
    pub mean_turns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRun {
    pub cases: Vec<String>,
    pub policies: Vec<String>,
    pub seed: u64,
    pub horizon: usize,
    /// Policy-major, then case id.
    pub outcomes: Vec<CaseOutcome>,
    pub aggregates: Vec<PolicyAggregate>,
}

/// Pads a trace to `horizon + 1` values with its last value.
pub fn carry_forward(trace: &[f64], horizon: usize) -> (Vec<f64>, bool) {
    let mut out: Vec<f64> = trace.iter().take(horizon + 1).copied().collect();
    let carried = out.len() < horizon + 1 && !out.is_empty();
    if let Some(&last) = out.last() {
        out.resize(horizon + 1, last);
    }
    (out, carried)
}

/// Aggregates for one policy from its outcomes. Failed cases without any
/// entropy value are left out of the means but counted in `failures`.
pub fn aggregate(policy: &str, outcomes: &[&CaseOutcome], horizon: usize) -> PolicyAggregate {
    let traced: Vec<&&CaseOutcome> = outcomes.iter().filter(|o| !o.entropy_trace.is_empty()).collect();
    let mut mean_entropy = vec![0.0; horizon + 1];
    for o in &traced {
        let (padded, _) = carry_forward(&o.entropy_trace, horizon);
        for (m, v) in mean_entropy.iter_mut().zip(padded) {
            *m += v;
        }
    }
    if !traced.is_empty() {
        for m in &mut mean_entropy {
            *m /= traced.len() as f64;
        }
    }
    let n = outcomes.len();
    let (hit_rate, mean_turns) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            outcomes.iter().filter(|o| o.hit).count() as f64 / n as f64,
            outcomes.iter().map(|o| o.turns as f64).sum::<f64>() / n as f64,
        )
    };
    PolicyAggregate {
        policy: policy.to_string(),
        n,
        failures: outcomes.iter().filter(|o| o.error.is_some()).count(),
        mean_entropy: if traced.is_empty() { Vec::new() } else { mean_entropy },
        hit_rate,
        mean_turns,
    }
}

impl BenchmarkRun {
    /// Recomputes aggregates from the per-case records.
    pub fn recompute_aggregates(&self) -> Vec<PolicyAggregate> {
        self.policies
            .iter()
            .map(|p| {
                let rows: Vec<&CaseOutcome> = self.outcomes.iter().filter(|o| &o.policy == p).collect();
                aggregate(p, &rows, self.horizon)
            })
            .collect()
    }

    pub fn outcomes_for<'a>(&'a self, policy: &'a str) -> impl Iterator<Item = &'a CaseOutcome> + 'a {
        self.outcomes.iter().filter(move |o| o.policy == policy)
    }
}

fn outcome_from(
    profile: &PatientProfile,
    policy: Policy,
    state: Option<&DialogueState>,
    err: Option<String>,
) -> CaseOutcome {
    let diagnosis = state.and_then(|s| s.diagnosis.clone());
    CaseOutcome {
        case_id: profile.case_id.clone(),
        policy: policy.name().to_string(),
        ground_truth: profile.ground_truth.clone(),
        hit: err.is_none() && diagnosis.as_ref().is_some_and(|d| d.disease_id == profile.ground_truth),
        turns: state.map_or(0, |s| s.iteration),
        entropy_trace: state.map(|s| s.entropy_trace.clone()).unwrap_or_default(),
        distributions: state.map(|s| s.distribution_history.clone()).unwrap_or_default(),
        diagnosis,
        error: err,
    }
}

/// Runs one consultation to its diagnosis. Failures are recorded in the
/// outcome rather than returned.
pub fn run_case(engine: &Engine, profile: &PatientProfile, policy: Policy) -> CaseOutcome {
    match drive(engine, profile, policy) {
        Ok(state) => outcome_from(profile, policy, Some(&state), None),
        Err((state, e)) => {
            log::warn!("case {} ({}): {e}", profile.case_id, policy.name());
            outcome_from(profile, policy, state.as_deref(), Some(e.to_string()))
        }
    }
}

/// Full consultation; returns the final state.
pub fn drive(
    engine: &Engine,
    profile: &PatientProfile,
    policy: Policy,
) -> Result<DialogueState, (Option<Box<DialogueState>>, EngineError)> {
    let backend: &dyn Backend = engine.backend();
    let opening = backend
        .respond_as_patient(profile, OPENING_QUESTION, &Default::default())
        .map_err(|e| (None, e.into()))?
        .value;
    let (mut state, mut outcome) =
        engine.start_with(&opening, policy, &profile.case_id).map_err(|e| (None, e))?;
    while let Outcome::Question(q) = outcome {
        let answer = match backend.respond_as_patient(profile, &q.text, &state.dialogue()) {
            Ok(a) => a.value,
            Err(e) => return Err((Some(Box::new(state)), e.into())),
        };
        outcome = match engine.step(&mut state, &answer) {
            Ok(o) => o,
            Err(e) => return Err((Some(Box::new(state)), e)),
        };
    }
    Ok(state)
}

/// Runs every case under every policy (in parallel) and aggregates.
/// `seed` is recorded in the run; random policies carry their own seed.
pub fn run_benchmark(
    engine: &Engine,
    cases: &[PatientProfile],
    policies: &[Policy],
    seed: u64,
) -> Result<BenchmarkRun, SimError> {
    if engine.config().backend.kind == BackendKind::Scripted {
        if let Some(c) = cases.iter().find(|c| c.facts.is_empty()) {
            return Err(SimError::NoFacts(c.case_id.clone()));
        }
    }
    let jobs: Vec<(Policy, &PatientProfile)> =
        policies.iter().flat_map(|p| cases.iter().map(move |c| (*p, c))).collect();
    let outcomes: Vec<CaseOutcome> =
        jobs.par_iter().map(|(policy, case)| run_case(engine, case, *policy)).collect();
    let mut run = BenchmarkRun {
        cases: cases.iter().map(|c| c.case_id.clone()).collect(),
        policies: policies.iter().map(|p| p.name().to_string()).collect(),
        seed,
        horizon: engine.config().max_turns,
        outcomes,
        aggregates: Vec::new(),
    };
    run.aggregates = run.recompute_aggregates();
    Ok(run)
}

pub const RUN_FILE: &str = "run.json";
pub const CASES_CSV: &str = "cases.csv";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Flat per-case table.
pub fn cases_csv(run: &BenchmarkRun) -> String {
    let mut out =
        String::from("policy,case_id,ground_truth,diagnosis,hit,turns,final_entropy,stop_reason,error\n");
    for o in &run.outcomes {
        let (diag, reason) = o
            .diagnosis
            .as_ref()
            .map_or((String::new(), String::new()), |d| (d.disease_id.clone(), d.stop_reason.to_string()));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            csv_field(&o.policy),
            csv_field(&o.case_id),
            csv_field(&o.ground_truth),
            csv_field(&diag),
            o.hit,
            o.turns,
            o.final_entropy().map_or(String::new(), |h| format!("{h:.6}")),
            reason,
            csv_field(o.error.as_deref().unwrap_or("")),
        ));
    }
    out
}

/// Writes `run.json` and `cases.csv` into `dir`.
pub fn write_run(run: &BenchmarkRun, dir: &Path) -> Result<(), SimError> {
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| SimError::Write { path, source })
    };
    fs::create_dir_all(dir).map_err(|source| SimError::Write { path: dir.to_path_buf(), source })?;
    let mut json = serde_json::to_string_pretty(run).expect("run serializes");
    json.push('\n');
    write(RUN_FILE, json)?;
    write(CASES_CSV, cases_csv(run))
}

pub fn read_run(path: &Path) -> Result<BenchmarkRun, SimError> {
    let text =
        fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text)
        .map_err(|e| SimError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carry_forward_pads() {
        assert_eq!(carry_forward(&[1.0, 0.5], 3), (vec![1.0, 0.5, 0.5, 0.5], true));
        assert_eq!(carry_forward(&[1.0, 0.5], 1), (vec![1.0, 0.5], false));
        assert_eq!(carry_forward(&[], 2), (vec![], false));
    }

    #[test]
    fn policy_names() {
        let p = parse_policies("app, random,first,oneshot", 7).unwrap();
        assert_eq!(p[1], Policy::Random { seed: 7 });
        assert_eq!(p.iter().map(Policy::name).collect::<Vec<_>>(), ["app", "random", "first", "oneshot"]);
        assert!(matches!(parse_policies("app,greedy", 0), Err(SimError::UnknownPolicy(p)) if p == "greedy"));
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
