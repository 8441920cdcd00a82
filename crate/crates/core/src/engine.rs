//! Consultation loop.
//!
//! Each update maps the dialogue onto knowledge-base symptoms, elicits a
//! disease distribution grounded in their context, and (unless a stop rule
//! fires) builds a question pool, simulates answers to every candidate,
//! elicits answer likelihoods per disease and asks the question with the
//! lowest lookahead entropy. Everything is recorded in the state so a
//! session can be replayed or audited from its transcript.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{self, Backend, BackendConfig, BackendError, Dialogue, Exchange};
use crate::kb::{GatheredContext, KbError, KnowledgeBase};
use crate::prob::{
    self, CandidateQuestion, DiseaseDistribution, LookaheadOptions, LookaheadTable, ProbError, SelectionMode,
    MAX_RESPONSES,
};
use crate::transcript::Transcript;

pub const OPENING_QUESTION: &str = "What brings you in today? Please describe what you're feeling.";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("opening statement is empty")]
    EmptyOpening,
    #[error("patient response is empty")]
    EmptyResponse,
    #[error("session is {0}, not active")]
    NotActive(Status),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session config has no knowledge base path")]
    NoKbPath,
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prob(#[from] ProbError),
    #[error("state invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    /// Candidate questions per turn.
    pub k: usize,
    /// Simulated answers per candidate.
    pub l_max: usize,
    pub max_turns: usize,
    /// Stop once the entropy drops to this value (nats). `None` disables.
    pub stop_entropy: Option<f64>,
    /// Stop once the top disease reaches this probability. `None` disables.
    pub stop_top1: Option<f64>,
    /// Stop after two consecutive turns where no candidate moved the entropy.
    pub stop_on_uninformative: bool,
    pub selection_mode: SelectionMode,
    pub row_normalize: bool,
    /// Symptoms kept from retrieval.
    pub top_n: usize,
    pub remap_every_turn: bool,
    /// Rewrite the selected question in plain language before asking it.
    pub humanize: bool,
    pub kb_path: Option<PathBuf>,
    pub backend: BackendConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            l_max: 5,
            max_turns: 6,
            stop_entropy: Some(0.5),
            stop_top1: Some(0.6),
            stop_on_uninformative: true,
            selection_mode: SelectionMode::Literal,
            row_normalize: false,
            top_n: 3,
            remap_every_turn: true,
            humanize: true,
            kb_path: None,
            backend: BackendConfig::default(),
        }
    }
}

impl SessionConfig {
    /// Fixed-length protocol: only `max_turns` ends a consultation.
    pub fn fixed_rounds(max_turns: usize) -> Self {
        Self {
            max_turns,
            stop_entropy: None,
            stop_top1: None,
            stop_on_uninformative: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if !(2..=MAX_RESPONSES).contains(&self.l_max) {
            return bad(format!("l_max must be in 2..={MAX_RESPONSES}, got {}", self.l_max));
        }
        if self.max_turns == 0 {
            return bad("max_turns must be >= 1".into());
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1".into());
        }
        if let Some(h) = self.stop_entropy {
            if h.is_nan() || h < 0.0 {
                return bad(format!("stop_entropy must be >= 0, got {h}"));
            }
        }
        if let Some(p) = self.stop_top1 {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("stop_top1 must be in [0, 1], got {p}"));
            }
        }
        Ok(())
    }

    fn lookahead_options(&self) -> LookaheadOptions {
        LookaheadOptions { mode: self.selection_mode, row_normalize: self.row_normalize }
    }
}

/// How the next question is chosen from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Policy {
    /// Lowest lookahead entropy.
    #[default]
    App,
    /// Uniform choice, seeded per (seed, session label, turn).
    Random { seed: u64 },
    /// Always the first candidate.
    First,
    /// No follow-up questions: diagnose from the opening statement.
    OneShot,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::App => "app",
            Policy::Random { .. } => "random",
            Policy::First => "first",
            Policy::OneShot => "oneshot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Diagnosed,
    Exhausted,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Active => "active",
            Status::Diagnosed => "diagnosed",
            Status::Exhausted => "exhausted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxTurns,
    EntropyThreshold,
    Top1Threshold,
    Uninformative,
    PoolExhausted,
    OneShot,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub disease_id: String,
    pub name: String,
    pub probability: f64,
    pub distribution: DiseaseDistribution,
    pub turns_used: usize,
    pub stop_reason: StopReason,
}

/// The question put to the patient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskedQuestion {
    pub id: usize,
    /// Text shown to the patient (after the plain-language rewrite).
    pub text: String,
    /// Text as generated.
    pub original_text: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    Question(AskedQuestion),
    Diagnosis(Diagnosis),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedSymptom {
    pub id: String,
    pub score: f64,
}

/// One distribution update: what was retrieved and how weights were read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: usize,
    pub symptom_summary: String,
    pub mapped_symptoms: Vec<MappedSymptom>,
    /// No symptom matched; the whole knowledge base was used.
    pub fallback: bool,
    pub candidate_ids: Vec<String>,
    pub raw_text: String,
    pub repaired: bool,
    pub attempt_count: usize,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub id: usize,
    pub text: String,
    pub rationale: String,
    pub responses: Vec<String>,
    /// disease id -> likelihood per response, after flooring.
    pub likelihoods: std::collections::BTreeMap<String, Vec<f64>>,
    /// Lookahead entropy; absent for policies that skip the lookahead.
    pub expected_entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub iteration: usize,
    pub policy: Policy,
    pub mode: SelectionMode,
    pub prior_entropy: f64,
    pub candidates: Vec<CandidateReport>,
    pub selected_id: usize,
    pub selected_text: String,
    pub asked_text: String,
    pub uninformative: bool,
    pub notes: Vec<String>,
}

/// Mutable consultation state. `turns` holds the follow-up exchanges; the
/// opening exchange is kept separately, so `turns.len() == iteration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub opening: Exchange,
    pub turns: Vec<Exchange>,
    pub iteration: usize,
    pub mapped_symptoms: Vec<String>,
    pub distribution_history: Vec<DiseaseDistribution>,
    pub entropy_trace: Vec<f64>,
    pub updates: Vec<UpdateRecord>,
    pub selection_reports: Vec<SelectionReport>,
    pub pending: Option<AskedQuestion>,
    pub status: Status,
    pub diagnosis: Option<Diagnosis>,
    pub policy: Policy,
    /// Stream label for the random policy (case id or session id).
    pub label: String,
}

impl DialogueState {
    pub fn dialogue(&self) -> Dialogue {
        let mut exchanges = Vec::with_capacity(self.turns.len() + 1);
        exchanges.push(self.opening.clone());
        exchanges.extend(self.turns.iter().cloned());
        Dialogue { exchanges }
    }

    pub fn current_distribution(&self) -> Option<&DiseaseDistribution> {
        self.distribution_history.last()
    }

    pub fn current_entropy(&self) -> Option<f64> {
        self.entropy_trace.last().copied()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        if self.turns.len() != self.iteration {
            return Err(format!("{} turns at iteration {}", self.turns.len(), self.iteration));
        }
        let n = self.iteration + 1;
        if self.distribution_history.len() != n || self.entropy_trace.len() != n {
            return Err(format!(
                "{} distributions / {} entropies at iteration {}",
                self.distribution_history.len(),
                self.entropy_trace.len(),
                self.iteration
            ));
        }
        for (t, (d, h)) in self.distribution_history.iter().zip(&self.entropy_trace).enumerate() {
            if prob::entropy(d) != *h {
                return Err(format!("entropy trace mismatch at {t}"));
            }
            if d.iteration() != t {
                return Err(format!("distribution {t} labelled iteration {}", d.iteration()));
            }
        }
        match (self.status, &self.pending, &self.diagnosis) {
            (Status::Active, Some(_), None) => Ok(()),
            (Status::Active, _, _) => Err("active session without a single pending question".into()),
            (_, None, Some(d)) => {
                let top = self.distribution_history.last().and_then(|x| x.argmax());
                if top.map(|t| t.id.as_str()) != Some(d.disease_id.as_str()) {
                    return Err("diagnosis is not the argmax of the final distribution".into());
                }
                Ok(())
            }
            _ => Err("finished session without a diagnosis".into()),
        }
    }
}

type LikelihoodKey = (String, Vec<String>, String);
/// Disease id, likelihood row and an optional repair note.
type LikelihoodRow = (String, Vec<f64>, Option<String>);

pub struct Engine {
    kb: Arc<KnowledgeBase>,
    backend: Arc<dyn Backend>,
    config: SessionConfig,
}

impl Engine {
    pub fn new(
        kb: Arc<KnowledgeBase>,
        backend: Arc<dyn Backend>,
        config: SessionConfig,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        Ok(Self { kb, backend, config })
    }

    /// Loads the knowledge base from `config.kb_path` and connects the
    /// configured backend.
    pub fn from_config(config: SessionConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let path = config.kb_path.as_ref().ok_or(EngineError::NoKbPath)?;
        let kb = Arc::new(KnowledgeBase::ingest(path)?);
        let backend = backend::connect(&config.backend)?;
        Self::new(kb, backend, config)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn start_session(&self, opening: &str) -> Result<(DialogueState, Outcome), EngineError> {
        self.start_with(opening, Policy::App, "")
    }

    pub fn start_with(
        &self,
        opening: &str,
        policy: Policy,
        label: &str,
    ) -> Result<(DialogueState, Outcome), EngineError> {
        if opening.trim().is_empty() {
            return Err(EngineError::EmptyOpening);
        }
        let mut state = DialogueState {
            opening: Exchange {
                question: OPENING_QUESTION.to_string(),
                response: opening.trim().to_string(),
            },
            turns: Vec::new(),
            iteration: 0,
            mapped_symptoms: Vec::new(),
            distribution_history: Vec::new(),
            entropy_trace: Vec::new(),
            updates: Vec::new(),
            selection_reports: Vec::new(),
            pending: None,
            status: Status::Active,
            diagnosis: None,
            policy,
            label: label.to_string(),
        };
        let upsilon = self.update(&mut state)?;
        let outcome = if policy == Policy::OneShot {
            self.finish(&mut state, StopReason::OneShot)
        } else {
            self.ask_next(&mut state, &upsilon)?
        };
        state.check_invariants().map_err(EngineError::Invariant)?;
        Ok((state, outcome))
    }

    /// Incorporates the patient's answer to the pending question. On error
    /// the state is left untouched and the call can be retried.
    pub fn step(&self, state: &mut DialogueState, response: &str) -> Result<Outcome, EngineError> {
        if state.status != Status::Active {
            return Err(EngineError::NotActive(state.status));
        }
        if response.trim().is_empty() {
            return Err(EngineError::EmptyResponse);
        }
        let mut next = state.clone();
        let asked = next
            .pending
            .take()
            .ok_or_else(|| EngineError::Invariant("active session without a pending question".into()))?;
        next.turns.push(Exchange { question: asked.text, response: response.trim().to_string() });
        next.iteration += 1;
        let upsilon = self.update(&mut next)?;
        let outcome = match self.stop_reason(&next) {
            Some(reason) => self.finish(&mut next, reason),
            None => self.ask_next(&mut next, &upsilon)?,
        };
        next.check_invariants().map_err(EngineError::Invariant)?;
        *state = next;
        Ok(outcome)
    }

    pub fn trace(&self, state: &DialogueState) -> Transcript {
        Transcript::new(self.config.clone(), state.clone())
    }

    fn stop_reason(&self, state: &DialogueState) -> Option<StopReason> {
        let dist = state.current_distribution()?;
        let h = state.current_entropy()?;
        if self.config.stop_entropy.is_some_and(|t| h <= t) {
            return Some(StopReason::EntropyThreshold);
        }
        let top1 = dist.argmax().map_or(0.0, |e| e.p);
        if self.config.stop_top1.is_some_and(|t| top1 >= t) {
            return Some(StopReason::Top1Threshold);
        }
        let reports = &state.selection_reports;
        if self.config.stop_on_uninformative
            && reports.len() >= 2
            && reports[reports.len() - 2..].iter().all(|r| r.uninformative)
        {
            return Some(StopReason::Uninformative);
        }
        if state.iteration >= self.config.max_turns {
            return Some(StopReason::MaxTurns);
        }
        None
    }

    fn finish(&self, state: &mut DialogueState, reason: StopReason) -> Outcome {
        let dist = state.current_distribution().expect("finish after at least one update").clone();
        let top = dist.argmax().expect("distribution has entries").clone();
        let name = self.kb.disease(&top.id).map_or_else(|| top.id.clone(), |d| d.name.clone());
        let diagnosis = Diagnosis {
            disease_id: top.id,
            name,
            probability: top.p,
            distribution: dist,
            turns_used: state.iteration,
            stop_reason: reason,
        };
        state.status =
            if reason == StopReason::PoolExhausted { Status::Exhausted } else { Status::Diagnosed };
        state.pending = None;
        state.diagnosis = Some(diagnosis.clone());
        Outcome::Diagnosis(diagnosis)
    }

    fn retrieve(
        &self,
        dialogue: &Dialogue,
    ) -> Result<(String, Vec<MappedSymptom>, GatheredContext), EngineError> {
        let summary = self.backend.extract_symptom_text(dialogue)?.value;
        let mapped = match self.kb.map_to_symptoms(&summary, self.config.top_n) {
            Ok(m) => m,
            Err(KbError::EmptyQuery) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let entries: Vec<_> = mapped.iter().map(|(s, _)| *s).collect();
        let ctx = if entries.is_empty() { self.kb.gather_all() } else { self.kb.gather_context(&entries) };
        let mapped = mapped.into_iter().map(|(s, score)| MappedSymptom { id: s.id.clone(), score }).collect();
        Ok((summary, mapped, ctx))
    }

    /// Re-maps symptoms (when configured) and elicits the distribution for
    /// the current iteration.
    /// Returns the diagnosis-procedure context for question generation.
    fn update(&self, state: &mut DialogueState) -> Result<String, EngineError> {
        let dialogue = state.dialogue();
        let reuse = !self.config.remap_every_turn && !state.updates.is_empty();
        let (summary, mapped, ctx) = if reuse {
            let last = state.updates.last().expect("checked non-empty");
            let entries: Vec<_> = state.mapped_symptoms.iter().filter_map(|id| self.kb.symptom(id)).collect();
            let ctx =
                if entries.is_empty() { self.kb.gather_all() } else { self.kb.gather_context(&entries) };
            (last.symptom_summary.clone(), last.mapped_symptoms.clone(), ctx)
        } else {
            self.retrieve(&dialogue)?
        };
        let fallback = mapped.is_empty();
        let mut notes = Vec::new();
        if fallback {
            notes.push("no symptom matched the dialogue; using every knowledge-base disease".to_string());
        }

        // previous diseases stay in play; new candidates are appended
        let mut candidates: Vec<String> =
            state.current_distribution().map(|d| d.ids().map(str::to_string).collect()).unwrap_or_default();
        for id in &ctx.candidate_disease_ids {
            if !candidates.contains(id) {
                candidates.push(id.clone());
            }
        }
        let raw = self.backend.elicit_distribution(&ctx.gamma_text, &dialogue, &candidates)?;
        let mut weights: Vec<(String, f64)> = candidates
            .iter()
            .map(|c| {
                let w = raw.value.weights.iter().find(|(id, _)| id == c).map(|(_, w)| *w);
                if w.is_none() {
                    notes.push(format!("`{c}` missing from elicitation; weight 0"));
                }
                (c.clone(), w.unwrap_or(0.0))
            })
            .collect();
        for (id, w) in &raw.value.weights {
            if candidates.contains(id) {
                continue;
            }
            if self.kb.disease(id).is_some() {
                notes.push(format!("`{id}` added by elicitation"));
                weights.push((id.clone(), *w));
            } else {
                notes.push(format!("`{id}` is not a knowledge-base disease; dropped"));
            }
        }
        let normalized = prob::normalize(&weights, raw.value.other, state.iteration)?;
        notes.extend(normalized.notes);
        let dist = normalized.distribution;

        state.mapped_symptoms = mapped.iter().map(|m| m.id.clone()).collect();
        state.entropy_trace.push(prob::entropy(&dist));
        state.distribution_history.push(dist);
        state.updates.push(UpdateRecord {
            iteration: state.iteration,
            symptom_summary: summary,
            mapped_symptoms: mapped,
            fallback,
            candidate_ids: candidates,
            raw_text: raw.raw_text,
            repaired: raw.repaired,
            attempt_count: raw.attempt_count,
            notes,
        });
        Ok(ctx.upsilon_text)
    }

    /// Generates the pool, scores it under the session policy and records
    /// the selection. An empty pool ends the session as exhausted.
    fn ask_next(&self, state: &mut DialogueState, upsilon: &str) -> Result<Outcome, EngineError> {
        let dialogue = state.dialogue();
        let dist = state.current_distribution().expect("ask after an update").clone();
        let pool = match self.backend.generate_questions(upsilon, &dialogue, &dist, self.config.k) {
            Ok(r) => r,
            Err(BackendError::EmptyPool) => return Ok(self.finish(state, StopReason::PoolExhausted)),
            Err(e) => return Err(e.into()),
        };
        let mut notes = Vec::new();
        if pool.repaired {
            notes.push(format!("question pool repaired from: {}", pool.raw_text));
        }
        let pool = pool.value;
        let prior_entropy = *state.entropy_trace.last().expect("entropy recorded");

        let (selected, candidates, uninformative) = match state.policy {
            Policy::App => {
                let tables = self.lookahead(&dialogue, &dist, &pool, &mut notes)?;
                let selection = prob::select_question_with(&dist, &tables, &self.config.lookahead_options())?;
                let candidates = tables
                    .into_iter()
                    .zip(&selection.scores)
                    .map(|(t, s)| CandidateReport {
                        id: t.question.id,
                        text: t.question.text,
                        rationale: t.question.rationale,
                        responses: t.responses,
                        likelihoods: t.likelihoods,
                        expected_entropy: Some(s.expected_entropy),
                    })
                    .collect();
                (selection.question, candidates, selection.uninformative)
            }
            policy => {
                let idx = match policy {
                    Policy::Random { seed } => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(stream_seed(seed, &state.label, state.iteration));
                        rng.random_range(0..pool.len())
                    }
                    _ => 0,
                };
                let candidates = pool
                    .iter()
                    .map(|q| CandidateReport {
                        id: q.id,
                        text: q.text.clone(),
                        rationale: q.rationale.clone(),
                        responses: Vec::new(),
                        likelihoods: Default::default(),
                        expected_entropy: None,
                    })
                    .collect();
                (pool[idx].clone(), candidates, false)
            }
        };

        let asked_text = if self.config.humanize {
            let r = self.backend.humanize_question(&selected.text)?;
            if r.repaired {
                notes.push(format!("plain-language rewrite repaired from: {}", r.raw_text));
            }
            r.value
        } else {
            selected.text.clone()
        };
        state.selection_reports.push(SelectionReport {
            iteration: state.iteration,
            policy: state.policy,
            mode: self.config.selection_mode,
            prior_entropy,
            candidates,
            selected_id: selected.id,
            selected_text: selected.text.clone(),
            asked_text: asked_text.clone(),
            uninformative,
            notes,
        });
        let asked = AskedQuestion {
            id: selected.id,
            text: asked_text,
            original_text: selected.text,
            rationale: selected.rationale,
        };
        state.pending = Some(asked.clone());
        Ok(Outcome::Question(asked))
    }

    /// Simulates answers for every candidate and elicits one likelihood row
    /// per (candidate, disease), fanned out in parallel. Identical requests
    /// within the turn are answered once.
    fn lookahead(
        &self,
        dialogue: &Dialogue,
        dist: &DiseaseDistribution,
        pool: &[CandidateQuestion],
        notes: &mut Vec<String>,
    ) -> Result<Vec<LookaheadTable>, EngineError> {
        let memo: Mutex<HashMap<LikelihoodKey, Vec<f64>>> = Mutex::new(HashMap::new());
        let results: Vec<Result<(LookaheadTable, Vec<String>), EngineError>> = pool
            .par_iter()
            .map(|q| {
                let mut local_notes = Vec::new();
                let responses = self.backend.simulate_responses(q, dialogue, self.config.l_max)?;
                if responses.repaired {
                    local_notes.push(format!("q{}: responses repaired from: {}", q.id, responses.raw_text));
                }
                let responses = responses.value;
                let rows: Vec<Result<LikelihoodRow, EngineError>> = dist
                    .entries()
                    .par_iter()
                    .map(|e| {
                        let key = (q.text.clone(), responses.clone(), e.id.clone());
                        if let Some(row) = memo.lock().expect("memo lock").get(&key) {
                            return Ok((e.id.clone(), row.clone(), None));
                        }
                        let disease = self.kb.disease(&e.id).ok_or_else(|| {
                            EngineError::Invariant(format!("`{}` not in knowledge base", e.id))
                        })?;
                        let r = self.backend.elicit_likelihoods(q, &responses, disease)?;
                        let note = r.repaired.then(|| {
                            format!("q{}/{}: likelihoods repaired from: {}", q.id, e.id, r.raw_text)
                        });
                        memo.lock().expect("memo lock").insert(key, r.value.clone());
                        Ok((e.id.clone(), r.value, note))
                    })
                    .collect();
                let mut likelihoods = std::collections::BTreeMap::new();
                for row in rows {
                    let (id, values, note) = row?;
                    local_notes.extend(note);
                    likelihoods.insert(id, values);
                }
                let table = LookaheadTable::new(q.clone(), responses, likelihoods, self.config.l_max)?;
                if table.floored_cells > 0 {
                    local_notes.push(format!(
                        "q{}: {} zero likelihood(s) floored to {}",
                        q.id,
                        table.floored_cells,
                        prob::LIKELIHOOD_FLOOR
                    ));
                }
                Ok((table, local_notes))
            })
            .collect();
        let mut tables = Vec::with_capacity(results.len());
        for r in results {
            let (table, n) = r?;
            notes.extend(n);
            tables.push(table);
        }
        Ok(tables)
    }
}

/// Mixes the policy seed, session label and turn into one RNG seed
/// (FNV-1a over the label; stable across platforms and releases).
fn stream_seed(seed: u64, label: &str, turn: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h.rotate_left(17) ^ (turn as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}
