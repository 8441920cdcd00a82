//! Deterministic generator backed by a script bundle.
//!
//! A bundle is a directory of `*.json` files read in file-name order. Each
//! file may hold:
//!
//! * `fixtures` — verbatim replies keyed by operation plus a partial match on
//!   the request inputs, one reply per attempt (the last one repeats);
//! * `scenario` — a small world model (prior weights, answer-driven evidence,
//!   question bank with responses, likelihoods and plain-language rewrites)
//!   selected by trigger phrases in the opening statement;
//! * `topics` — keyword lists used to route simulated-patient questions to
//!   profile facts.
//!
//! Requests are answered by the first matching fixture, then by the scenario,
//! then (lenient mode only) by built-in defaults. Strict mode reports a
//! scripted miss instead of using defaults. The generator holds no mutable
//! state, so every reply is a pure function of the request.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::Deserialize;
use serde_json::Value;

use super::{BackendError, Dialogue, GenerationRequest, Generator, Operation, RequestKey, NOT_SURE};
use crate::engine::OPENING_QUESTION;
use crate::sim::PatientProfile;

const DEFAULT_QUESTIONS: &[(&str, &str)] = &[
    ("When did this start, and has it been getting better or worse?", "onset and course"),
    ("Do you have a fever or feel generally unwell?", "systemic illness"),
    ("Does anything make it better or worse?", "triggers and relief"),
    ("Have you had anything like this before?", "recurrence"),
    ("Are you taking any medicines for it?", "treatment so far"),
];
const DEFAULT_RESPONSES: &[&str] = &["Yes", "No"];
const NEUTRAL_LIKELIHOOD: f64 = 0.5;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    #[serde(default)]
    scenario: Option<Scenario>,
    #[serde(default)]
    topics: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    fixtures: Vec<Fixture>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub triggers: Vec<String>,
    #[serde(default)]
    pub summary: Option<String>,
    pub prior: BTreeMap<String, f64>,
    #[serde(default)]
    pub other: f64,
    #[serde(default)]
    pub questions: Vec<ScriptedQuestion>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedQuestion {
    pub text: String,
    #[serde(default)]
    pub plain: Option<String>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub topic: Option<String>,
    pub responses: Vec<String>,
    #[serde(default)]
    pub likelihoods: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

/// Multiplies prior weights when a patient answer to this question contains
/// any of the phrases.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evidence {
    pub answer_contains: Vec<String>,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fixture {
    op: Operation,
    #[serde(default)]
    key: serde_json::Map<String, Value>,
    #[serde(default)]
    dialogue_contains: Option<String>,
    outputs: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptBundle {
    scenarios: Vec<Scenario>,
    topics: BTreeMap<String, Vec<String>>,
    fixtures: Vec<Fixture>,
}

fn norm(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn bundle_err(file: &Path, msg: impl std::fmt::Display) -> BackendError {
    BackendError::Bundle(format!("{}: {msg}", file.display()))
}

impl ScriptBundle {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let dir = dir.as_ref();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| bundle_err(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(bundle_err(dir, "no *.json files"));
        }
        let mut bundle = ScriptBundle::default();
        for file in files {
            let text = fs::read_to_string(&file).map_err(|e| bundle_err(&file, e))?;
            let parsed: ScriptFile = serde_json::from_str(&text).map_err(|e| bundle_err(&file, e))?;
            bundle.add(parsed).map_err(|e| bundle_err(&file, e))?;
        }
        Ok(bundle)
    }

    fn add(&mut self, file: ScriptFile) -> Result<(), String> {
        if let Some(s) = file.scenario {
            validate_scenario(&s)?;
            // Question lookups by text search every scenario, so a shared
            // question must mean the same thing everywhere.
            for q in &s.questions {
                if let Some((other, prev)) = self.find_question(&q.text) {
                    let rows_differ = q
                        .likelihoods
                        .iter()
                        .any(|(d, row)| prev.likelihoods.get(d).is_some_and(|p| p != row));
                    if prev.responses != q.responses || prev.topic != q.topic || rows_differ {
                        return Err(format!(
                            "question `{}` differs from its definition in scenario `{}`",
                            q.text, other.name
                        ));
                    }
                }
            }
            self.scenarios.push(s);
        }
        for (topic, words) in file.topics {
            self.topics.entry(topic).or_default().extend(words);
        }
        for f in &file.fixtures {
            if f.outputs.is_empty() {
                return Err(format!("fixture for {} has no outputs", f.op));
            }
        }
        self.fixtures.extend(file.fixtures);
        Ok(())
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    /// Scenario whose trigger appears in the opening statement.
    fn scenario_for(&self, dialogue: &Dialogue) -> Option<&Scenario> {
        let opening = norm(dialogue.opening_statement()?);
        self.scenarios.iter().find(|s| s.triggers.iter().any(|t| opening.contains(&norm(t))))
    }

    fn find_question(&self, text: &str) -> Option<(&Scenario, &ScriptedQuestion)> {
        let t = norm(text);
        self.scenarios.iter().find_map(|s| {
            s.questions
                .iter()
                .find(|q| norm(&q.text) == t || q.plain.as_deref().is_some_and(|p| norm(p) == t))
                .map(|q| (s, q))
        })
    }
}

fn validate_scenario(s: &Scenario) -> Result<(), String> {
    if s.triggers.is_empty() {
        return Err(format!("scenario `{}` has no triggers", s.name));
    }
    if !s.other.is_finite() || s.other < 0.0 {
        return Err(format!("scenario `{}`: other weight {}", s.name, s.other));
    }
    for (id, w) in &s.prior {
        if !w.is_finite() || *w < 0.0 {
            return Err(format!("scenario `{}`: prior weight {w} for `{id}`", s.name));
        }
    }
    for q in &s.questions {
        if q.responses.len() < 2 {
            return Err(format!("question `{}` needs at least 2 responses", q.text));
        }
        for (d, row) in &q.likelihoods {
            if row.len() != q.responses.len() {
                return Err(format!(
                    "question `{}`: {} likelihoods for `{d}`, expected {}",
                    q.text,
                    row.len(),
                    q.responses.len()
                ));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("question `{}`: likelihood outside [0, 1] for `{d}`", q.text));
            }
        }
        for ev in &q.evidence {
            if ev.weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(format!("question `{}`: negative evidence weight", q.text));
            }
        }
    }
    Ok(())
}

/// `partial` matches when every field it names equals the same field of the
/// request key (strings compared case- and whitespace-insensitively).
fn partial_match(partial: &Value, actual: &Value) -> bool {
    match (partial, actual) {
        (Value::Object(p), Value::Object(a)) => {
            p.iter().all(|(k, pv)| a.get(k).is_some_and(|av| partial_match(pv, av)))
        }
        (Value::String(p), Value::String(a)) => norm(p) == norm(a),
        (Value::Array(p), Value::Array(a)) => {
            p.len() == a.len() && p.iter().zip(a).all(|(x, y)| partial_match(x, y))
        }
        (p, a) => p == a,
    }
}

fn key_fields(key: &RequestKey) -> Value {
    // externally tagged enum: {"variant": {fields}}
    match serde_json::to_value(key).expect("request key serializes") {
        Value::Object(mut m) => m.values_mut().next().map(Value::take).unwrap_or(Value::Null),
        other => other,
    }
}

fn key_dialogue(key: &RequestKey) -> Option<&Dialogue> {
    match key {
        RequestKey::Extract { dialogue }
        | RequestKey::Distribution { dialogue, .. }
        | RequestKey::Questions { dialogue, .. }
        | RequestKey::Responses { dialogue, .. }
        | RequestKey::Patient { dialogue, .. } => Some(dialogue),
        _ => None,
    }
}

fn fingerprint(op: Operation, key: &RequestKey) -> String {
    format!("{op} {}", key_fields(key))
}

fn fenced(lines: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from("```\n");
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    out.push_str("```");
    out
}

pub struct ScriptedGenerator {
    bundle: ScriptBundle,
    strict: bool,
}

impl ScriptedGenerator {
    pub fn new(bundle: ScriptBundle, strict: bool) -> Self {
        Self { bundle, strict }
    }

    pub fn bundle(&self) -> &ScriptBundle {
        &self.bundle
    }

    fn fixture(&self, request: &GenerationRequest) -> Option<String> {
        let fields = key_fields(&request.key);
        let rendered = key_dialogue(&request.key).map(|d| norm(&d.render()));
        self.bundle
            .fixtures
            .iter()
            .find(|f| {
                f.op == request.op
                    && partial_match(&Value::Object(f.key.clone()), &fields)
                    && f.dialogue_contains
                        .as_deref()
                        .is_none_or(|needle| rendered.as_deref().is_some_and(|r| r.contains(&norm(needle))))
            })
            .map(|f| {
                let i = request.attempt.saturating_sub(1).min(f.outputs.len() - 1);
                f.outputs[i].clone()
            })
    }

    /// Scenario-driven reply, if the scenario covers the request.
    fn world(&self, key: &RequestKey) -> Option<String> {
        match key {
            RequestKey::Extract { dialogue } => self.bundle.scenario_for(dialogue)?.summary.clone(),
            RequestKey::Distribution { dialogue, candidates } => {
                let s = self.bundle.scenario_for(dialogue)?;
                Some(self.weights(s, dialogue, candidates))
            }
            RequestKey::Questions { dialogue, k } => {
                let s = self.bundle.scenario_for(dialogue)?;
                let asked: Vec<String> = dialogue.exchanges.iter().map(|e| norm(&e.question)).collect();
                let fresh = s
                    .questions
                    .iter()
                    .filter(|q| {
                        !asked.contains(&norm(&q.text))
                            && !q.plain.as_deref().is_some_and(|p| asked.contains(&norm(p)))
                    })
                    .take(*k)
                    .map(|q| format!("- {} || {}", q.text, q.rationale));
                Some(fenced(fresh))
            }
            RequestKey::Responses { question, .. } => {
                let (_, q) = self.bundle.find_question(question)?;
                Some(fenced(q.responses.iter().map(|r| format!("- {r}"))))
            }
            RequestKey::Likelihoods { question, responses, disease } => {
                let (_, q) = self.bundle.find_question(question)?;
                let row = q.likelihoods.get(disease);
                let values = responses.iter().enumerate().map(|(i, r)| {
                    let idx = q.responses.iter().position(|x| norm(x) == norm(r));
                    let v = match (row, idx) {
                        (Some(row), Some(idx)) => row[idx],
                        _ => NEUTRAL_LIKELIHOOD,
                    };
                    format!("r{}: {v}", i + 1)
                });
                Some(fenced(values))
            }
            RequestKey::Likelihood { response, disease } => {
                let r = norm(response);
                self.bundle.scenarios.iter().find_map(|s| {
                    s.questions.iter().find_map(|q| {
                        let idx = q.responses.iter().position(|x| norm(x) == r)?;
                        let v = q.likelihoods.get(disease)?[idx];
                        Some(fenced([format!("p: {v}")]))
                    })
                })
            }
            RequestKey::Humanize { question } => {
                let (_, q) = self.bundle.find_question(question)?;
                Some(q.plain.clone().unwrap_or_else(|| q.text.clone()))
            }
            RequestKey::Patient { profile, question, .. } => Some(self.patient(profile, question)),
        }
    }

    /// Prior weights times the evidence multipliers of every answered
    /// scenario question. The other weight is never rescaled.
    fn weights(&self, s: &Scenario, dialogue: &Dialogue, candidates: &[String]) -> String {
        let mut w: BTreeMap<&str, f64> =
            candidates.iter().map(|c| (c.as_str(), s.prior.get(c).copied().unwrap_or(0.0))).collect();
        for ex in dialogue.exchanges.iter().skip(1) {
            let Some(q) = s.questions.iter().find(|q| {
                norm(&q.text) == norm(&ex.question)
                    || q.plain.as_deref().is_some_and(|p| norm(p) == norm(&ex.question))
            }) else {
                continue;
            };
            let answer = norm(&ex.response);
            for ev in &q.evidence {
                if ev.answer_contains.iter().any(|p| answer.contains(&norm(p))) {
                    for (d, m) in &ev.weights {
                        if let Some(v) = w.get_mut(d.as_str()) {
                            *v *= m;
                        }
                    }
                }
            }
        }
        let lines = candidates
            .iter()
            .map(|c| format!("{c}: {}", w[c.as_str()]))
            .chain(std::iter::once(format!("other: {}", s.other)));
        fenced(lines)
    }

    /// Routes the question to a profile fact: by the scenario question's
    /// topic first, then by topic keywords, then the opening fallback.
    fn patient(&self, profile: &PatientProfile, question: &str) -> String {
        if let Some((_, q)) = self.bundle.find_question(question) {
            if let Some(answer) = q.topic.as_ref().and_then(|t| profile.facts.get(t)) {
                return answer.clone();
            }
        }
        let q = norm(question);
        if q == norm(OPENING_QUESTION) {
            return profile
                .facts
                .get("opening")
                .cloned()
                .unwrap_or_else(|| format!("I have been dealing with {}.", profile.symptoms.join(", ")));
        }
        let mut best: Option<(usize, &String)> = None;
        for (topic, answer) in &profile.facts {
            let mut words: Vec<String> = self.bundle.topics.get(topic).cloned().unwrap_or_default();
            words.push(topic.replace('_', " "));
            let hits = words.iter().filter(|w| contains_word(&q, &norm(w))).count();
            if hits > 0 && best.is_none_or(|(h, _)| hits > h) {
                best = Some((hits, answer));
            }
        }
        best.map_or_else(|| NOT_SURE.to_string(), |(_, answer)| answer.clone())
    }
}

/// Whole-word (prefix-anchored) match so "ear" does not hit "year".
fn contains_word(haystack: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    Regex::new(&format!(r"\b{}", regex::escape(word))).map(|re| re.is_match(haystack)).unwrap_or(false)
}

fn default_reply(key: &RequestKey) -> String {
    match key {
        RequestKey::Extract { dialogue } => dialogue.patient_text(),
        RequestKey::Distribution { candidates, .. } => fenced(
            candidates.iter().map(|c| format!("{c}: 1")).chain(std::iter::once("other: 0".to_string())),
        ),
        RequestKey::Questions { dialogue, k } => {
            let asked: Vec<String> = dialogue.exchanges.iter().map(|e| norm(&e.question)).collect();
            fenced(
                DEFAULT_QUESTIONS
                    .iter()
                    .filter(|(q, _)| !asked.contains(&norm(q)))
                    .take(*k)
                    .map(|(q, r)| format!("- {q} || {r}")),
            )
        }
        RequestKey::Responses { .. } => fenced(DEFAULT_RESPONSES.iter().map(|r| format!("- {r}"))),
        RequestKey::Likelihoods { responses, .. } => {
            fenced((1..=responses.len()).map(|i| format!("r{i}: {NEUTRAL_LIKELIHOOD}")))
        }
        RequestKey::Likelihood { .. } => fenced([format!("p: {NEUTRAL_LIKELIHOOD}")]),
        RequestKey::Humanize { question } => question.clone(),
        RequestKey::Patient { .. } => NOT_SURE.to_string(),
    }
}

impl Generator for ScriptedGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        if let Some(out) = self.fixture(request) {
            return Ok(out);
        }
        if let Some(out) = self.world(&request.key) {
            return Ok(out);
        }
        if self.strict {
            return Err(BackendError::ScriptedMiss { fingerprint: fingerprint(request.op, &request.key) });
        }
        Ok(default_reply(&request.key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, LlmBackend};
    use crate::kb::DiseaseEntry;
    use crate::prob::CandidateQuestion;

    fn bundle(json: &str) -> ScriptBundle {
        let mut b = ScriptBundle::default();
        b.add(serde_json::from_str(json).unwrap()).unwrap();
        b
    }

    fn backend(json: &str, strict: bool) -> LlmBackend<ScriptedGenerator> {
        LlmBackend::new(ScriptedGenerator::new(bundle(json), strict), 0.0)
    }

    fn disease(id: &str) -> DiseaseEntry {
        DiseaseEntry { id: id.into(), name: id.into(), context: "ctx".into(), specialty: String::new() }
    }

    fn q(text: &str) -> CandidateQuestion {
        CandidateQuestion { id: 0, text: text.into(), rationale: String::new() }
    }

    const SCENARIO: &str = r#"{
        "scenario": {
            "name": "dizzy",
            "triggers": ["dizzy"],
            "summary": "dizziness",
            "prior": {"a": 0.22, "b": 0.19},
            "other": 0.59,
            "questions": [
                {"text": "Q one?", "plain": "Plain one?", "topic": "spin",
                 "responses": ["spins", "light"],
                 "likelihoods": {"a": [0.1, 0.4]},
                 "evidence": [{"answer_contains": ["light"], "weights": {"a": 2.0}}]},
                {"text": "Q two?", "responses": ["yes", "no"]}
            ]
        },
        "topics": {"dairy": ["milk", "cheese"]}
    }"#;

    fn dialogue(pairs: &[(&str, &str)]) -> Dialogue {
        let mut d = Dialogue::default();
        for (q, r) in pairs {
            d.push(*q, *r);
        }
        d
    }

    #[test]
    fn scenario_prior_and_evidence() {
        let b = backend(SCENARIO, true);
        let cands = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let d = dialogue(&[(OPENING_QUESTION, "I feel dizzy")]);
        let r = b.elicit_distribution("g", &d, &cands).unwrap();
        assert_eq!(r.value.weights, vec![("a".into(), 0.22), ("b".into(), 0.19), ("c".into(), 0.0)]);
        assert_eq!(r.value.other, 0.59);
        let d = dialogue(&[(OPENING_QUESTION, "I feel dizzy"), ("Plain one?", "quite light really")]);
        let r = b.elicit_distribution("g", &d, &cands).unwrap();
        assert_eq!(r.value.weights[0], ("a".into(), 0.44));
    }

    #[test]
    fn questions_skip_asked_and_respect_k() {
        let b = backend(SCENARIO, true);
        let dist = crate::prob::DiseaseDistribution::uniform(&["a"], 0);
        let d = dialogue(&[(OPENING_QUESTION, "dizzy")]);
        let r = b.generate_questions("u", &d, &dist, 1).unwrap();
        assert_eq!(r.value.len(), 1);
        assert_eq!(r.value[0].text, "Q one?");
        let d = dialogue(&[(OPENING_QUESTION, "dizzy"), ("Plain one?", "x")]);
        let r = b.generate_questions("u", &d, &dist, 5).unwrap();
        assert_eq!(r.value.iter().map(|q| q.text.as_str()).collect::<Vec<_>>(), ["Q two?"]);
    }

    #[test]
    fn likelihoods_and_defaults() {
        let b = backend(SCENARIO, false);
        let resp = vec!["spins".to_string(), "light".to_string()];
        let r = b.elicit_likelihoods(&q("Q one?"), &resp, &disease("a")).unwrap();
        assert_eq!(r.value, vec![0.1, 0.4]);
        let r = b.elicit_likelihoods(&q("Q one?"), &resp, &disease("b")).unwrap();
        assert_eq!(r.value, vec![0.5, 0.5]);
        assert_eq!(b.elicit_likelihood("light", &disease("a")).unwrap().value, 0.4);
        let r = b.simulate_responses(&q("Unknown?"), &Dialogue::default(), 5).unwrap();
        assert_eq!(r.value, vec!["Yes", "No"]);
        assert_eq!(b.humanize_question("Q one?").unwrap().value, "Plain one?");
        assert_eq!(b.humanize_question("Other?").unwrap().value, "Other?");
    }

    #[test]
    fn strict_mode_misses() {
        let b = backend(SCENARIO, true);
        let err = b.humanize_question("Other?").unwrap_err();
        assert!(matches!(err, BackendError::ScriptedMiss { .. }), "{err}");
    }

    #[test]
    fn extract_fixture_and_identity() {
        let json = r#"{"fixtures": [{"op": "extract_symptoms",
            "dialogue_contains": "sneezing all day",
            "outputs": ["runny nose; sneezing; itchy eyes"]}]}"#;
        let b = backend(json, false);
        let d = dialogue(&[(OPENING_QUESTION, "Sneezing all day and my nose runs")]);
        assert_eq!(b.extract_symptom_text(&d).unwrap().value, "runny nose; sneezing; itchy eyes");
        let d = dialogue(&[(OPENING_QUESTION, "headache, nausea")]);
        assert_eq!(b.extract_symptom_text(&d).unwrap().value, "headache, nausea");
    }

    #[test]
    fn fixture_outputs_follow_attempts() {
        let json = r#"{"fixtures": [
            {"op": "elicit_likelihood", "key": {"disease": "x"}, "outputs": ["no idea", "```\np: 0.3\n```"]},
            {"op": "elicit_likelihood", "key": {"disease": "y"}, "outputs": ["1.3"]}
        ]}"#;
        let b = backend(json, true);
        let r = b.elicit_likelihood("anything", &disease("x")).unwrap();
        assert_eq!((r.value, r.repaired, r.attempt_count), (0.3, false, 2));
        let r = b.elicit_likelihood("anything", &disease("y")).unwrap();
        assert_eq!((r.value, r.repaired), (1.0, true));
    }

    #[test]
    fn patient_answers_from_facts() {
        let b = backend(SCENARIO, true);
        let mut p = PatientProfile::minimal("c", "a");
        p.facts.insert("dairy".into(), "yes, milk every night".into());
        p.facts.insert("spin".into(), "it feels light".into());
        let d = Dialogue::default();
        assert_eq!(
            b.respond_as_patient(&p, "Do you drink milk?", &d).unwrap().value,
            "yes, milk every night"
        );
        assert_eq!(b.respond_as_patient(&p, "Plain one?", &d).unwrap().value, "it feels light");
        assert_eq!(b.respond_as_patient(&p, "Any rash on your arms?", &d).unwrap().value, NOT_SURE);
        p.symptoms = vec!["dizziness".into()];
        assert_eq!(
            b.respond_as_patient(&p, OPENING_QUESTION, &d).unwrap().value,
            "I have been dealing with dizziness."
        );
    }

    #[test]
    fn word_prefix_matching() {
        assert!(contains_word("do you drink milk?", "milk"));
        assert!(!contains_word("how old in years", "ear"));
    }

    #[test]
    fn invalid_scenario_rejected() {
        let json = r#"{"scenario": {"name": "x", "triggers": ["x"], "prior": {},
            "questions": [{"text": "q", "responses": ["a", "b"], "likelihoods": {"d": [0.1]}}]}}"#;
        let mut b = ScriptBundle::default();
        let err = b.add(serde_json::from_str(json).unwrap()).unwrap_err();
        assert!(err.contains("expected 2"), "{err}");
    }
}
