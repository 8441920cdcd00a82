//! Generator boundary.
//!
//! Every step that needs free-text generation is a method of [`Backend`].
//! [`LlmBackend`] implements it on top of any [`Generator`] (a function from
//! chat messages to raw text): it renders the prompt assets, parses the
//! structured reply, reprompts once with a stricter format instruction and
//! finally falls back to tolerant repair. Two generators ship: the
//! deterministic [`scripted::ScriptedGenerator`] and the HTTP
//! [`remote::RemoteGenerator`].

pub mod parse;
pub mod prompt;
pub mod remote;
pub mod scripted;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::DiseaseEntry;
use crate::prob::{CandidateQuestion, DiseaseDistribution, MAX_RESPONSES};
use crate::sim::PatientProfile;

use self::parse::ParseResult;
use self::prompt::PromptAsset;

pub const DEFAULT_API_KEY_ENV: &str = "PATIENCE_API_KEY";
pub const NOT_SURE: &str = "I'm not sure";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("{op}: empty generation")]
    EmptyGeneration { op: Operation },
    #[error("{op}: unparseable reply ({reason})")]
    Unparseable { op: Operation, reason: String, raw: String },
    #[error("scripted backend has no entry for {fingerprint}")]
    ScriptedMiss { fingerprint: String },
    #[error("question generation produced an empty pool")]
    EmptyPool,
    #[error("question `{question}` produced {count} distinct response(s), need at least 2")]
    TooFewResponses { question: String, count: usize },
    #[error("elicited disease weights are all zero")]
    AllZero,
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("script bundle: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    ExtractSymptoms,
    ElicitDistribution,
    GenerateQuestions,
    SimulateResponses,
    ElicitLikelihoods,
    ElicitLikelihood,
    HumanizeQuestion,
    RespondAsPatient,
}

impl std::fmt::Display for Operation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub question: String,
    pub response: String,
}

/// Ordered question/answer pairs; the first pair is the opening exchange.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub exchanges: Vec<Exchange>,
}

impl Dialogue {
    pub fn push(&mut self, question: impl Into<String>, response: impl Into<String>) {
        self.exchanges.push(Exchange { question: question.into(), response: response.into() });
    }

    pub fn opening_statement(&self) -> Option<&str> {
        self.exchanges.first().map(|e| e.response.as_str())
    }

    /// Everything the patient said, joined with `; `.
    pub fn patient_text(&self) -> String {
        self.exchanges.iter().map(|e| e.response.trim()).collect::<Vec<_>>().join("; ")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.exchanges {
            out.push_str("Doctor: ");
            out.push_str(&e.question);
            out.push_str("\nPatient: ");
            out.push_str(&e.response);
            out.push('\n');
        }
        out
    }
}

/// Generator output plus its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elicited<T> {
    pub value: T,
    /// Verbatim text of the last generation.
    pub raw_text: String,
    /// The value came from tolerant repair after strict parsing failed.
    pub repaired: bool,
    pub attempt_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawWeights {
    pub weights: Vec<(String, f64)>,
    pub other: f64,
}

pub type BackendResult<T> = Result<Elicited<T>, BackendError>;

pub trait Backend: Send + Sync {
    fn extract_symptom_text(&self, dialogue: &Dialogue) -> BackendResult<String>;

    fn elicit_distribution(
        &self,
        gamma_text: &str,
        dialogue: &Dialogue,
        candidate_ids: &[String],
    ) -> BackendResult<RawWeights>;

    fn generate_questions(
        &self,
        upsilon_text: &str,
        dialogue: &Dialogue,
        dist: &DiseaseDistribution,
        k: usize,
    ) -> BackendResult<Vec<CandidateQuestion>>;

    fn simulate_responses(
        &self,
        question: &CandidateQuestion,
        dialogue: &Dialogue,
        l_max: usize,
    ) -> BackendResult<Vec<String>>;

    /// All response likelihoods for one (question, disease) pair in one call.
    fn elicit_likelihoods(
        &self,
        question: &CandidateQuestion,
        responses: &[String],
        disease: &DiseaseEntry,
    ) -> BackendResult<Vec<f64>>;

    fn elicit_likelihood(&self, response: &str, disease: &DiseaseEntry) -> BackendResult<f64>;

    fn humanize_question(&self, question: &str) -> BackendResult<String>;

    fn respond_as_patient(
        &self,
        profile: &PatientProfile,
        question: &str,
        dialogue: &Dialogue,
    ) -> BackendResult<String>;
}

#[derive(Debug, Clone, Serialize)]
pub struct ChatMessage {
    pub role: &'static str,
    pub content: String,
}

/// Inputs that identify a request independently of prompt wording.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKey {
    Extract { dialogue: Dialogue },
    Distribution { dialogue: Dialogue, candidates: Vec<String> },
    Questions { dialogue: Dialogue, k: usize },
    Responses { question: String, dialogue: Dialogue, l_max: usize },
    Likelihoods { question: String, responses: Vec<String>, disease: String },
    Likelihood { response: String, disease: String },
    Humanize { question: String },
    Patient { profile: PatientProfile, question: String, dialogue: Dialogue },
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub op: Operation,
    pub key: RequestKey,
    pub messages: Vec<ChatMessage>,
    /// 1-based.
    pub attempt: usize,
    pub temperature: f64,
}

/// Turns chat messages into raw text.
pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Scripted,
    Remote,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "remote" => Ok(Self::Remote),
            other => Err(format!("unknown backend `{other}` (expected scripted|remote)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    /// Sampling temperature for the simulated patient. Every other
    /// operation runs at temperature 0.
    pub temperature: f64,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub seed: u64,
    pub script_bundle: Option<PathBuf>,
    /// Scripted only: fail on requests the bundle does not cover instead of
    /// using built-in defaults.
    pub strict: bool,
    pub api_key_env: String,
    pub max_concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: "scripted".to_string(),
            temperature: 0.0,
            timeout_ms: 60_000,
            max_retries: 2,
            seed: 0,
            script_bundle: None,
            strict: false,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_concurrency: 8,
        }
    }
}

impl BackendConfig {
    pub fn scripted(bundle: impl Into<PathBuf>) -> Self {
        Self { script_bundle: Some(bundle.into()), ..Self::default() }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        match self.kind {
            BackendKind::Remote if self.endpoint.as_deref().unwrap_or("").is_empty() => {
                Err(BackendError::Config("remote backend requires an endpoint".into()))
            }
            BackendKind::Scripted if self.script_bundle.is_none() => {
                Err(BackendError::Config("scripted backend requires a script bundle path".into()))
            }
            _ if self.max_concurrency == 0 => {
                Err(BackendError::Config("max_concurrency must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Builds the configured backend.
pub fn connect(config: &BackendConfig) -> Result<Arc<dyn Backend>, BackendError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Scripted => {
            let bundle = scripted::ScriptBundle::load(config.script_bundle.as_ref().expect("validated"))?;
            Arc::new(LlmBackend::new(
                scripted::ScriptedGenerator::new(bundle, config.strict),
                config.temperature,
            ))
        }
        BackendKind::Remote => {
            Arc::new(LlmBackend::new(remote::RemoteGenerator::from_config(config)?, config.temperature))
        }
    })
}

/// Prompting, parsing and repair on top of a raw generator.
pub struct LlmBackend<G> {
    generator: G,
    patient_temperature: f64,
}

const WEIGHTS_FORMAT: &str = "```\n<candidate_id>: <number>\n...\nother: <number>\n```";
const LIKELIHOODS_FORMAT: &str = "```\nr1: <number between 0 and 1>\nr2: <number between 0 and 1>\n...\n```";
const LIKELIHOOD_FORMAT: &str = "```\np: <number between 0 and 1>\n```";
const QUESTIONS_FORMAT: &str = "```\n- <question> || <what it distinguishes>\n```";
const RESPONSES_FORMAT: &str = "```\n- <answer>\n- <answer>\n```";
const TEXT_FORMAT: &str = "<plain text on a single line>";

impl<G: Generator> LlmBackend<G> {
    pub fn new(generator: G, patient_temperature: f64) -> Self {
        Self { generator, patient_temperature }
    }

    pub fn generator(&self) -> &G {
        &self.generator
    }

    #[allow(clippy::too_many_arguments)]
    fn run<T>(
        &self,
        op: Operation,
        key: RequestKey,
        system: Option<&PromptAsset>,
        prompt: String,
        format: &str,
        temperature: f64,
        strict: impl Fn(&str) -> ParseResult<T>,
        repair: impl Fn(&str) -> ParseResult<T>,
    ) -> Result<Elicited<T>, (BackendError, Option<String>)> {
        let mut messages: Vec<ChatMessage> = system
            .map(|s| ChatMessage { role: "system", content: s.template.trim().to_string() })
            .into_iter()
            .collect();
        messages.push(ChatMessage { role: "user", content: prompt });
        let mut request = GenerationRequest { op, key, messages: messages.clone(), attempt: 1, temperature };
        let first = self.generator.generate(&request).map_err(|e| (e, None))?;
        if let Ok(value) = strict(&first) {
            return Ok(Elicited { value, raw_text: first, repaired: false, attempt_count: 1 });
        }
        messages.push(ChatMessage { role: "assistant", content: first });
        messages
            .push(ChatMessage { role: "user", content: prompt::STRICT_FORMAT.render(&[("format", format)]) });
        request.messages = messages;
        request.attempt = 2;
        let second = self.generator.generate(&request).map_err(|e| (e, None))?;
        if let Ok(value) = strict(&second) {
            return Ok(Elicited { value, raw_text: second, repaired: false, attempt_count: 2 });
        }
        match repair(&second) {
            Ok(value) => Ok(Elicited { value, raw_text: second, repaired: true, attempt_count: 2 }),
            Err(reason) => Err((BackendError::Unparseable { op, reason, raw: second.clone() }, Some(second))),
        }
    }

    fn run_text(
        &self,
        op: Operation,
        key: RequestKey,
        prompt: String,
        temperature: f64,
    ) -> BackendResult<String> {
        self.run(
            op,
            key,
            Some(&prompt::SYSTEM),
            prompt,
            TEXT_FORMAT,
            temperature,
            parse::plain_text,
            parse::plain_text,
        )
        .map_err(|(e, _)| match e {
            BackendError::Unparseable { op, .. } => BackendError::EmptyGeneration { op },
            other => other,
        })
    }
}

fn render_distribution(dist: &DiseaseDistribution) -> String {
    let mut out: Vec<String> = dist.entries().iter().map(|e| format!("{}: {:.3}", e.id, e.p)).collect();
    out.push(format!("other: {:.3}", dist.other_mass()));
    out.join("\n")
}

impl<G: Generator> Backend for LlmBackend<G> {
    fn extract_symptom_text(&self, dialogue: &Dialogue) -> BackendResult<String> {
        let rendered = dialogue.render();
        self.run_text(
            Operation::ExtractSymptoms,
            RequestKey::Extract { dialogue: dialogue.clone() },
            prompt::EXTRACT_SYMPTOMS.render(&[("dialogue", &rendered)]),
            0.0,
        )
    }

    fn elicit_distribution(
        &self,
        gamma_text: &str,
        dialogue: &Dialogue,
        candidate_ids: &[String],
    ) -> BackendResult<RawWeights> {
        let rendered = dialogue.render();
        let candidates = candidate_ids.join("\n");
        let prompt = prompt::ELICIT_DISTRIBUTION.render(&[
            ("gamma", gamma_text),
            ("dialogue", &rendered),
            ("candidates", &candidates),
        ]);
        let nonzero = |(w, o): (Vec<(String, f64)>, f64)| {
            if w.iter().all(|(_, v)| *v == 0.0) && o == 0.0 {
                Err("all weights are zero".to_string())
            } else {
                Ok(RawWeights { weights: w, other: o })
            }
        };
        self.run(
            Operation::ElicitDistribution,
            RequestKey::Distribution { dialogue: dialogue.clone(), candidates: candidate_ids.to_vec() },
            Some(&prompt::SYSTEM),
            prompt,
            WEIGHTS_FORMAT,
            0.0,
            |t| parse::strict_weights(t, candidate_ids).and_then(nonzero),
            |t| parse::repair_weights(t, candidate_ids).and_then(nonzero),
        )
        .map_err(|(e, raw)| match (e, raw) {
            (BackendError::Unparseable { reason, .. }, Some(_))
                if reason.contains("all weights are zero") =>
            {
                BackendError::AllZero
            }
            (e, _) => e,
        })
    }

    fn generate_questions(
        &self,
        upsilon_text: &str,
        dialogue: &Dialogue,
        dist: &DiseaseDistribution,
        k: usize,
    ) -> BackendResult<Vec<CandidateQuestion>> {
        let rendered = dialogue.render();
        let k_text = k.to_string();
        let dist_text = render_distribution(dist);
        let prompt = prompt::GENERATE_QUESTIONS.render(&[
            ("upsilon", upsilon_text),
            ("dialogue", &rendered),
            ("distribution", &dist_text),
            ("k", &k_text),
        ]);
        let result = self
            .run(
                Operation::GenerateQuestions,
                RequestKey::Questions { dialogue: dialogue.clone(), k },
                Some(&prompt::SYSTEM),
                prompt,
                QUESTIONS_FORMAT,
                0.0,
                parse::strict_questions,
                parse::repair_questions,
            )
            .map_err(|(e, _)| match e {
                BackendError::Unparseable { .. } => BackendError::EmptyPool,
                other => other,
            })?;
        let questions: Vec<CandidateQuestion> = result
            .value
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(id, (text, rationale))| CandidateQuestion { id, text, rationale })
            .collect();
        if questions.is_empty() {
            return Err(BackendError::EmptyPool);
        }
        Ok(Elicited {
            value: questions,
            raw_text: result.raw_text,
            repaired: result.repaired,
            attempt_count: result.attempt_count,
        })
    }

    fn simulate_responses(
        &self,
        question: &CandidateQuestion,
        dialogue: &Dialogue,
        l_max: usize,
    ) -> BackendResult<Vec<String>> {
        let l_max = l_max.clamp(2, MAX_RESPONSES);
        let rendered = dialogue.render();
        let l_text = l_max.to_string();
        let prompt = prompt::SIMULATE_RESPONSES.render(&[
            ("question", &question.text),
            ("dialogue", &rendered),
            ("l_max", &l_text),
        ]);
        let at_least_two = |v: Vec<String>| {
            if v.len() >= 2 {
                Ok(v)
            } else {
                Err(format!("{} distinct response(s)", v.len()))
            }
        };
        let mut result = self
            .run(
                Operation::SimulateResponses,
                RequestKey::Responses { question: question.text.clone(), dialogue: dialogue.clone(), l_max },
                Some(&prompt::SYSTEM),
                prompt,
                RESPONSES_FORMAT,
                0.0,
                |t| parse::strict_responses(t).and_then(at_least_two),
                |t| parse::repair_responses(t).and_then(at_least_two),
            )
            .map_err(|(e, raw)| match e {
                BackendError::Unparseable { .. } => BackendError::TooFewResponses {
                    question: question.text.clone(),
                    count: raw.and_then(|r| parse::repair_responses(&r).ok()).map_or(0, |v| v.len()),
                },
                other => other,
            })?;
        result.value.truncate(l_max);
        Ok(result)
    }

    fn elicit_likelihoods(
        &self,
        question: &CandidateQuestion,
        responses: &[String],
        disease: &DiseaseEntry,
    ) -> BackendResult<Vec<f64>> {
        let listed: String =
            responses.iter().enumerate().map(|(i, r)| format!("r{}: {r}\n", i + 1)).collect();
        let prompt = prompt::ELICIT_LIKELIHOODS.render(&[
            ("disease", &disease.name),
            ("disease_context", &disease.context),
            ("question", &question.text),
            ("responses", listed.trim_end()),
        ]);
        let n = responses.len();
        self.run(
            Operation::ElicitLikelihoods,
            RequestKey::Likelihoods {
                question: question.text.clone(),
                responses: responses.to_vec(),
                disease: disease.id.clone(),
            },
            Some(&prompt::SYSTEM),
            prompt,
            LIKELIHOODS_FORMAT,
            0.0,
            |t| parse::strict_likelihoods(t, n),
            |t| parse::repair_likelihoods(t, n),
        )
        .map_err(|(e, _)| e)
    }

    fn elicit_likelihood(&self, response: &str, disease: &DiseaseEntry) -> BackendResult<f64> {
        let prompt = prompt::ELICIT_LIKELIHOOD.render(&[
            ("disease", &disease.name),
            ("disease_context", &disease.context),
            ("response", response),
        ]);
        self.run(
            Operation::ElicitLikelihood,
            RequestKey::Likelihood { response: response.to_string(), disease: disease.id.clone() },
            Some(&prompt::SYSTEM),
            prompt,
            LIKELIHOOD_FORMAT,
            0.0,
            parse::strict_likelihood,
            parse::repair_likelihood,
        )
        .map_err(|(e, _)| e)
    }

    fn humanize_question(&self, question: &str) -> BackendResult<String> {
        self.run_text(
            Operation::HumanizeQuestion,
            RequestKey::Humanize { question: question.to_string() },
            prompt::HUMANIZE_QUESTION.render(&[("question", question)]),
            0.0,
        )
    }

    fn respond_as_patient(
        &self,
        profile: &PatientProfile,
        question: &str,
        dialogue: &Dialogue,
    ) -> BackendResult<String> {
        let facts: String = profile.facts.iter().map(|(k, v)| format!("- {k}: {v}\n")).collect();
        let age = profile.age.to_string();
        let symptoms = profile.symptoms.join(", ");
        let rendered = dialogue.render();
        let prompt = prompt::PATIENT_PERSONA.render(&[
            ("age", &age),
            ("symptoms", &symptoms),
            ("intention", &profile.intention),
            ("personality", &profile.personality),
            ("facts", facts.trim_end()),
            ("dialogue", &rendered),
            ("question", question),
        ]);
        let key = RequestKey::Patient {
            profile: profile.clone(),
            question: question.to_string(),
            dialogue: dialogue.clone(),
        };
        // the persona prompt carries its own role; no assistant system message
        self.run(
            Operation::RespondAsPatient,
            key,
            None,
            prompt,
            TEXT_FORMAT,
            self.patient_temperature,
            parse::plain_text,
            parse::plain_text,
        )
        .map_err(|(e, _)| match e {
            BackendError::Unparseable { op, .. } => BackendError::EmptyGeneration { op },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replays canned outputs in order and records the requests it saw.
    struct Canned {
        outputs: Mutex<Vec<String>>,
        seen: Mutex<Vec<(Operation, usize, f64)>>,
    }

    impl Canned {
        fn new(outputs: &[&str]) -> Self {
            Self {
                outputs: Mutex::new(outputs.iter().rev().map(|s| s.to_string()).collect()),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Generator for Canned {
        fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
            self.seen.lock().unwrap().push((request.op, request.attempt, request.temperature));
            self.outputs
                .lock()
                .unwrap()
                .pop()
                .ok_or(BackendError::Unavailable { attempts: 1, last_error: "drained".into() })
        }
    }

    fn disease() -> DiseaseEntry {
        DiseaseEntry {
            id: "vertigo".into(),
            name: "Vertigo".into(),
            context: "spinning".into(),
            specialty: "neurology".into(),
        }
    }

    fn question() -> CandidateQuestion {
        CandidateQuestion { id: 0, text: "What does it feel like?".into(), rationale: String::new() }
    }

    #[test]
    fn reprompt_then_valid_is_not_repaired() {
        let b = LlmBackend::new(Canned::new(&["garbage", "```\na: 0.5\nother: 0.5\n```"]), 0.0);
        let r = b.elicit_distribution("g", &Dialogue::default(), &["a".to_string()]).unwrap();
        assert!(!r.repaired);
        assert_eq!(r.attempt_count, 2);
        assert_eq!(r.value.weights, vec![("a".to_string(), 0.5)]);
    }

    #[test]
    fn repair_after_failed_reprompt() {
        let b = LlmBackend::new(Canned::new(&["a is 0.7", "a = 0.7 and other 0.3"]), 0.0);
        let r = b.elicit_distribution("g", &Dialogue::default(), &["a".to_string()]).unwrap();
        assert!(r.repaired);
        assert_eq!(r.raw_text, "a = 0.7 and other 0.3");
        assert_eq!(r.value.other, 0.3);
    }

    #[test]
    fn all_zero_weights_error() {
        let b = LlmBackend::new(Canned::new(&["```\na: 0\nother: 0\n```", "```\na: 0\nother: 0\n```"]), 0.0);
        let err = b.elicit_distribution("g", &Dialogue::default(), &["a".to_string()]).unwrap_err();
        assert!(matches!(err, BackendError::AllZero), "{err}");
    }

    #[test]
    fn out_of_range_likelihood_is_clamped() {
        let b = LlmBackend::new(Canned::new(&["1.3", "1.3"]), 0.0);
        let r = b.elicit_likelihood("I feel light-headed", &disease()).unwrap();
        assert_eq!(r.value, 1.0);
        assert!(r.repaired);
    }

    #[test]
    fn responses_truncate_to_l_max() {
        let seven = "```\n- a\n- b\n- c\n- d\n- e\n- f\n- g\n```";
        let b = LlmBackend::new(Canned::new(&[seven]), 0.0);
        let r = b.simulate_responses(&question(), &Dialogue::default(), 5).unwrap();
        assert_eq!(r.value, vec!["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn single_response_is_an_error() {
        let b = LlmBackend::new(Canned::new(&["```\n- yes\n```", "- yes\n- yes"]), 0.0);
        let err = b.simulate_responses(&question(), &Dialogue::default(), 5).unwrap_err();
        assert!(matches!(err, BackendError::TooFewResponses { count: 1, .. }), "{err}");
    }

    #[test]
    fn duplicate_questions_shrink_pool() {
        let text = "```\n- Any fever? || a\n- any fever? || b\n- Itchy eyes? || c\n```";
        let b = LlmBackend::new(Canned::new(&[text]), 0.0);
        let dist = DiseaseDistribution::uniform(&["a"], 0);
        let r = b.generate_questions("u", &Dialogue::default(), &dist, 5).unwrap();
        assert_eq!(r.value.len(), 2);
        assert_eq!(r.value[1].id, 1);
        assert_eq!(r.value[1].text, "Itchy eyes?");
    }

    #[test]
    fn empty_question_pool_errors() {
        let b = LlmBackend::new(Canned::new(&["```\n```", "nothing"]), 0.0);
        let dist = DiseaseDistribution::uniform(&["a"], 0);
        let err = b.generate_questions("u", &Dialogue::default(), &dist, 5).unwrap_err();
        assert!(matches!(err, BackendError::EmptyPool));
    }

    #[test]
    fn empty_text_after_retry_errors() {
        let b = LlmBackend::new(Canned::new(&["", "  "]), 0.0);
        let err = b.extract_symptom_text(&Dialogue::default()).unwrap_err();
        assert!(matches!(err, BackendError::EmptyGeneration { op: Operation::ExtractSymptoms }));
    }

    #[test]
    fn only_patient_uses_configured_temperature() {
        let b = LlmBackend::new(Canned::new(&["runny nose", "fine thanks"]), 0.8);
        b.extract_symptom_text(&Dialogue::default()).unwrap();
        let profile = PatientProfile::minimal("c1", "allergic_rhinitis");
        b.respond_as_patient(&profile, "How are you?", &Dialogue::default()).unwrap();
        let seen = b.generator().seen.lock().unwrap().clone();
        assert_eq!(seen[0].2, 0.0);
        assert_eq!(seen[1], (Operation::RespondAsPatient, 1, 0.8));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_err());
        assert!(BackendConfig::scripted("x").validate().is_ok());
        let remote = BackendConfig { kind: BackendKind::Remote, ..BackendConfig::default() };
        assert!(remote.validate().is_err());
        let remote = BackendConfig { endpoint: Some("http://localhost:1".into()), ..remote };
        assert!(remote.validate().is_ok());
    }

    #[test]
    fn operation_display() {
        assert_eq!(Operation::ElicitLikelihoods.to_string(), "elicit_likelihoods");
    }
}
