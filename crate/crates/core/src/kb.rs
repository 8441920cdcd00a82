//! Guideline knowledge base: symptom and disease records, line-delimited
//! ingestion, and lexical symptom retrieval.
//!
//! Symptoms are stored in two registers (professional and consumer names)
//! and carry two context passages: the causes / pathophysiology text used
//! when eliciting disease probabilities, and the diagnosis-procedure text
//! used when generating follow-up questions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot read knowledge base {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no records in knowledge base {0}")]
    NoRecords(String),
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate {kind} id `{id}`")]
    DuplicateId { line: usize, kind: &'static str, id: String },
    #[error("symptom `{symptom}` links unknown disease `{disease}`")]
    DanglingReference { symptom: String, disease: String },
    #[error("dialogue text is empty")]
    EmptyQuery,
    #[error("knowledge base has no symptoms")]
    NoSymptoms,
    #[error("top_n must be at least 1")]
    InvalidTopN,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymptomEntry {
    pub id: String,
    pub name_prof: String,
    pub name_cons: String,
    pub description: String,
    pub context_gamma: String,
    pub context_upsilon: String,
    pub linked_diseases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseEntry {
    pub id: String,
    pub name: String,
    pub context: String,
    #[serde(default)]
    pub specialty: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbMeta {
    pub source: String,
    pub version: String,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Symptom(SymptomEntry),
    Disease(DiseaseEntry),
    Meta(KbMeta),
}

/// Immutable after ingestion; share freely across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    symptoms: BTreeMap<String, SymptomEntry>,
    diseases: BTreeMap<String, DiseaseEntry>,
    meta: KbMeta,
}

/// Context gathered for a set of mapped symptoms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatheredContext {
    pub gamma_text: String,
    pub upsilon_text: String,
    pub candidate_disease_ids: Vec<String>,
}

const RECORD_SEPARATOR: &str = "\n\n";

impl KnowledgeBase {
    /// Reads a line-delimited record file. Lines starting with `#` and blank
    /// lines are skipped.
    pub fn ingest(path: impl AsRef<Path>) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
        let default_source =
            path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "kb".to_string());
        Self::parse(&text, &default_source)
    }

    pub fn parse(text: &str, default_source: &str) -> Result<Self, KbError> {
        let mut symptoms = BTreeMap::new();
        let mut diseases = BTreeMap::new();
        let mut meta = None;
        let mut symptom_lines = HashMap::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let record: Record = serde_json::from_str(trimmed)
                .map_err(|e| KbError::Malformed { line, reason: e.to_string() })?;
            match record {
                Record::Symptom(s) => {
                    validate_symptom(&s).map_err(|reason| KbError::Malformed { line, reason })?;
                    if symptoms.contains_key(&s.id) {
                        return Err(KbError::DuplicateId { line, kind: "symptom", id: s.id });
                    }
                    symptom_lines.insert(s.id.clone(), line);
                    symptoms.insert(s.id.clone(), s);
                }
                Record::Disease(d) => {
                    if d.id.trim().is_empty() {
                        return Err(KbError::Malformed { line, reason: "disease id is empty".into() });
                    }
                    if d.context.trim().is_empty() {
                        return Err(KbError::Malformed {
                            line,
                            reason: format!("disease `{}` has empty context", d.id),
                        });
                    }
                    if diseases.contains_key(&d.id) {
                        return Err(KbError::DuplicateId { line, kind: "disease", id: d.id });
                    }
                    diseases.insert(d.id.clone(), d);
                }
                Record::Meta(m) => meta = Some(m),
            }
        }

        if symptoms.is_empty() && diseases.is_empty() {
            return Err(KbError::NoRecords(default_source.to_string()));
        }
        for s in symptoms.values() {
            if let Some(missing) = s.linked_diseases.iter().find(|d| !diseases.contains_key(*d)) {
                return Err(KbError::DanglingReference { symptom: s.id.clone(), disease: missing.clone() });
            }
        }

        Ok(Self {
            symptoms,
            diseases,
            meta: meta.unwrap_or_else(|| KbMeta {
                source: default_source.to_string(),
                version: "unversioned".to_string(),
            }),
        })
    }

    pub fn meta(&self) -> &KbMeta {
        &self.meta
    }

    pub fn symptoms(&self) -> impl Iterator<Item = &SymptomEntry> {
        self.symptoms.values()
    }

    pub fn diseases(&self) -> impl Iterator<Item = &DiseaseEntry> {
        self.diseases.values()
    }

    pub fn symptom(&self, id: &str) -> Option<&SymptomEntry> {
        self.symptoms.get(id)
    }

    pub fn disease(&self, id: &str) -> Option<&DiseaseEntry> {
        self.diseases.get(id)
    }

    pub fn symptom_count(&self) -> usize {
        self.symptoms.len()
    }

    pub fn disease_count(&self) -> usize {
        self.diseases.len()
    }

    /// Ranks symptoms against free dialogue text with the default lexical
    /// scorer. Only symptoms with a positive score are returned.
    pub fn map_to_symptoms(
        &self,
        dialogue_text: &str,
        top_n: usize,
    ) -> Result<Vec<(&SymptomEntry, f64)>, KbError> {
        self.map_with(&Bm25Scorer::default(), dialogue_text, top_n)
    }

    pub fn map_with<S: SymptomScorer + ?Sized>(
        &self,
        scorer: &S,
        dialogue_text: &str,
        top_n: usize,
    ) -> Result<Vec<(&SymptomEntry, f64)>, KbError> {
        if top_n == 0 {
            return Err(KbError::InvalidTopN);
        }
        if dialogue_text.trim().is_empty() {
            return Err(KbError::EmptyQuery);
        }
        if self.symptoms.is_empty() {
            return Err(KbError::NoSymptoms);
        }
        let entries: Vec<&SymptomEntry> = self.symptoms.values().collect();
        let scores = scorer.score(&entries, dialogue_text);
        let mut ranked: Vec<(&SymptomEntry, f64)> =
            entries.into_iter().zip(scores).filter(|(_, s)| *s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        ranked.truncate(top_n);
        Ok(ranked)
    }

    /// Concatenates context passages of the given symptoms in input order and
    /// collects their linked diseases (first-seen order, deduplicated).
    pub fn gather_context(&self, symptoms: &[&SymptomEntry]) -> GatheredContext {
        let mut gamma = Vec::with_capacity(symptoms.len());
        let mut upsilon = Vec::with_capacity(symptoms.len());
        let mut seen = HashSet::new();
        let mut ids = Vec::new();
        for s in symptoms {
            gamma.push(format!("{}{}", record_header(s), s.context_gamma));
            upsilon.push(format!("{}{}", record_header(s), s.context_upsilon));
            for d in &s.linked_diseases {
                if seen.insert(d.as_str()) {
                    ids.push(d.clone());
                }
            }
        }
        GatheredContext {
            gamma_text: gamma.join(RECORD_SEPARATOR),
            upsilon_text: upsilon.join(RECORD_SEPARATOR),
            candidate_disease_ids: ids,
        }
    }

    /// Context for every symptom, with all disease ids as candidates. Used
    /// when nothing in the dialogue maps onto a symptom.
    pub fn gather_all(&self) -> GatheredContext {
        let all: Vec<&SymptomEntry> = self.symptoms.values().collect();
        let mut ctx = self.gather_context(&all);
        ctx.candidate_disease_ids = self.diseases.keys().cloned().collect();
        ctx
    }
}

/// Header placed before each gathered passage so prompts can cite the entry.
pub fn record_header(s: &SymptomEntry) -> String {
    format!("### {} ({})\n", s.id, s.name_prof)
}

fn validate_symptom(s: &SymptomEntry) -> Result<(), String> {
    if s.id.trim().is_empty() {
        return Err("symptom id is empty".into());
    }
    if s.context_gamma.trim().is_empty() {
        return Err(format!("symptom `{}` has empty context_gamma", s.id));
    }
    if s.context_upsilon.trim().is_empty() {
        return Err(format!("symptom `{}` has empty context_upsilon", s.id));
    }
    Ok(())
}

/// Pluggable relevance scorer. Implementations return one non-negative
/// score per entry, aligned with `entries`.
pub trait SymptomScorer: Send + Sync {
    fn score(&self, entries: &[&SymptomEntry], query: &str) -> Vec<f64>;
}

/// Scorer backed by an external embedding function; cosine similarity
/// clamped at zero, best of the two registers.
pub struct EmbeddingScorer<F> {
    embed: F,
}

impl<F> EmbeddingScorer<F>
where
    F: Fn(&str) -> Vec<f32> + Send + Sync,
{
    pub fn new(embed: F) -> Self {
        Self { embed }
    }
}

impl<F> SymptomScorer for EmbeddingScorer<F>
where
    F: Fn(&str) -> Vec<f32> + Send + Sync,
{
    fn score(&self, entries: &[&SymptomEntry], query: &str) -> Vec<f64> {
        let q = (self.embed)(query);
        entries
            .iter()
            .map(|e| {
                let prof = (self.embed)(&format!("{} {}", e.name_prof, e.description));
                let cons = (self.embed)(&format!("{} {}", e.name_cons, e.description));
                cosine(&q, &prof).max(cosine(&q, &cons)).max(0.0)
            })
            .collect()
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += f64::from(*x) * f64::from(*y);
        na += f64::from(*x) * f64::from(*x);
        nb += f64::from(*y) * f64::from(*y);
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Okapi BM25 over both registers of every symptom. Each symptom contributes
/// two documents (professional name + description, consumer name +
/// description); its score is the larger of the two.
#[derive(Debug, Clone, Copy)]
pub struct Bm25Scorer {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Scorer {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl SymptomScorer for Bm25Scorer {
    fn score(&self, entries: &[&SymptomEntry], query: &str) -> Vec<f64> {
        let docs: Vec<Vec<String>> = entries
            .iter()
            .flat_map(|e| {
                [
                    tokenize(&format!("{} {}", e.name_prof, e.description)),
                    tokenize(&format!("{} {}", e.name_cons, e.description)),
                ]
            })
            .collect();
        if docs.is_empty() {
            return Vec::new();
        }
        let n_docs = docs.len() as f64;
        let avg_len = docs.iter().map(Vec::len).sum::<usize>() as f64 / n_docs;
        let mut doc_freq: HashMap<&str, usize> = HashMap::new();
        for d in &docs {
            let uniq: HashSet<&str> = d.iter().map(String::as_str).collect();
            for t in uniq {
                *doc_freq.entry(t).or_default() += 1;
            }
        }
        let query_tokens = tokenize(query);
        let doc_scores: Vec<f64> = docs
            .iter()
            .map(|d| {
                let len = d.len() as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * len / avg_len.max(1e-12));
                query_tokens
                    .iter()
                    .map(|q| {
                        let tf = d.iter().filter(|t| *t == q).count() as f64;
                        if tf == 0.0 {
                            return 0.0;
                        }
                        let df = doc_freq.get(q.as_str()).copied().unwrap_or(0) as f64;
                        let idf = (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (self.k1 + 1.0) / (tf + norm)
                    })
                    .sum()
            })
            .collect();
        doc_scores.chunks(2).map(|pair| pair.iter().copied().fold(0.0, f64::max)).collect()
    }
}

const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "and",
    "are",
    "as",
    "at",
    "be",
    "but",
    "by",
    "do",
    "for",
    "from",
    "had",
    "has",
    "have",
    "he",
    "her",
    "his",
    "i",
    "if",
    "in",
    "is",
    "it",
    "its",
    "me",
    "my",
    "of",
    "on",
    "or",
    "our",
    "she",
    "so",
    "that",
    "the",
    "their",
    "them",
    "there",
    "they",
    "this",
    "to",
    "was",
    "we",
    "were",
    "what",
    "when",
    "which",
    "with",
    "you",
    "your",
    "im",
    "ive",
    "been",
    "am",
    "get",
    "got",
    "lot",
    "some",
    "very",
    "really",
    "just",
    "also",
    "often",
    "sometimes",
    "s",
    "t",
];

/// Lowercases, strips punctuation and drops stopwords.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !STOPWORDS.contains(t))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> KnowledgeBase {
        KnowledgeBase::ingest(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/sample_kb.jsonl")).unwrap()
    }

    fn symptom(id: &str, links: &[&str]) -> String {
        format!(
            r#"{{"kind":"symptom","id":"{id}","name_prof":"P {id}","name_cons":"C {id}","description":"desc {id}","context_gamma":"g {id}","context_upsilon":"u {id}","linked_diseases":{links:?}}}"#
        )
    }

    fn disease(id: &str) -> String {
        format!(r#"{{"kind":"disease","id":"{id}","name":"{id}","context":"ctx {id}","specialty":"x"}}"#)
    }

    #[test]
    fn sample_counts() {
        let kb = sample();
        assert_eq!(kb.symptom_count(), 6);
        assert_eq!(kb.disease_count(), 10);
        assert_eq!(kb.meta().source, "synthetic-guideline-sample");
    }

    #[test]
    fn ingest_is_deterministic() {
        assert_eq!(sample(), sample());
    }

    #[test]
    fn empty_file_has_no_records() {
        let err = KnowledgeBase::parse("# only a comment\n\n", "empty").unwrap_err();
        assert!(err.to_string().contains("no records"), "{err}");
    }

    #[test]
    fn dangling_reference_names_disease() {
        let text = format!("{}\n{}\n", symptom("s1", &["d1", "dXX"]), disease("d1"));
        let err = KnowledgeBase::parse(&text, "t").unwrap_err();
        assert!(matches!(err, KbError::DanglingReference { ref disease, .. } if disease == "dXX"));
        assert!(err.to_string().contains("dXX"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("# header\n{}\n{{not json\n", disease("d1"));
        match KnowledgeBase::parse(&text, "t").unwrap_err() {
            KbError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = format!("{}\n{}\n", disease("d1"), disease("d1"));
        assert!(matches!(
            KnowledgeBase::parse(&text, "t").unwrap_err(),
            KbError::DuplicateId { line: 2, .. }
        ));
    }

    #[test]
    fn empty_context_rejected() {
        let text = symptom("s1", &[]).replace("\"g s1\"", "\"  \"");
        assert!(matches!(KnowledgeBase::parse(&text, "t").unwrap_err(), KbError::Malformed { line: 1, .. }));
    }

    #[test]
    fn runny_nose_maps_to_rhinorrhea() {
        let kb = sample();
        let ranked = kb.map_to_symptoms("my nose runs and I sneeze a lot", 3).unwrap();
        assert_eq!(ranked[0].0.id, "rhinorrhea");
        assert!(ranked.iter().any(|(s, _)| s.id == "sneezing"));
    }

    #[test]
    fn verbatim_description_ranks_first() {
        let kb = sample();
        for s in kb.symptoms() {
            let ranked = kb.map_to_symptoms(&s.description, 6).unwrap();
            assert_eq!(ranked[0].0.id, s.id);
            assert!(ranked.iter().skip(1).all(|(_, score)| *score < ranked[0].1));
        }
    }

    #[test]
    fn top_n_clamps_and_sorts() {
        let kb = sample();
        let query: String = kb.symptoms().map(|s| s.description.clone()).collect::<Vec<_>>().join(" ");
        let ranked = kb.map_to_symptoms(&query, 50).unwrap();
        assert_eq!(ranked.len(), 6);
        for w in ranked.windows(2) {
            assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0.id < w[1].0.id));
        }
    }

    #[test]
    fn retrieval_errors() {
        let kb = sample();
        assert!(matches!(kb.map_to_symptoms("  ", 3), Err(KbError::EmptyQuery)));
        assert!(matches!(kb.map_to_symptoms("nose", 0), Err(KbError::InvalidTopN)));
        let no_symptoms = KnowledgeBase::parse(&disease("d1"), "t").unwrap();
        assert!(matches!(no_symptoms.map_to_symptoms("nose", 3), Err(KbError::NoSymptoms)));
    }

    #[test]
    fn gather_unions_links_in_first_seen_order() {
        let text = [
            symptom("a", &["d1", "d2"]),
            symptom("b", &["d2", "d3"]),
            disease("d1"),
            disease("d2"),
            disease("d3"),
        ]
        .join("\n");
        let kb = KnowledgeBase::parse(&text, "t").unwrap();
        let a = kb.symptom("a").unwrap();
        let b = kb.symptom("b").unwrap();
        assert_eq!(kb.gather_context(&[a]).candidate_disease_ids, ["d1", "d2"]);
        let ctx = kb.gather_context(&[a, b]);
        assert_eq!(ctx.candidate_disease_ids, ["d1", "d2", "d3"]);
        assert!(ctx.gamma_text.starts_with("### a (P a)\ng a"));
        assert!(ctx.upsilon_text.contains("\n\n### b (P b)\nu b"));
    }

    #[test]
    fn gather_sample_nasal_symptoms() {
        let kb = sample();
        let r = kb.symptom("rhinorrhea").unwrap();
        let s = kb.symptom("sneezing").unwrap();
        let ctx = kb.gather_context(&[r, s]);
        assert_eq!(ctx.candidate_disease_ids, ["allergic_rhinitis", "common_cold", "acute_sinusitis"]);
    }

    #[test]
    fn gather_length_has_no_truncation() {
        let kb = sample();
        let all: Vec<&SymptomEntry> = kb.symptoms().collect();
        let ctx = kb.gather_context(&all);
        let headers: usize = all.iter().map(|s| record_header(s).len()).sum();
        let seps = RECORD_SEPARATOR.len() * (all.len() - 1);
        let gamma: usize = all.iter().map(|s| s.context_gamma.len()).sum();
        let upsilon: usize = all.iter().map(|s| s.context_upsilon.len()).sum();
        assert_eq!(ctx.gamma_text.len(), gamma + headers + seps);
        assert_eq!(ctx.upsilon_text.len(), upsilon + headers + seps);
    }

    #[test]
    fn embedding_scorer_is_pluggable() {
        let kb = sample();
        // bag-of-letters embedding, enough to exercise the interface
        let embed = |t: &str| {
            let mut v = vec![0f32; 26];
            for c in t.to_lowercase().bytes().filter(u8::is_ascii_lowercase) {
                v[(c - b'a') as usize] += 1.0;
            }
            v
        };
        let scorer = EmbeddingScorer::new(embed);
        let d = kb.symptom("dizziness").unwrap().description.clone();
        let ranked = kb.map_with(&scorer, &d, 2).unwrap();
        assert_eq!(ranked.len(), 2);
        assert!(ranked[0].1 >= ranked[1].1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn appending_own_description_never_lowers_score(idx in 0usize..6, words in "[a-z ]{1,40}") {
                let kb = sample();
                let s = kb.symptoms().nth(idx).unwrap();
                let query = format!("{words} x");
                let score_of = |q: &str| {
                    kb.map_to_symptoms(q, 6).unwrap().into_iter()
                        .find(|(e, _)| e.id == s.id).map(|(_, sc)| sc).unwrap_or(0.0)
                };
                let before = score_of(&query);
                let after = score_of(&format!("{query} {}", s.description));
                prop_assert!(after >= before);
            }

            #[test]
            fn retrieval_is_deterministic(words in "[a-z ]{1,60}") {
                let kb = sample();
                let q = format!("{words} nose");
                let a: Vec<_> = kb.map_to_symptoms(&q, 3).unwrap().into_iter().map(|(e, s)| (e.id.clone(), s)).collect();
                let b: Vec<_> = kb.map_to_symptoms(&q, 3).unwrap().into_iter().map(|(e, s)| (e.id.clone(), s)).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
