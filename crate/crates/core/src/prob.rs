//! Disease distributions and one-step lookahead question selection.
//!
//! For a candidate question with simulated responses `r_1..r_L` and elicited
//! likelihoods `P(r_l | d_i)`, the virtual posterior is
//!
//! ```text
//! P(r_l, d_i)   = P(r_l | d_i) * P_t(d_i)
//! P(d_i | q)    = sum_l P(r_l, d_i) / sum_j sum_l P(r_l, d_j)
//! H_q           = -sum_i P(d_i | q) ln P(d_i | q)
//! q*            = argmin_q H_q
//! ```
//!
//! The residual "other" bucket has no guideline context, so it is kept inert:
//! its likelihood row is the prior-weighted mixture of the disease rows,
//! which leaves its mass unchanged under the marginalized update.
//!
//! All entropies are in nats.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sum tolerance for a valid distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Elicited likelihoods of exactly zero are raised to this value.
pub const LIKELIHOOD_FLOOR: f64 = 1e-6;
/// Upper bound on simulated responses per question.
pub const MAX_RESPONSES: usize = 5;
const UNINFORMATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbError {
    #[error("uninformative lookahead table for question {question}: zero denominator")]
    Uninformative { question: usize },
    #[error(
        "lookahead table for question {question} is missing cell (disease `{disease}`, response {response})"
    )]
    MissingCell { question: usize, disease: String, response: usize },
    #[error("question {question} has {count} responses, expected 2..={max}")]
    ResponseCount { question: usize, count: usize, max: usize },
    #[error("likelihood {value} for disease `{disease}` is outside [0, 1]")]
    InvalidLikelihood { disease: String, value: f64 },
    #[error("empty question pool")]
    EmptyPool,
    #[error("all weights are zero")]
    AllZero,
    #[error("duplicate disease id `{0}`")]
    DuplicateId(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseProb {
    pub id: String,
    pub p: f64,
}

/// Normalized distribution over candidate diseases plus a residual bucket.
/// Entries are kept sorted by descending probability, ties by id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct DiseaseDistribution {
    entries: Vec<DiseaseProb>,
    other_mass: f64,
    iteration: usize,
}

#[derive(Deserialize)]
struct RawDistribution {
    entries: Vec<DiseaseProb>,
    other_mass: f64,
    iteration: usize,
}

impl TryFrom<RawDistribution> for DiseaseDistribution {
    type Error = ProbError;

    fn try_from(raw: RawDistribution) -> Result<Self, Self::Error> {
        let pairs = raw.entries.into_iter().map(|e| (e.id, e.p)).collect();
        DiseaseDistribution::new(pairs, raw.other_mass, raw.iteration)
    }
}

impl DiseaseDistribution {
    /// Builds a distribution from probabilities that already satisfy the
    /// invariants (each in [0,1], total 1 within tolerance).
    pub fn new(entries: Vec<(String, f64)>, other_mass: f64, iteration: usize) -> Result<Self, ProbError> {
        let mut seen = HashSet::new();
        for (id, p) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(ProbError::DuplicateId(id.clone()));
            }
            if !(0.0..=1.0).contains(p) {
                return Err(ProbError::InvalidDistribution(format!(
                    "probability {p} for `{id}` outside [0, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&other_mass) {
            return Err(ProbError::InvalidDistribution(format!("other mass {other_mass} outside [0, 1]")));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum::<f64>() + other_mass;
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(ProbError::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        let mut entries: Vec<DiseaseProb> =
            entries.into_iter().map(|(id, p)| DiseaseProb { id, p }).collect();
        sort_entries(&mut entries);
        Ok(Self { entries, other_mass, iteration })
    }

    pub fn uniform(ids: &[&str], iteration: usize) -> Self {
        let p = 1.0 / ids.len() as f64;
        let mut entries: Vec<DiseaseProb> =
            ids.iter().map(|id| DiseaseProb { id: (*id).to_string(), p }).collect();
        sort_entries(&mut entries);
        Self { entries, other_mass: 0.0, iteration }
    }

    pub fn entries(&self) -> &[DiseaseProb] {
        &self.entries
    }

    pub fn other_mass(&self) -> f64 {
        self.other_mass
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prob(&self, id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.p)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    /// Most probable enumerated disease (ties resolved by id).
    pub fn argmax(&self) -> Option<&DiseaseProb> {
        self.entries.first()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.p).sum::<f64>() + self.other_mass
    }
}

fn sort_entries(entries: &mut [DiseaseProb]) {
    entries.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| a.id.cmp(&b.id)));
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats, including the residual bucket.
pub fn entropy(dist: &DiseaseDistribution) -> f64 {
    let h = -(dist.entries.iter().map(|e| plogp(e.p)).sum::<f64>() + plogp(dist.other_mass));
    h.max(0.0)
}

/// Result of repairing raw elicited weights into a distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub distribution: DiseaseDistribution,
    pub notes: Vec<String>,
}

/// Scales non-negative weights to a distribution. Negative or non-finite
/// weights are clamped to zero and noted. Inputs that already sum to one
/// (within 1e-12) are kept as given.
pub fn normalize(
    raw: &[(String, f64)],
    other_weight: f64,
    iteration: usize,
) -> Result<Normalized, ProbError> {
    let mut notes = Vec::new();
    let mut seen = HashSet::new();
    let clamp = |label: &str, w: f64, notes: &mut Vec<String>| {
        if w.is_finite() && w >= 0.0 {
            w
        } else {
            notes.push(format!("clamped weight {w} for `{label}` to 0"));
            0.0
        }
    };
    let mut weights = Vec::with_capacity(raw.len());
    for (id, w) in raw {
        if !seen.insert(id.as_str()) {
            return Err(ProbError::DuplicateId(id.clone()));
        }
        weights.push((id.clone(), clamp(id, *w, &mut notes)));
    }
    let other = clamp("other", other_weight, &mut notes);
    let total: f64 = weights.iter().map(|(_, w)| w).sum::<f64>() + other;
    if total <= 0.0 {
        return Err(ProbError::AllZero);
    }
    if (total - 1.0).abs() > 1e-12 {
        for (_, w) in &mut weights {
            *w /= total;
        }
        let other = other / total;
        return Ok(Normalized { distribution: DiseaseDistribution::new(weights, other, iteration)?, notes });
    }
    Ok(Normalized { distribution: DiseaseDistribution::new(weights, other, iteration)?, notes })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuestion {
    pub id: usize,
    pub text: String,
    #[serde(default)]
    pub rationale: String,
}

/// Simulated responses to one candidate question and the elicited
/// likelihood of each response under each disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadTable {
    pub question: CandidateQuestion,
    pub responses: Vec<String>,
    /// disease id -> one likelihood per response
    pub likelihoods: BTreeMap<String, Vec<f64>>,
    /// Number of cells raised from zero to the likelihood floor.
    #[serde(default)]
    pub floored_cells: usize,
}

impl LookaheadTable {
    /// Validates the table shape and values, and floors exact zeros.
    pub fn new(
        question: CandidateQuestion,
        responses: Vec<String>,
        likelihoods: BTreeMap<String, Vec<f64>>,
        l_max: usize,
    ) -> Result<Self, ProbError> {
        let l = responses.len();
        if l < 2 || l > l_max {
            return Err(ProbError::ResponseCount { question: question.id, count: l, max: l_max });
        }
        let mut floored = 0;
        let mut out = BTreeMap::new();
        for (disease, row) in likelihoods {
            if row.len() != l {
                return Err(ProbError::MissingCell {
                    question: question.id,
                    disease,
                    response: row.len().min(l),
                });
            }
            let mut fixed = Vec::with_capacity(l);
            for v in row {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(ProbError::InvalidLikelihood { disease, value: v });
                }
                if v == 0.0 {
                    floored += 1;
                    fixed.push(LIKELIHOOD_FLOOR);
                } else {
                    fixed.push(v);
                }
            }
            out.insert(disease, fixed);
        }
        Ok(Self { question, responses, likelihoods: out, floored_cells: floored })
    }

    fn row(&self, disease: &str) -> Result<&[f64], ProbError> {
        let l = self.responses.len();
        match self.likelihoods.get(disease) {
            Some(row) if row.len() == l => Ok(row),
            Some(row) => Err(ProbError::MissingCell {
                question: self.question.id,
                disease: disease.to_string(),
                response: row.len(),
            }),
            None => Err(ProbError::MissingCell {
                question: self.question.id,
                disease: disease.to_string(),
                response: 0,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Entropy of the response-marginalized posterior.
    #[default]
    Literal,
    /// Expected entropy of the per-response posteriors, weighted by the
    /// predictive probability of each response.
    Eig,
}

impl std::str::FromStr for SelectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(Self::Literal),
            "eig" => Ok(Self::Eig),
            other => Err(format!("unknown selection mode `{other}` (expected literal|eig)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LookaheadOptions {
    pub mode: SelectionMode,
    /// Renormalize each disease's likelihood row over responses before use.
    #[serde(default)]
    pub row_normalize: bool,
}

/// Likelihood rows for the prior's diseases, in prior entry order, after
/// optional row normalization.
fn effective_rows(
    prior: &DiseaseDistribution,
    table: &LookaheadTable,
    opts: &LookaheadOptions,
) -> Result<Vec<Vec<f64>>, ProbError> {
    prior
        .entries
        .iter()
        .map(|e| {
            let row = table.row(&e.id)?;
            if opts.row_normalize {
                let s: f64 = row.iter().sum();
                Ok(row.iter().map(|v| v / s).collect())
            } else {
                Ok(row.to_vec())
            }
        })
        .collect()
}

/// Virtual posterior after asking the table's question, marginalized over
/// its simulated responses. The iteration index is carried over.
pub fn posterior_given_question(
    prior: &DiseaseDistribution,
    table: &LookaheadTable,
) -> Result<DiseaseDistribution, ProbError> {
    posterior_with(prior, table, &LookaheadOptions::default())
}

pub fn posterior_with(
    prior: &DiseaseDistribution,
    table: &LookaheadTable,
    opts: &LookaheadOptions,
) -> Result<DiseaseDistribution, ProbError> {
    let rows = effective_rows(prior, table, opts)?;
    let joints: Vec<f64> = prior
        .entries
        .iter()
        .zip(&rows)
        .map(|(e, row)| row.iter().map(|lik| lik * e.p).sum::<f64>())
        .collect();
    let denom: f64 = joints.iter().sum();
    if denom.is_nan() || denom <= 0.0 || !denom.is_finite() {
        return Err(ProbError::Uninformative { question: table.question.id });
    }
    let disease_mass: f64 = prior.entries.iter().map(|e| e.p).sum();
    let mut entries: Vec<DiseaseProb> = prior
        .entries
        .iter()
        .zip(joints)
        .map(|(e, j)| DiseaseProb { id: e.id.clone(), p: (j / denom * disease_mass).clamp(0.0, 1.0) })
        .collect();
    let other = prior.other_mass;
    let total: f64 = entries.iter().map(|e| e.p).sum::<f64>() + other;
    let other = if (total - 1.0).abs() > 1e-12 {
        for e in &mut entries {
            e.p /= total;
        }
        other / total
    } else {
        other
    };
    sort_entries(&mut entries);
    Ok(DiseaseDistribution { entries, other_mass: other, iteration: prior.iteration })
}

/// Selection criterion `H_q` for one candidate.
pub fn expected_entropy(prior: &DiseaseDistribution, table: &LookaheadTable) -> Result<f64, ProbError> {
    expected_entropy_with(prior, table, &LookaheadOptions::default())
}

pub fn expected_entropy_with(
    prior: &DiseaseDistribution,
    table: &LookaheadTable,
    opts: &LookaheadOptions,
) -> Result<f64, ProbError> {
    match opts.mode {
        SelectionMode::Literal => Ok(entropy(&posterior_with(prior, table, opts)?)),
        SelectionMode::Eig => response_weighted_entropy(prior, table, opts),
    }
}

fn response_weighted_entropy(
    prior: &DiseaseDistribution,
    table: &LookaheadTable,
    opts: &LookaheadOptions,
) -> Result<f64, ProbError> {
    let rows = effective_rows(prior, table, opts)?;
    let disease_mass: f64 = prior.entries.iter().map(|e| e.p).sum();
    if disease_mass.is_nan() || disease_mass <= 0.0 {
        return Err(ProbError::Uninformative { question: table.question.id });
    }
    let n_resp = table.responses.len();
    let mut per_response = Vec::with_capacity(n_resp);
    let mut grand_total = 0.0;
    for l in 0..n_resp {
        let joints: Vec<f64> = prior.entries.iter().zip(&rows).map(|(e, row)| row[l] * e.p).collect();
        let disease_joint: f64 = joints.iter().sum();
        // residual bucket follows the prior-weighted mixture of disease rows
        let other_joint = prior.other_mass * disease_joint / disease_mass;
        let total = disease_joint + other_joint;
        grand_total += total;
        per_response.push((joints, other_joint, total));
    }
    if grand_total.is_nan() || grand_total <= 0.0 || !grand_total.is_finite() {
        return Err(ProbError::Uninformative { question: table.question.id });
    }
    let mut h = 0.0;
    for (joints, other_joint, total) in per_response {
        if total <= 0.0 {
            continue;
        }
        let weight = total / grand_total;
        let h_l = -(joints.iter().map(|j| plogp(j / total)).sum::<f64>() + plogp(other_joint / total));
        h += weight * h_l;
    }
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: usize,
    pub expected_entropy: f64,
}

/// Outcome of one selection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub question: CandidateQuestion,
    /// One entry per candidate, in input order.
    pub scores: Vec<QuestionScore>,
    pub prior_entropy: f64,
    /// Every candidate left the entropy at the prior value.
    pub uninformative: bool,
}

/// Picks the candidate with the lowest expected entropy; ties go to the
/// smallest question id.
pub fn select_question(
    prior: &DiseaseDistribution,
    tables: &[LookaheadTable],
) -> Result<Selection, ProbError> {
    select_question_with(prior, tables, &LookaheadOptions::default())
}

pub fn select_question_with(
    prior: &DiseaseDistribution,
    tables: &[LookaheadTable],
    opts: &LookaheadOptions,
) -> Result<Selection, ProbError> {
    if tables.is_empty() {
        return Err(ProbError::EmptyPool);
    }
    let scores = tables
        .iter()
        .map(|t| {
            Ok(QuestionScore {
                question_id: t.question.id,
                expected_entropy: expected_entropy_with(prior, t, opts)?,
            })
        })
        .collect::<Result<Vec<_>, ProbError>>()?;
    let best = tables
        .iter()
        .zip(&scores)
        .min_by(|(ta, sa), (tb, sb)| {
            sa.expected_entropy
                .total_cmp(&sb.expected_entropy)
                .then_with(|| ta.question.id.cmp(&tb.question.id))
        })
        .map(|(t, _)| t.question.clone())
        .expect("non-empty pool");
    let prior_entropy = entropy(prior);
    let uninformative =
        scores.iter().all(|s| (s.expected_entropy - prior_entropy).abs() <= UNINFORMATIVE_TOLERANCE);
    Ok(Selection { question: best, scores, prior_entropy, uninformative })
}
