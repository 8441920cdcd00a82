//! Prompt templates with `{{name}}` placeholders.

use std::collections::BTreeSet;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptAsset {
    pub id: &'static str,
    pub template: &'static str,
    pub notes: &'static str,
}

macro_rules! asset {
    ($name:ident, $file:literal, $notes:literal) => {
        pub const $name: PromptAsset = PromptAsset {
            id: $file,
            template: include_str!(concat!("../../../../assets/prompts/", $file, ".txt")),
            notes: $notes,
        };
    };
}

asset!(SYSTEM, "system", "shared system persona for all assistant-side calls");
asset!(EXTRACT_SYMPTOMS, "extract_symptoms", "symptom summary feeding retrieval");
asset!(ELICIT_DISTRIBUTION, "elicit_distribution", "grounded disease weights, fenced id: number block");
asset!(GENERATE_QUESTIONS, "generate_questions", "question pool grounded in diagnosis-procedure passages");
asset!(SIMULATE_RESPONSES, "simulate_responses", "one-step lookahead: plausible patient answers");
asset!(ELICIT_LIKELIHOODS, "elicit_likelihoods", "batched answer likelihoods for one (question, disease)");
asset!(ELICIT_LIKELIHOOD, "elicit_likelihood", "single answer likelihood for one disease");
asset!(
    HUMANIZE_QUESTION,
    "humanize_question",
    "plain-language rewrite: simplify jargon, yes/no or multiple-choice framing, descriptive hints"
);
asset!(
    PATIENT_PERSONA,
    "patient_persona",
    "simulated patient persona; daily-life detail instruction; remote backends only"
);
asset!(STRICT_FORMAT, "strict_format", "reprompt after an unreadable reply");

pub const ALL: [PromptAsset; 10] = [
    SYSTEM,
    EXTRACT_SYMPTOMS,
    ELICIT_DISTRIBUTION,
    GENERATE_QUESTIONS,
    SIMULATE_RESPONSES,
    ELICIT_LIKELIHOODS,
    ELICIT_LIKELIHOOD,
    HUMANIZE_QUESTION,
    PATIENT_PERSONA,
    STRICT_FORMAT,
];

impl PromptAsset {
    pub fn placeholders(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        let mut rest = self.template;
        while let Some(start) = rest.find("{{") {
            let after = &rest[start + 2..];
            match after.find("}}") {
                Some(end) => {
                    out.insert(&after[..end]);
                    rest = &after[end + 2..];
                }
                None => break,
            }
        }
        out
    }

    /// Fills every placeholder. Panics if a binding names a placeholder the
    /// template lacks or a placeholder is left unbound; both are programming
    /// errors caught by the asset tests.
    pub fn render(&self, bindings: &[(&str, &str)]) -> String {
        let expected = self.placeholders();
        for (k, _) in bindings {
            assert!(expected.contains(k), "asset `{}` has no placeholder `{k}`", self.id);
        }
        let mut out = self.template.to_string();
        for name in &expected {
            let value = bindings
                .iter()
                .find(|(k, _)| k == name)
                .unwrap_or_else(|| panic!("asset `{}` placeholder `{name}` unbound", self.id))
                .1;
            out = out.replace(&format!("{{{{{name}}}}}"), value);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orchestrator_placeholders_exist() {
        let required: &[(&PromptAsset, &[&str])] = &[
            (&EXTRACT_SYMPTOMS, &["dialogue"]),
            (&ELICIT_DISTRIBUTION, &["gamma", "dialogue", "candidates"]),
            (&GENERATE_QUESTIONS, &["upsilon", "dialogue", "distribution", "k"]),
            (&SIMULATE_RESPONSES, &["question", "dialogue", "l_max"]),
            (&ELICIT_LIKELIHOODS, &["disease", "disease_context", "question", "responses"]),
            (&ELICIT_LIKELIHOOD, &["disease", "disease_context", "response"]),
            (&HUMANIZE_QUESTION, &["question"]),
            (
                &PATIENT_PERSONA,
                &["age", "symptoms", "intention", "personality", "facts", "dialogue", "question"],
            ),
            (&STRICT_FORMAT, &["format"]),
        ];
        for (asset, names) in required {
            let have = asset.placeholders();
            let want: BTreeSet<&str> = names.iter().copied().collect();
            assert_eq!(have, want, "asset {}", asset.id);
        }
        assert!(SYSTEM.placeholders().is_empty());
    }

    #[test]
    fn human_centric_instructions_present() {
        assert!(HUMANIZE_QUESTION
            .template
            .contains("Simplify medical terminology and jargon into everyday language"));
        assert!(PATIENT_PERSONA.template.contains(
            "Reasonably incorporate daily life details that align with the patient's personality and background."
        ));
    }

    #[test]
    fn render_fills_all() {
        let text = HUMANIZE_QUESTION.render(&[("question", "Any rhinorrhea?")]);
        assert!(text.contains("Any rhinorrhea?"));
        assert!(!text.contains("{{"));
        assert_eq!(ALL.len(), ALL.iter().map(|a| a.id).collect::<BTreeSet<_>>().len());
    }

    #[test]
    #[should_panic(expected = "unbound")]
    fn render_rejects_missing_binding() {
        HUMANIZE_QUESTION.render(&[]);
    }
}
