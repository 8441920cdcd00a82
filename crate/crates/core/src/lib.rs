//! Guideline-grounded diagnostic dialogue engine.
//!
//! A consultation maps the patient's words onto knowledge-base symptoms,
//! elicits a disease distribution, generates candidate follow-up questions,
//! simulates plausible answers to each, and asks the question whose
//! lookahead posterior has the lowest entropy. Every step that needs a
//! language model goes through [`backend::Backend`], which has a scripted
//! implementation for reproducible runs and an HTTP client for live
//! chat-completion services.
//!
//! Research software. Not a medical device and not for clinical use.

pub mod backend;
pub mod engine;
pub mod kb;
pub mod metrics;
pub mod prob;
pub mod sim;
pub mod transcript;

pub use engine::{Diagnosis, DialogueState, Engine, Outcome, Policy, SessionConfig, StopReason};
pub use kb::KnowledgeBase;
pub use prob::{DiseaseDistribution, LookaheadTable, SelectionMode};
