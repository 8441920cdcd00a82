//! Shared fixtures: the shipped sample KB, script bundle and case suite.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use patience_core::backend::BackendConfig;
use patience_core::sim::{self, PatientProfile};
use patience_core::{Engine, SessionConfig};

pub const RHINITIS_OPENING: &str = "My nose keeps running and I can't stop sneezing, my eyes itch too.";

/// Workspace root relative to the package directory (the working directory
/// of integration tests), so recorded paths are machine-independent.
pub fn root() -> PathBuf {
    PathBuf::from("../..")
}

pub fn config(mut cfg: SessionConfig) -> SessionConfig {
    cfg.kb_path = Some(root().join("data/sample_kb.jsonl"));
    cfg.backend = BackendConfig::scripted(root().join("data/script_bundle"));
    cfg.backend.strict = true;
    cfg
}

pub fn engine(cfg: SessionConfig) -> Engine {
    Engine::from_config(config(cfg)).expect("engine")
}

pub fn cases(engine: &Engine) -> Vec<PatientProfile> {
    sim::load_cases(&root().join("data/cases"), engine.kb()).expect("cases")
}

pub fn case(engine: &Engine, id: &str) -> PatientProfile {
    cases(engine).into_iter().find(|c| c.case_id == id).expect("case id")
}

/// Compares against a golden file; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert_eq!(actual, expected, "golden mismatch: {}", path.display());
}
