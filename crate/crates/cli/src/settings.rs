//! Config resolution: flags > config file > defaults.
//!
//! The config file is TOML. Session settings live under `[session]` (with
//! the backend under `[session.backend]`); relative paths in the file are
//! resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use patience_core::SessionConfig;

use crate::GlobalArgs;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub session: SessionConfig,
    /// Only `max_turns` ends a consultation.
    #[serde(default)]
    pub fixed_rounds: bool,
    pub seed: Option<u64>,
    #[serde(default)]
    pub bench: BenchFile,
    #[serde(default)]
    pub serve: ServeFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFile {
    pub cases: Option<PathBuf>,
    pub policies: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeFile {
    pub addr: Option<String>,
    pub transcripts: Option<PathBuf>,
    pub ui: Option<PathBuf>,
    pub ttl_secs: Option<u64>,
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut c: FileConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut c.session.kb_path);
        rebase(&mut c.session.backend.script_bundle);
        rebase(&mut c.bench.cases);
        rebase(&mut c.bench.out);
        rebase(&mut c.serve.transcripts);
        rebase(&mut c.serve.ui);
        Ok(c)
    }
}

pub struct Settings {
    pub session: SessionConfig,
    pub seed: u64,
    pub file: FileConfig,
}

pub fn resolve(g: &GlobalArgs) -> Result<Settings> {
    let mut file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut s = std::mem::take(&mut file.session);
    if file.fixed_rounds || g.fixed_rounds {
        s.stop_entropy = None;
        s.stop_top1 = None;
        s.stop_on_uninformative = false;
    }
    if let Some(kb) = &g.kb {
        s.kb_path = Some(kb.clone());
    }
    if let Some(kind) = g.backend {
        s.backend.kind = kind;
    }
    if let Some(dir) = &g.script_bundle {
        s.backend.script_bundle = Some(dir.clone());
    }
    if let Some(n) = g.max_turns {
        s.max_turns = n;
    }
    if let Some(k) = g.k {
        s.k = k;
    }
    if let Some(l) = g.l_max {
        s.l_max = l;
    }
    if let Some(m) = g.selection_mode {
        s.selection_mode = m;
    }
    let seed = g.seed.or(file.seed).unwrap_or(0);
    s.backend.seed = seed;
    Ok(Settings { session: s, seed, file })
}

impl Settings {
    /// Session config ready for an engine: needs a knowledge base and a
    /// valid backend.
    pub fn engine_config(&self) -> Result<SessionConfig> {
        if self.session.kb_path.is_none() {
            bail!("no knowledge base: pass --kb or set session.kb_path in the config file");
        }
        self.session.validate()?;
        self.session.backend.validate()?;
        Ok(self.session.clone())
    }
}
