use std::path::Path;

use anyhow::{Context, Result};
use cameo_core::trainer::{AblationFlags, ExperimentConfig};

use crate::Component;

pub const SEED_ENV: &str = "IAP_SEED";

/// Seed from `--seed`, else `IAP_SEED`, else `None`.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let s = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
            Ok(Some(s))
        }
        _ => Ok(None),
    }
}

/// Defaults, then the config file, then flags.
pub fn experiment(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed_override(seed)? {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_disable(flags: &mut AblationFlags, off: &[Component]) {
    for c in off {
        match c {
            Component::IdentityEmbeddings => flags.identity_embeddings = false,
            Component::SubjectAnchors => flags.subject_anchors = false,
        }
    }
}
