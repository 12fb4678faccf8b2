use serde::{Deserialize, Serialize};

use crate::metrics::CiderRefs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Cider,
    Additive,
    Proportional,
}

impl std::str::FromStr for RewardKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cider" => Ok(Self::Cider),
            "additive" => Ok(Self::Additive),
            "proportional" => Ok(Self::Proportional),
            other => Err(format!("unknown reward kind `{other}` (expected cider, additive or proportional)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub a: f64,
    pub p: f64,
    /// Restrict training to pairs whose reference names a retained label.
    pub voa_only: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { kind: RewardKind::Cider, a: 0.3, p: 0.3, voa_only: false }
    }
}

/// `CIDEr`, `CIDEr + a C` or `CIDEr (1 + p C)` for a caption with `copies`
/// copy actions.
pub fn reward_value(cider: f64, copies: usize, cfg: &RewardConfig) -> f64 {
    let c = copies as f64;
    match cfg.kind {
        RewardKind::Cider => cider,
        RewardKind::Additive => cider + cfg.a * c,
        RewardKind::Proportional => cider * (1.0 + cfg.p * c),
    }
}

pub fn reward(words: &[String], copies: usize, refs: &CiderRefs, cfg: &RewardConfig) -> f64 {
    let cider = if words.is_empty() { 0.0 } else { refs.score(words) };
    reward_value(cider, copies, cfg)
}
