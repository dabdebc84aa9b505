use std::fmt;
use std::path::Path;

use hecnn::levels::Preset;
use hecnn::transform::Strategy;
use serde::Deserialize;

/// Outcome of a failed subcommand, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    /// A check ran and did not pass (exit 1).
    Check(String),
    /// Bad flags, files or config (exit 2).
    Usage(String),
    /// The library reported a broken invariant (exit 3).
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Check(m) => write!(f, "FAIL: {m}"),
            Failure::Usage(m) => write!(f, "error: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<hecnn::Error> for Failure {
    fn from(e: hecnn::Error) -> Self {
        use hecnn::Error::*;
        match e {
            Parse(_) | Io(_) | Invalid(_) | Shape(_) | Strategy { .. } | Capacity { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(format!("json: {e}"))
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Pipeline settings read from `--config`. Every field is optional and
/// command-line flags take precedence.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub strategy: Option<String>,
    pub k: Option<usize>,
    pub delta_bits: Option<u32>,
    pub sublevel: Option<u32>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub tol_transform: Option<f64>,
    pub tol_sim: Option<f64>,
}

pub fn load(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let Some(path) = path else { return Ok(PipelineConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let cfg: PipelineConfig = serde_json::from_str(&text)?;
    if let Some(s) = &cfg.strategy {
        parse_strategy(s)?;
    }
    if let Some(p) = &cfg.preset {
        preset(p)?;
        if let Some(s) = &cfg.strategy {
            if !matches!(parse_strategy(s)?, Strategy::P2FR | Strategy::P2FRT) {
                return Err(Failure::Usage(format!("preset {p} is sized for p2fr with tower reuse, not {s}")));
            }
        }
    }
    Ok(cfg)
}

pub fn parse_strategy(s: &str) -> CliResult<Strategy> {
    Strategy::parse(s).ok_or_else(|| Failure::Usage(format!("unknown strategy {s}")))
}

pub fn preset(name: &str) -> CliResult<Preset> {
    Preset::builtin(name).ok_or_else(|| Failure::Usage(format!("unknown preset {name}")))
}

/// First of the flag, the config field and the default.
pub fn pick<T: Clone>(flag: Option<T>, cfg: &Option<T>, default: T) -> T {
    flag.or_else(|| cfg.clone()).unwrap_or(default)
}
