//! Run configuration files.
//!
//! One `key = value` per line, dotted keys for sections and `#` for
//! full-line comments. Strings may be bare or double-quoted (`\"`, `\\`
//! and `\n` escapes). Every key has a default:
//!
//! | key | default |
//! |-----|---------|
//! | `mode` | `solve` |
//! | `solver.alpha` | `0.1` |
//! | `solver.mu` | `1.0` |
//! | `solver.lambda` | `1.0` |
//! | `solver.lipschitz` | `1.0` |
//! | `solver.eps_l1` | `0.001` |
//! | `solver.stages` | `4` |
//! | `solver.paper_literal_qa` | `false` |
//! | `solver.mask_prox` | `clamp` |
//! | `solver.background_prox` | `clamp` |
//! | `solver.tv_weight` | `0.1` |
//! | `training.steps` | `2000` |
//! | `training.lr` | `0.0001` |
//! | `training.batch_size` | `4` |
//! | `training.seed` | `7` |
//! | `training.hidden` | `4` |
//! | `paths.input` | `""` |
//! | `paths.output` | `""` |
//! | `paths.checkpoint` | `""` |
//! | `paths.manifest` | `""` |

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::ConfigError;
use crate::model::{BackgroundProx, MaskProx, SolverConfig};
use crate::unfolded::{TrainConfig, UnfoldedConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    #[default]
    Solve,
    Train,
    Eval,
    Synth,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Solve => "solve",
            Mode::Train => "train",
            Mode::Eval => "eval",
            Mode::Synth => "synth",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "solve" => Ok(Mode::Solve),
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            "synth" => Ok(Mode::Synth),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSection {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Width of the hidden refinement layers.
    pub hidden: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed,
            hidden: UnfoldedConfig::default().hidden,
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsSection {
    pub input: String,
    pub output: String,
    pub checkpoint: String,
    pub manifest: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub solver: SolverConfig,
    pub training: TrainingSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Unfolded-model shape implied by the solver and training sections.
    pub fn unfolded_config(&self) -> UnfoldedConfig {
        UnfoldedConfig {
            stages: self.solver.stages,
            hidden: self.training.hidden,
            eps_l1: self.solver.eps_l1,
            paper_literal_qa: self.solver.paper_literal_qa,
        }
    }
}

pub const CONFIG_KEYS: [&str; 20] = [
    "mode",
    "solver.alpha",
    "solver.mu",
    "solver.lambda",
    "solver.lipschitz",
    "solver.eps_l1",
    "solver.stages",
    "solver.paper_literal_qa",
    "solver.mask_prox",
    "solver.background_prox",
    "solver.tv_weight",
    "training.steps",
    "training.lr",
    "training.batch_size",
    "training.seed",
    "training.hidden",
    "paths.input",
    "paths.output",
    "paths.checkpoint",
    "paths.manifest",
];

fn unquote(raw: &str) -> Option<String> {
    let Some(inner) = raw.strip_prefix('"') else {
        return Some(raw.to_string());
    };
    let inner = inner.strip_suffix('"')?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next()? {
                '\\' => out.push('\\'),
                '"' => out.push('"'),
                'n' => out.push('\n'),
                _ => return None,
            },
            '"' => return None,
            c => out.push(c),
        }
    }
    Some(out)
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

struct Assign<'a> {
    key: &'a str,
    raw: &'a str,
    line: usize,
}

impl Assign<'_> {
    fn mismatch(&self, expected: &'static str) -> ConfigError {
        ConfigError::TypeMismatch {
            key: self.key.to_string(),
            value: self.raw.to_string(),
            expected,
            line: self.line,
        }
    }

    fn text(&self) -> Result<String, ConfigError> {
        unquote(self.raw).ok_or_else(|| self.mismatch("a string"))
    }

    fn float(&self) -> Result<f64, ConfigError> {
        self.raw
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.mismatch("a finite number"))
    }

    fn uint<T: FromStr>(&self) -> Result<T, ConfigError> {
        self.raw
            .parse()
            .map_err(|_| self.mismatch("a nonnegative integer"))
    }

    fn boolean(&self) -> Result<bool, ConfigError> {
        match self.raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(self.mismatch("true or false")),
        }
    }

    fn parsed<T: FromStr>(&self, expected: &'static str) -> Result<T, ConfigError> {
        self.text()?.parse().map_err(|_| self.mismatch(expected))
    }
}

/// Parses a configuration, rejecting unknown, duplicate and ill-typed
/// keys. Missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, raw) = trimmed
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: line_no })?;
        let a = Assign {
            key: key.trim(),
            raw: raw.trim(),
            line: line_no,
        };
        if a.key.is_empty() {
            return Err(ConfigError::Syntax { line: line_no });
        }
        if !CONFIG_KEYS.contains(&a.key) {
            return Err(ConfigError::UnknownKey {
                key: a.key.to_string(),
                line: line_no,
            });
        }
        if !seen.insert(a.key.to_string()) {
            return Err(ConfigError::DuplicateKey {
                key: a.key.to_string(),
                line: line_no,
            });
        }
        let s = &mut cfg.solver;
        let t = &mut cfg.training;
        let p = &mut cfg.paths;
        match a.key {
            "mode" => cfg.mode = a.parsed("one of solve, train, eval, synth")?,
            "solver.alpha" => s.alpha = a.float()?,
            "solver.mu" => s.mu = a.float()?,
            "solver.lambda" => s.lambda = a.float()?,
            "solver.lipschitz" => s.lipschitz = a.float()?,
            "solver.eps_l1" => s.eps_l1 = a.float()?,
            "solver.stages" => s.stages = a.uint()?,
            "solver.paper_literal_qa" => s.paper_literal_qa = a.boolean()?,
            "solver.mask_prox" => s.mask_prox = a.parsed::<MaskProx>("clamp or clamp+tv")?,
            "solver.background_prox" => {
                s.background_prox = a.parsed::<BackgroundProx>("clamp or gaussian")?
            }
            "solver.tv_weight" => s.tv_weight = a.float()?,
            "training.steps" => t.steps = a.uint()?,
            "training.lr" => t.lr = a.float()?,
            "training.batch_size" => t.batch_size = a.uint()?,
            "training.seed" => t.seed = a.uint()?,
            "training.hidden" => t.hidden = a.uint()?,
            "paths.input" => p.input = a.text()?,
            "paths.output" => p.output = a.text()?,
            "paths.checkpoint" => p.checkpoint = a.text()?,
            "paths.manifest" => p.manifest = a.text()?,
            _ => unreachable!("key list checked above"),
        }
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let bad = |key: &str, reason: String| ConfigError::Invalid {
        key: key.to_string(),
        reason,
    };
    cfg.solver
        .validate()
        .map_err(|e| bad("solver", e.to_string()))?;
    if cfg.training.lr.is_nan() || cfg.training.lr < 0.0 {
        return Err(bad("training.lr", "must be >= 0".into()));
    }
    if cfg.training.batch_size == 0 {
        return Err(bad("training.batch_size", "must be >= 1".into()));
    }
    if cfg.training.hidden == 0 {
        return Err(bad("training.hidden", "must be >= 1".into()));
    }
    Ok(())
}

/// Writes every key, in the documented order, so that
/// `parse_config(&render_config(c)) == c`.
pub fn render_config(cfg: &RunConfig) -> String {
    let s = &cfg.solver;
    let t = &cfg.training;
    let p = &cfg.paths;
    let values: [String; 20] = [
        cfg.mode.to_string(),
        format!("{:?}", s.alpha),
        format!("{:?}", s.mu),
        format!("{:?}", s.lambda),
        format!("{:?}", s.lipschitz),
        format!("{:?}", s.eps_l1),
        s.stages.to_string(),
        s.paper_literal_qa.to_string(),
        s.mask_prox.to_string(),
        s.background_prox.to_string(),
        format!("{:?}", s.tv_weight),
        t.steps.to_string(),
        format!("{:?}", t.lr),
        t.batch_size.to_string(),
        t.seed.to_string(),
        t.hidden.to_string(),
        quote(&p.input),
        quote(&p.output),
        quote(&p.checkpoint),
        quote(&p.manifest),
    ];
    let mut out = String::new();
    for (k, v) in CONFIG_KEYS.iter().zip(values) {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(&v);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
        assert_eq!(
            parse_config("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn stages_key() {
        let c = parse_config("solver.stages = 4").unwrap();
        assert_eq!(c.solver.stages, 4);
        let c = parse_config("solver.stages = 6\nmode = train").unwrap();
        assert_eq!(c.solver.stages, 6);
        assert_eq!(c.mode, Mode::Train);
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = parse_config("solver.stages = banana").unwrap_err();
        assert!(matches!(&err, ConfigError::TypeMismatch { key, .. } if key == "solver.stages"));
        assert!(err.to_string().contains("solver.stages"));
    }

    #[test]
    fn unknown_and_duplicate_keys() {
        let err = parse_config("solver.beta = 1").unwrap_err();
        assert_eq!(
            err,
            ConfigError::UnknownKey {
                key: "solver.beta".into(),
                line: 1
            }
        );
        let err = parse_config("solver.mu = 1\nsolver.mu = 2").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 2, .. }));
        assert!(matches!(
            parse_config("no equals sign"),
            Err(ConfigError::Syntax { line: 1 })
        ));
    }

    #[test]
    fn quoted_paths() {
        let c = parse_config("paths.input = \"a b\\\"c\"\npaths.output = plain/out").unwrap();
        assert_eq!(c.paths.input, "a b\"c");
        assert_eq!(c.paths.output, "plain/out");
    }

    #[test]
    fn render_round_trips_defaults() {
        let c = RunConfig::default();
        assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(matches!(
            parse_config("solver.mu = 0"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            parse_config("solver.alpha = nan"),
            Err(ConfigError::TypeMismatch { .. })
        ));
    }
}
