//! Pipeline configuration: parsing `.labci.yml`, validation, matrix expansion.

mod lint;
pub mod yaml;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lint::{lint, Diagnostic};
use yaml::Node;

type Entries = Vec<(String, Node)>;

/// Name of the configuration file at the snapshot root.
pub const CONFIG_FILE: &str = ".labci.yml";
pub const DEFAULT_TIMEOUT_MINUTES: u32 = 50;

/// Toolchain names recognized as `<language>: <version>` shorthand keys.
const KNOWN_TOOLCHAINS: &[&str] = &[
    "python", "node", "nodejs", "ruby", "go", "rust", "java", "jdk", "php", "perl", "r",
    "julia", "scala", "dart", "elixir", "erlang", "haskell", "ghc", "crystal", "d", "dotnet",
    "swift", "matlab", "octave",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Info,
    Install,
    Build,
    Test,
    Deploy,
    Run,
    Report,
    /// Synthetic entry recording an executor failure outside any stage.
    Internal,
}

impl Stage {
    /// Stages a user can populate, in execution order.
    pub const CONFIGURABLE: [Stage; 6] = [
        Stage::Install,
        Stage::Build,
        Stage::Test,
        Stage::Deploy,
        Stage::Run,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Info => "info",
            Stage::Install => "install",
            Stage::Build => "build",
            Stage::Test => "test",
            Stage::Deploy => "deploy",
            Stage::Run => "run",
            Stage::Report => "report",
            Stage::Internal => "internal",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "info" => Stage::Info,
            "install" => Stage::Install,
            "build" => Stage::Build,
            "test" => Stage::Test,
            "deploy" => Stage::Deploy,
            "run" | "script" => Stage::Run,
            "report" => Stage::Report,
            "internal" => Stage::Internal,
            other => return Err(format!("unknown stage `{other}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Os {
    #[default]
    Linux,
    Macos,
    Windows,
}

impl Os {
    pub fn as_str(self) -> &'static str {
        match self {
            Os::Linux => "linux",
            Os::Macos => "macos",
            Os::Windows => "windows",
        }
    }

    /// The OS this process runs on, if it is one the config can name.
    pub fn current() -> Option<Os> {
        match std::env::consts::OS {
            "linux" => Some(Os::Linux),
            "macos" => Some(Os::Macos),
            "windows" => Some(Os::Windows),
            _ => None,
        }
    }
}

impl fmt::Display for Os {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Os {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linux" => Ok(Os::Linux),
            "macos" => Ok(Os::Macos),
            "windows" => Ok(Os::Windows),
            other => Err(format!("unknown os `{other}` (expected linux, macos or windows)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub os: Os,
    pub dist: Option<String>,
    pub language: Option<String>,
    pub language_version: Option<String>,
    pub env_vars: BTreeMap<String, String>,
}

/// Command lists per configurable stage; `script` is stored as `run`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageScripts {
    pub install: Vec<String>,
    pub build: Vec<String>,
    pub test: Vec<String>,
    pub deploy: Vec<String>,
    pub run: Vec<String>,
    pub report: Vec<String>,
}

impl StageScripts {
    pub fn get(&self, stage: Stage) -> &[String] {
        match stage {
            Stage::Install => &self.install,
            Stage::Build => &self.build,
            Stage::Test => &self.test,
            Stage::Deploy => &self.deploy,
            Stage::Run => &self.run,
            Stage::Report => &self.report,
            Stage::Info | Stage::Internal => &[],
        }
    }

    fn get_mut(&mut self, stage: Stage) -> &mut Vec<String> {
        match stage {
            Stage::Install => &mut self.install,
            Stage::Build => &mut self.build,
            Stage::Test => &mut self.test,
            Stage::Deploy => &mut self.deploy,
            Stage::Run => &mut self.run,
            Stage::Report => &mut self.report,
            Stage::Info | Stage::Internal => unreachable!("not a configurable stage"),
        }
    }

    pub fn is_empty(&self) -> bool {
        Stage::CONFIGURABLE.iter().all(|s| self.get(*s).is_empty())
    }
}

/// A partial environment override from one matrix entry.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatrixEntry {
    pub os: Option<Os>,
    pub dist: Option<String>,
    pub language: Option<String>,
    pub language_version: Option<String>,
    pub env_vars: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub entries: Vec<MatrixEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub base_env: EnvironmentSpec,
    pub stages: StageScripts,
    pub matrix: MatrixSpec,
    pub artifacts: ArtifactSpec,
    pub timeout_minutes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub stage: Stage,
    pub commands: Vec<String>,
}

/// One schedulable job. `stage_plan` excludes the implicit info stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub env: EnvironmentSpec,
    pub stage_plan: Vec<PlannedStage>,
    pub artifacts: ArtifactSpec,
    pub timeout_minutes: u32,
    pub matrix_index: u32,
}

impl JobSpec {
    /// Keeps only the listed stages. Returns false if nothing is left.
    pub fn retain_stages(&mut self, only: &[Stage]) -> bool {
        self.stage_plan.retain(|p| only.contains(&p.stage));
        !self.stage_plan.is_empty()
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("JobSpec serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("syntax error at {0}")]
    Syntax(yaml::SyntaxError),
    #[error("invalid configuration: {0}")]
    Validation(String),
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Syntax(e) => Some(e.line),
            ConfigError::Validation(_) => None,
        }
    }
}

/// Non-fatal parse finding, e.g. an unknown key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Validation(msg.into()))
}

fn scalar(node: &Node, what: &str) -> Result<String, ConfigError> {
    match node {
        Node::Scalar { value, .. } => Ok(value.clone()),
        other => invalid(format!(
            "line {}: `{what}` must be a scalar, found a {}",
            other.line(),
            other.kind()
        )),
    }
}

fn optional_scalar(node: &Node, what: &str) -> Result<Option<String>, ConfigError> {
    match node {
        Node::Null { .. } => Ok(None),
        n => scalar(n, what).map(Some),
    }
}

fn string_list(node: &Node, what: &str) -> Result<Vec<String>, ConfigError> {
    match node {
        Node::Null { .. } => Ok(Vec::new()),
        Node::Scalar { value, .. } => Ok(vec![value.clone()]),
        Node::Seq { items, .. } => items
            .iter()
            .map(|item| scalar(item, &format!("{what} entry")))
            .collect(),
        Node::Map { line, .. } => invalid(format!("line {line}: `{what}` must be a list of strings")),
    }
}

pub fn is_valid_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn env_map(node: &Node) -> Result<BTreeMap<String, String>, ConfigError> {
    let entries = match node {
        Node::Null { .. } => return Ok(BTreeMap::new()),
        Node::Map { entries, .. } => entries,
        other => return invalid(format!("line {}: `env` must be a mapping", other.line())),
    };
    let mut out = BTreeMap::new();
    for (name, value) in entries {
        if !is_valid_env_name(name) {
            return invalid(format!("bad env var name `{name}`"));
        }
        let value = optional_scalar(value, name)?.unwrap_or_default();
        if out.insert(name.clone(), value).is_some() {
            return invalid(format!("duplicate env var `{name}`"));
        }
    }
    Ok(out)
}

fn validate_pattern(p: &str) -> Result<(), ConfigError> {
    if p.trim().is_empty() {
        return invalid("artifact pattern is empty");
    }
    if p.starts_with('/') || p.starts_with('\\') || p.get(1..3) == Some(":\\") || p.get(1..3) == Some(":/") {
        return invalid(format!("artifact pattern `{p}` is absolute"));
    }
    if p.split(['/', '\\']).any(|seg| seg == "..") {
        return invalid(format!("artifact pattern `{p}` contains a `..` segment"));
    }
    globset::Glob::new(p).map_err(|e| ConfigError::Validation(format!("artifact pattern `{p}`: {e}")))?;
    Ok(())
}

/// Environment keys shared by the top level and matrix entries.
struct EnvKeys {
    os: Option<Os>,
    dist: Option<String>,
    language: Option<String>,
    env: BTreeMap<String, String>,
    /// `(key, value, line)` for keys that may be a `<language>: <version>` shorthand.
    candidates: Vec<(String, Node)>,
}

fn take_env_key(keys: &mut EnvKeys, key: &str, value: &Node) -> Result<bool, ConfigError> {
    match key {
        "os" => {
            let s = scalar(value, "os")?;
            keys.os = Some(s.parse().map_err(ConfigError::Validation)?);
        }
        "dist" => keys.dist = optional_scalar(value, "dist")?,
        "language" => keys.language = optional_scalar(value, "language")?,
        "env" => keys.env = env_map(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Resolves shorthand keys against the effective language. Returns the
/// version and the keys that were not shorthand at all.
fn resolve_shorthand(candidates: Vec<(String, Node)>, language: Option<&str>) -> Result<(Option<String>, Entries), ConfigError> {
    let mut version = None;
    let mut rest = Vec::new();
    for (key, node) in candidates {
        if Some(key.as_str()) == language {
            version = Some(scalar(&node, &key)?);
        } else if KNOWN_TOOLCHAINS.contains(&key.as_str()) {
            return invalid(match language {
                Some(lang) => format!(
                    "line {}: toolchain key `{key}` does not match declared language `{lang}`",
                    node.line()
                ),
                None => format!(
                    "line {}: toolchain key `{key}` requires `language: {key}`",
                    node.line()
                ),
            });
        } else {
            rest.push((key, node));
        }
    }
    Ok((version, rest))
}

fn matrix_entry(
    node: &Node,
    base_language: Option<&str>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<MatrixEntry, ConfigError> {
    let Node::Map { entries, .. } = node else {
        return invalid(format!("line {}: matrix entries must be mappings", node.line()));
    };
    let mut keys = EnvKeys { os: None, dist: None, language: None, env: BTreeMap::new(), candidates: Vec::new() };
    for (key, value) in entries {
        if !take_env_key(&mut keys, key, value)? {
            keys.candidates.push((key.clone(), value.clone()));
        }
    }
    let language = keys.language.as_deref().or(base_language);
    let (language_version, rest) = resolve_shorthand(keys.candidates, language)?;
    for (key, node) in rest {
        warnings.push(ParseWarning { line: node.line(), message: format!("unknown matrix key `{key}` ignored") });
    }
    Ok(MatrixEntry {
        os: keys.os,
        dist: keys.dist,
        language: keys.language,
        language_version,
        env_vars: keys.env,
    })
}

/// Parses and validates a config document, collecting non-fatal warnings.
pub fn parse_config(text: &str) -> Result<(PipelineConfig, Vec<ParseWarning>), ConfigError> {
    let doc = yaml::parse(text).map_err(ConfigError::Syntax)?;
    let entries = match doc {
        Node::Map { entries, .. } => entries,
        other => return invalid(format!("line {}: top level must be a mapping", other.line())),
    };

    let mut warnings = Vec::new();
    let mut keys = EnvKeys { os: None, dist: None, language: None, env: BTreeMap::new(), candidates: Vec::new() };
    let mut stages = StageScripts::default();
    let mut seen_run: Option<&str> = None;
    let mut matrix_nodes = Vec::new();
    let mut artifacts = ArtifactSpec::default();
    let mut timeout_minutes = DEFAULT_TIMEOUT_MINUTES;

    for (key, value) in &entries {
        if take_env_key(&mut keys, key, value)? {
            continue;
        }
        match key.as_str() {
            "install" | "build" | "test" | "deploy" | "run" | "script" | "report" => {
                let stage: Stage = key.parse().map_err(ConfigError::Validation)?;
                if stage == Stage::Run {
                    if let Some(prev) = seen_run {
                        return invalid(format!("both `{prev}` and `{key}` present; `script` is an alias for `run`"));
                    }
                    seen_run = Some(if key == "run" { "run" } else { "script" });
                }
                let commands = string_list(value, key)?;
                if commands.iter().any(|c| c.trim().is_empty()) {
                    return invalid(format!("line {}: `{key}` contains an empty command", value.line()));
                }
                *stages.get_mut(stage) = commands;
            }
            "matrix" => match value {
                Node::Null { .. } => {}
                Node::Seq { items, .. } => matrix_nodes = items.clone(),
                other => return invalid(format!("line {}: `matrix` must be a list of mappings", other.line())),
            },
            "artifacts" => {
                let patterns = string_list(value, "artifacts")?;
                for p in &patterns {
                    validate_pattern(p)?;
                }
                artifacts.patterns = patterns;
            }
            "timeout_minutes" => {
                let raw = scalar(value, "timeout_minutes")?;
                timeout_minutes = match raw.parse::<u32>() {
                    Ok(n) if n >= 1 => n,
                    _ => return invalid(format!("timeout_minutes must be an integer >= 1, found `{raw}`")),
                };
            }
            _ => keys.candidates.push((key.clone(), value.clone())),
        }
    }

    let (language_version, rest) = resolve_shorthand(keys.candidates, keys.language.as_deref())?;
    for (key, node) in rest {
        warnings.push(ParseWarning { line: node.line(), message: format!("unknown key `{key}` ignored") });
    }
    if stages.is_empty() {
        return invalid("no stage commands");
    }

    let base_env = EnvironmentSpec {
        os: keys.os.unwrap_or_default(),
        dist: keys.dist,
        language: keys.language,
        language_version,
        env_vars: keys.env,
    };
    let matrix = MatrixSpec {
        entries: matrix_nodes
            .iter()
            .map(|n| matrix_entry(n, base_env.language.as_deref(), &mut warnings))
            .collect::<Result<_, _>>()?,
    };
    let cfg = PipelineConfig { base_env, stages, matrix, artifacts, timeout_minutes };

    let envs: Vec<EnvironmentSpec> = cfg.matrix.entries.iter().map(|e| apply_entry(&cfg.base_env, e)).collect();
    for i in 0..envs.len() {
        for j in (i + 1)..envs.len() {
            if envs[i] == envs[j] {
                return invalid(format!("duplicate matrix entry: entries {i} and {j} expand to the same environment"));
            }
        }
    }
    Ok((cfg, warnings))
}

impl PipelineConfig {
    /// Parses, discarding warnings.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        parse_config(text).map(|(cfg, _)| cfg)
    }

    /// Canonical textual form; `parse(to_yaml())` reproduces `self`.
    pub fn to_yaml(&self) -> String {
        use yaml::quote;
        let mut out = String::new();
        let env_block = |out: &mut String, env: &BTreeMap<String, String>, indent: &str| {
            if env.is_empty() {
                return;
            }
            out.push_str(&format!("{indent}env:\n"));
            for (k, v) in env {
                out.push_str(&format!("{indent}  {k}: {}\n", quote(v)));
            }
        };
        let b = &self.base_env;
        out.push_str(&format!("os: {}\n", b.os));
        if let Some(d) = &b.dist {
            out.push_str(&format!("dist: {}\n", quote(d)));
        }
        if let Some(l) = &b.language {
            out.push_str(&format!("language: {}\n", quote(l)));
            if let Some(v) = &b.language_version {
                out.push_str(&format!("{}: {}\n", quote(l), quote(v)));
            }
        }
        env_block(&mut out, &b.env_vars, "");
        for stage in Stage::CONFIGURABLE {
            let cmds = self.stages.get(stage);
            if cmds.is_empty() {
                continue;
            }
            out.push_str(&format!("{stage}:\n"));
            for c in cmds {
                out.push_str(&format!("  - {}\n", quote(c)));
            }
        }
        if !self.matrix.entries.is_empty() {
            out.push_str("matrix:\n");
            for e in &self.matrix.entries {
                let mut lines = Vec::new();
                if let Some(os) = e.os {
                    lines.push(format!("os: {os}"));
                }
                if let Some(d) = &e.dist {
                    lines.push(format!("dist: {}", quote(d)));
                }
                if let Some(l) = &e.language {
                    lines.push(format!("language: {}", quote(l)));
                }
                if let Some(v) = &e.language_version {
                    let lang = e.language.as_ref().or(b.language.as_ref()).expect("version implies language");
                    lines.push(format!("{}: {}", quote(lang), quote(v)));
                }
                let mut env = String::new();
                env_block(&mut env, &e.env_vars, "    ");
                if lines.is_empty() && env.is_empty() {
                    out.push_str("  - {}\n");
                    continue;
                }
                let mut first = true;
                for l in lines {
                    out.push_str(if first { "  - " } else { "    " });
                    out.push_str(&l);
                    out.push('\n');
                    first = false;
                }
                if !env.is_empty() {
                    if first {
                        out.push_str("  - ");
                        out.push_str(env.trim_start());
                    } else {
                        out.push_str(&env);
                    }
                }
            }
        }
        if !self.artifacts.patterns.is_empty() {
            out.push_str("artifacts:\n");
            for p in &self.artifacts.patterns {
                out.push_str(&format!("  - {}\n", quote(p)));
            }
        }
        out.push_str(&format!("timeout_minutes: {}\n", self.timeout_minutes));
        out
    }
}

/// `[info]` followed by the configured stages with commands, in canonical order.
pub fn effective_stages(cfg: &PipelineConfig) -> Vec<Stage> {
    std::iter::once(Stage::Info)
        .chain(Stage::CONFIGURABLE.into_iter().filter(|s| !cfg.stages.get(*s).is_empty()))
        .collect()
}

fn apply_entry(base: &EnvironmentSpec, entry: &MatrixEntry) -> EnvironmentSpec {
    let mut env = base.clone();
    if let Some(os) = entry.os {
        env.os = os;
    }
    if entry.dist.is_some() {
        env.dist = entry.dist.clone();
    }
    if entry.language.is_some() && entry.language != base.language {
        // A different toolchain does not inherit the base version pin.
        env.language = entry.language.clone();
        env.language_version = None;
    }
    if entry.language_version.is_some() {
        env.language_version = entry.language_version.clone();
    }
    for (k, v) in &entry.env_vars {
        env.env_vars.insert(k.clone(), v.clone());
    }
    env
}

/// One job per matrix entry (or one job for an empty matrix).
pub fn expand_matrix(cfg: &PipelineConfig) -> Vec<JobSpec> {
    let stage_plan: Vec<PlannedStage> = Stage::CONFIGURABLE
        .into_iter()
        .filter(|s| !cfg.stages.get(*s).is_empty())
        .map(|stage| PlannedStage { stage, commands: cfg.stages.get(stage).to_vec() })
        .collect();
    let envs: Vec<EnvironmentSpec> = if cfg.matrix.entries.is_empty() {
        vec![cfg.base_env.clone()]
    } else {
        cfg.matrix.entries.iter().map(|e| apply_entry(&cfg.base_env, e)).collect()
    };
    envs.into_iter()
        .enumerate()
        .map(|(i, env)| JobSpec {
            env,
            stage_plan: stage_plan.clone(),
            artifacts: cfg.artifacts.clone(),
            timeout_minutes: cfg.timeout_minutes,
            matrix_index: i as u32,
        })
        .collect()
}

#[cfg(test)]
mod tests;
