//! Run configuration: built-in defaults, then a TOML file, then `CARELOOP_*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use careloop_core::agents::AgentConfig;
use careloop_core::backend::HttpConfig;
use careloop_core::bundler::BundlerConfig;
use careloop_core::eval::AliasTable;
use careloop_core::ingest::SchemaMap;
use careloop_core::reflector::{Phase1Config, DEFAULT_ID_PATTERN};

use crate::Failure;

pub const ENV_PREFIX: &str = "CARELOOP_";
/// Read by the HTTP backend; never layered into the config.
pub const API_KEY_ENV: &str = "CARELOOP_API_KEY";
pub const LOG_ENV: &str = "CARELOOP_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub http: HttpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Phase1Settings {
    pub reflection_budget: usize,
    pub id_patterns: Vec<String>,
}

impl Default for Phase1Settings {
    fn default() -> Self {
        Phase1Settings {
            reflection_budget: 2000,
            id_patterns: vec![DEFAULT_ID_PATTERN.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Groups of action strings scored as the same action.
    pub aliases: AliasTable,
    /// Score each prediction with the judge template on the same backend.
    pub judge: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub risk_vocab: Option<PathBuf>,
    /// Directory of `<role>.txt` files replacing the built-in templates.
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for synthetic corpus generation. Inference uses no randomness.
    pub seed: u64,
    pub workers: usize,
    pub backend: BackendSettings,
    pub agents: AgentConfig,
    pub bundler: BundlerConfig,
    pub phase1: Phase1Settings,
    pub eval: EvalSettings,
    pub schema: SchemaMap,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            workers: 1,
            backend: BackendSettings::default(),
            agents: AgentConfig::default(),
            bundler: BundlerConfig::default(),
            phase1: Phase1Settings::default(),
            eval: EvalSettings::default(),
            schema: SchemaMap::default(),
            paths: Paths::default(),
        }
    }
}

/// Flag values that override every other layer.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub backend: Option<BackendKind>,
    pub mock_script: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A TOML literal when the text parses as one, otherwise a plain string.
fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) -> Result<(), Failure> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let toml::Value::Table(table) = cur else {
            return Err(Failure::Config(format!("{} is not a table", path[..i].join("."))));
        };
        if i + 1 == path.len() {
            table.insert(key.clone(), value);
            return Ok(());
        }
        cur = table.entry(key.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Ok(())
}

/// `CARELOOP_AGENTS__TAU_UNCERTAINTY=0.5` sets `agents.tau_uncertainty`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(Vec<String>, toml::Value)> {
    let mut out: Vec<(Vec<String>, toml::Value)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != API_KEY_ENV && k != LOG_ENV)
        .map(|(k, v)| {
            let path = k[ENV_PREFIX.len()..].to_lowercase().split("__").map(str::to_string).collect();
            (path, env_value(&v))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

impl RunConfig {
    pub fn load(file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>, flags: &FlagOverrides) -> Result<Self, Failure> {
        let mut doc = toml::Value::try_from(RunConfig::default()).map_err(|e| Failure::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            let parsed: toml::Table = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, toml::Value::Table(parsed));
        }
        for (path, value) in env_overrides(env) {
            set_path(&mut doc, &path, value)?;
        }
        let mut cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Failure::Config(e.to_string()))?;
        if let Some(kind) = flags.backend {
            cfg.backend.kind = kind;
        }
        if let Some(script) = &flags.mock_script {
            cfg.backend.mock_script = Some(script.clone());
        }
        if let Some(w) = flags.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.agents.validate().map_err(|e| Failure::Config(e.to_string()))?;
        if self.bundler.window_hours <= 0 {
            return Err(Failure::Config("bundler.window_hours must be positive".into()));
        }
        if self.bundler.gap_threshold_hours < 0 {
            return Err(Failure::Config("bundler.gap_threshold_hours must be >= 0".into()));
        }
        if self.workers == 0 {
            return Err(Failure::Config("workers must be at least 1".into()));
        }
        if self.phase1.reflection_budget == 0 {
            return Err(Failure::Config("phase1.reflection_budget must be positive".into()));
        }
        let paths = [
            ("paths.risk_vocab", self.paths.risk_vocab.as_ref()),
            ("paths.templates", self.paths.templates.as_ref()),
            ("backend.mock_script", self.backend.mock_script.as_ref()),
        ];
        for (name, p) in paths {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Failure::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn phase1_config(&self) -> Phase1Config {
        Phase1Config {
            reflection_budget: self.phase1.reflection_budget,
            id_patterns: self.phase1.id_patterns.clone(),
            workers: self.workers,
            aliases: self.eval.aliases.clone(),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::load(None, vars(&[]), &FlagOverrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = std::env::temp_dir().join(format!("careloop-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.toml");
        std::fs::write(&file, "workers = 2\n[agents]\ntau_uncertainty = 0.9\nl_limit = 10\n").unwrap();
        let env = vars(&[("CARELOOP_AGENTS__TAU_UNCERTAINTY", "0.5"), ("CARELOOP_API_KEY", "secret"), ("OTHER", "x")]);
        let flags = FlagOverrides {
            workers: Some(3),
            ..FlagOverrides::default()
        };
        let cfg = RunConfig::load(Some(&file), env, &flags).unwrap();
        assert_eq!(cfg.agents.tau_uncertainty, 0.5);
        assert_eq!(cfg.agents.l_limit, 10);
        assert_eq!(cfg.workers, 3);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = [
            vec![("CARELOOP_AGENTS__TAU_UNCERTAINTY", "-1")],
            vec![("CARELOOP_AGENTS__BUDGETS__RULES", "0")],
            vec![("CARELOOP_NO_SUCH_KEY", "1")],
            vec![("CARELOOP_PATHS__RISK_VOCAB", "\"/nonexistent/vocab.txt\"")],
        ];
        for env in bad {
            let err = RunConfig::load(None, vars(&env), &FlagOverrides::default()).unwrap_err();
            assert!(matches!(err, Failure::Config(_)), "{env:?}: {err}");
        }
    }

    #[test]
    fn bare_env_strings_are_accepted() {
        let env = vars(&[("CARELOOP_BACKEND__HTTP__MODEL", "llama-3-70b")]);
        let cfg = RunConfig::load(None, env, &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.backend.http.model, "llama-3-70b");
    }
}
