//! Run configuration: a TOML file plus `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelio::{
    EndpointConfig, FinetuneHyperparams, ModelRole, SimConfig, TokenCap, Transport,
};
use crate::scoring::ScorerKind;
use crate::selection::SelectionConfig;
use crate::synthgen::{DatasetKind, GenerationParams, DEFAULT_DEDUP_THRESHOLD};
use crate::util::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    BoxedMatch,
    Arithmetic24,
    LlmJudge,
}

/// Corpus locations. Missing corpora are generated by the simulator when
/// every endpoint is simulated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub seed: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSection {
    #[serde(flatten)]
    pub world: SimConfig,
    pub seed_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            world: SimConfig::default(),
            seed_size: 500,
            validation_size: 200,
            test_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointsConfig {
    pub teacher: EndpointConfig,
    pub student: EndpointConfig,
    pub reward: Option<EndpointConfig>,
    pub judge: Option<EndpointConfig>,
}

impl Default for EndpointsConfig {
    fn default() -> Self {
        EndpointsConfig {
            teacher: EndpointConfig::simulated(),
            student: EndpointConfig::simulated(),
            reward: None,
            judge: None,
        }
    }
}

impl EndpointsConfig {
    pub fn all_simulated(&self) -> bool {
        [
            Some(&self.teacher),
            Some(&self.student),
            self.reward.as_ref(),
            self.judge.as_ref(),
        ]
        .into_iter()
        .flatten()
        .all(|e| e.transport == Transport::Simulated)
    }
}

/// Everything a run needs. `selection.m` is the per-iteration batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Algorithm label used in reports.
    pub name: String,
    /// Dataset label used to group runs in reports.
    pub dataset_label: String,
    pub iterations: u32,
    /// Replicate seeds.
    pub seeds: Vec<u64>,
    pub scorer: ScorerKind,
    pub dataset: DatasetKind,
    pub templates_dir: Option<PathBuf>,
    pub few_shot_k: Option<usize>,
    pub verifier: VerifierKind,
    pub dedup: bool,
    pub dedup_threshold: f64,
    /// Upper bound on concurrent model calls.
    pub parallelism: usize,
    /// Charge reward-model tokens to the teacher budget.
    pub include_reward_tokens: bool,
    /// Score each synthesized child with the selecting student, for the
    /// fidelity analyses.
    pub score_children: bool,
    pub selection: SelectionConfig,
    /// Named fine-tune preset; explicit `finetune` fields are ignored when set.
    pub finetune_preset: Option<String>,
    pub finetune: FinetuneHyperparams,
    pub generation: GenerationParams,
    pub paths: PathsConfig,
    pub sim: SimSection,
    pub endpoints: EndpointsConfig,
    pub budget: BTreeMap<ModelRole, TokenCap>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            dataset_label: "sim".into(),
            iterations: 3,
            seeds: vec![0, 1, 2],
            scorer: ScorerKind::LossSelf,
            dataset: DatasetKind::Gsm8kStyle,
            templates_dir: None,
            few_shot_k: None,
            verifier: VerifierKind::BoxedMatch,
            dedup: true,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            parallelism: 8,
            include_reward_tokens: false,
            score_children: true,
            selection: SelectionConfig::default(),
            finetune_preset: None,
            finetune: FinetuneHyperparams::default(),
            generation: GenerationParams::default(),
            paths: PathsConfig {
                output: PathBuf::from("out"),
                ..Default::default()
            },
            sim: SimSection::default(),
            endpoints: EndpointsConfig::default(),
            budget: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Reads a configuration file, applies `key=value` overrides and
    /// validates. Relative paths in it, including the
    /// output directory, are taken relative to the file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        cfg.resolve_relative_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            Error::Config(format!("config is not valid TOML: {e}"))
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_relative_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.paths.seed,
            &mut self.paths.validation,
            &mut self.paths.test,
            &mut self.templates_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.paths.output);
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(0.0..=1.0).contains(&self.dedup_threshold) {
            return Err(Error::Config("dedup_threshold must lie in [0, 1]".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be >= 1".into()));
        }
        self.selection
            .validate()
            .map_err(|e| Error::Config(format!("selection: {e}")))?;
        self.sim.world.validate()?;
        self.finetune_hyperparams()?.validate()?;
        if self.generation.temperature < 0.0 {
            return Err(Error::Config("generation temperature must be >= 0".into()));
        }
        let needs_reward = matches!(self.scorer, ScorerKind::RewardSelf | ScorerKind::RewardGt);
        if needs_reward && self.endpoints.reward.is_none() {
            return Err(Error::Config(format!(
                "scorer {} needs endpoints.reward",
                self.scorer
            )));
        }
        if self.verifier == VerifierKind::LlmJudge {
            if self.endpoints.judge.is_none() {
                return Err(Error::Config(
                    "llm_judge verifier needs endpoints.judge".into(),
                ));
            }
            if !matches!(
                self.dataset,
                DatasetKind::Gsm8kStyle | DatasetKind::ProntoStyle
            ) {
                return Err(Error::Config(
                    "llm_judge verification is defined for gsm8k and pronto styles".into(),
                ));
            }
        }
        if !self.endpoints.all_simulated() {
            for (name, p) in [
                ("seed", &self.paths.seed),
                ("validation", &self.paths.validation),
                ("test", &self.paths.test),
            ] {
                if p.is_none() {
                    return Err(Error::Config(format!(
                        "paths.{name} is required with remote endpoints"
                    )));
                }
            }
        }
        if self.paths.output.as_os_str().is_empty() {
            return Err(Error::Config("paths.output must be set".into()));
        }
        Ok(())
    }

    pub fn finetune_hyperparams(&self) -> Result<FinetuneHyperparams> {
        match &self.finetune_preset {
            Some(name) => FinetuneHyperparams::preset(name),
            None => Ok(self.finetune.clone()),
        }
    }

    /// SHA-256 over the canonical JSON form of the configuration, leaving
    /// out the output directory, so a run can be moved, and the budget caps,
    /// so a stopped run can be resumed under a higher cap.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output = PathBuf::new();
        c.budget.clear();
        let value = serde_json::to_value(&c).expect("config serializes");
        sha256_hex(value.to_string().as_bytes())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}

/// Sets a dotted key in a TOML table. The value is parsed as a TOML value
/// when possible (numbers, booleans, arrays) and taken as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!(
            "override {assignment:?} has an empty key"
        )));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "loss-high"
iterations = 2
seeds = [1, 2]

[selection]
strategy = "argmax"
m = 10
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(c.iterations, 2);
        assert_eq!(c.selection.m, 10);
        assert_eq!(c.dedup_threshold, 0.7);
        assert!(c.endpoints.all_simulated());
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = RunConfig::from_toml_str(
            MINIMAL,
            &[
                "selection.m=5".into(),
                "seeds=[7]".into(),
                "sim.learning_rate=0.5".into(),
                "name=other".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.selection.m, 5);
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.sim.world.learning_rate, 0.5);
        assert_eq!(c.name, "other");
        assert!(RunConfig::from_toml_str(MINIMAL, &["nonsense".into()]).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for o in [
            "iterations=0",
            "seeds=[]",
            "seeds=[1,1]",
            "selection.m=0",
            "dedup_threshold=2.0",
            "typo=1",
        ] {
            assert!(
                RunConfig::from_toml_str(MINIMAL, &[o.to_string()]).is_err(),
                "{o}"
            );
        }
        assert!(RunConfig::from_toml_str(MINIMAL, &["scorer=\"reward_self\"".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_and_budget_and_tracks_seeds() {
        let a = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        let b = RunConfig::from_toml_str(MINIMAL, &["paths.output=\"elsewhere\"".into()]).unwrap();
        let c = RunConfig::from_toml_str(MINIMAL, &["seeds=[3]".into()]).unwrap();
        let d = RunConfig::from_toml_str(MINIMAL, &["budget.teacher.max_total=10".into()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), d.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let mut a = RunConfig::from_toml_str(MINIMAL, &[]).unwrap();
        a.budget.insert(
            ModelRole::Teacher,
            TokenCap {
                max_total: Some(100),
                ..Default::default()
            },
        );
        let text = a.to_toml().unwrap();
        let b = RunConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }
}
