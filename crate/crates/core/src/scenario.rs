//! Scripted scenarios: a frame timeline, scheduled user turns, a scorer
//! script and optional gold annotations, stored as one JSON file each.
//!
//! Two scenarios ship with the crate (`cooking-demo`, `magqa-demo`); more
//! can be loaded from a directory of `*.json` files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, EngineError, FrameTimeline, SessionConfig, SessionResult, TimedMessage};
use crate::metrics::{GoldAnswer, StepSpan};
use crate::policy::PolicyConfig;
use crate::scorer::{ScorerError, ScriptedScorer, ScriptedScript};
use crate::Scalar;

const BUNDLED: [&str; 2] = [
    include_str!("../resources/scenarios/cooking-demo.json"),
    include_str!("../resources/scenarios/magqa-demo.json"),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("scenario `{id}`: {reason}")]
    Invalid { id: String, reason: String },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGold {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<StepSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<GoldAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Scenario<T> {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub fps: f64,
    pub frame_count: usize,
    #[serde(default)]
    pub user_turns: Vec<TimedMessage>,
    /// Policy used when the caller does not pick one.
    pub policy: PolicyConfig<T>,
    #[serde(default = "default_true")]
    pub include_responses_in_context: bool,
    pub script: ScriptedScript<T>,
    #[serde(default)]
    pub gold: ScenarioGold,
}

fn default_true() -> bool {
    true
}

/// Summary row for listings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioInfo {
    pub id: String,
    pub title: String,
    pub fps: f64,
    pub frame_count: usize,
    pub policy: String,
}

impl<T: Scalar> Scenario<T> {
    pub fn from_json(json: &str, origin: &str) -> Result<Self, ScenarioError> {
        let scenario: Self = serde_json::from_str(json).map_err(|source| ScenarioError::Parse {
            path: origin.to_owned(),
            source,
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |reason: String| ScenarioError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.frame_count == 0 {
            return Err(invalid("no frames".into()));
        }
        if self.script.frames.len() < self.frame_count {
            return Err(invalid(format!(
                "script covers {} of {} frames",
                self.script.frames.len(),
                self.frame_count
            )));
        }
        if self.user_turns.windows(2).any(|w| w[0].time > w[1].time) {
            return Err(invalid("user turns are not sorted by time".into()));
        }
        self.script.validate()?;
        self.session_config(self.policy).validate()?;
        Ok(())
    }

    /// Frames at `k / fps`, payload ids `{id}/frame_{k:04}.jpg`.
    pub fn timeline(&self) -> FrameTimeline {
        FrameTimeline::uniform(self.frame_count, self.fps, |k| {
            format!("{}/frame_{k:04}.jpg", self.id)
        })
    }

    pub fn scorer(&self) -> ScriptedScorer<T> {
        ScriptedScorer::new(self.script.clone()).expect("validated on load")
    }

    pub fn session_config(&self, policy: PolicyConfig<T>) -> SessionConfig<T> {
        let mut config = SessionConfig::new(self.fps, policy);
        config.include_responses_in_context = self.include_responses_in_context;
        config
    }

    /// Runs the whole scenario under `policy` (the scenario default if `None`).
    pub fn run(&self, policy: Option<PolicyConfig<T>>) -> Result<SessionResult<T>, ScenarioError> {
        let config = self.session_config(policy.unwrap_or(self.policy));
        let mut scorer = self.scorer();
        Ok(engine::run_session(
            &self.timeline(),
            self.user_turns.clone(),
            &mut scorer,
            config,
        )?)
    }

    pub fn info(&self) -> ScenarioInfo {
        ScenarioInfo {
            id: self.id.clone(),
            title: self.title.clone(),
            fps: self.fps,
            frame_count: self.frame_count,
            policy: self.policy.to_string(),
        }
    }
}

/// Scenarios by id.
#[derive(Debug, Clone, Default)]
pub struct ScenarioLibrary<T> {
    scenarios: BTreeMap<String, Scenario<T>>,
}

impl<T: Scalar> ScenarioLibrary<T> {
    pub fn bundled() -> Self {
        let mut lib = Self {
            scenarios: BTreeMap::new(),
        };
        for json in BUNDLED {
            lib.insert(Scenario::from_json(json, "bundled").expect("bundled scenarios are valid"));
        }
        lib
    }

    /// Adds every `*.json` file in `dir`, replacing scenarios with the same id.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, ScenarioError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
        paths.sort();
        for path in &paths {
            let json = std::fs::read_to_string(path)?;
            self.insert(Scenario::from_json(&json, &path.display().to_string())?);
        }
        Ok(paths.len())
    }

    pub fn insert(&mut self, scenario: Scenario<T>) {
        self.scenarios.insert(scenario.id.clone(), scenario);
    }

    pub fn get(&self, id: &str) -> Result<&Scenario<T>, ScenarioError> {
        self.scenarios
            .get(id)
            .ok_or_else(|| ScenarioError::UnknownScenario(id.to_owned()))
    }

    pub fn list(&self) -> Vec<ScenarioInfo> {
        self.scenarios.values().map(Scenario::info).collect()
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_load() {
        let lib = ScenarioLibrary::<f64>::bundled();
        let ids: Vec<_> = lib.list().into_iter().map(|i| i.id).collect();
        assert_eq!(ids, ["cooking-demo", "magqa-demo"]);
        let cooking = lib.get("cooking-demo").unwrap();
        assert_eq!(cooking.timeline().len(), 40);
        assert_eq!(cooking.gold.steps.len(), 5);
        assert!(!cooking.include_responses_in_context);
        assert_eq!(lib.get("magqa-demo").unwrap().gold.answers.len(), 3);
        assert!(matches!(lib.get("nope"), Err(ScenarioError::UnknownScenario(_))));
    }

    #[test]
    fn bundled_scenarios_load_as_f32() {
        let lib = ScenarioLibrary::<f32>::bundled();
        let result = lib.get("cooking-demo").unwrap().run(None).unwrap();
        assert_eq!(result.model_turns.len(), 6);
    }

    #[test]
    fn validation() {
        let base = ScenarioLibrary::<f64>::bundled().get("magqa-demo").unwrap().clone();
        let mut s = base.clone();
        s.frame_count = 31;
        assert!(matches!(s.validate(), Err(ScenarioError::Invalid { .. })));
        let mut s = base.clone();
        s.fps = 0.0;
        assert!(s.validate().is_err());
        let mut s = base;
        s.user_turns.push(TimedMessage::new(0.0, "late but early"));
        assert!(s.validate().is_err());
    }

    #[test]
    fn load_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ScenarioLibrary::<f64>::bundled().get("magqa-demo").unwrap().clone();
        s.title = "replaced".into();
        std::fs::write(dir.path().join("a.json"), serde_json::to_string(&s).unwrap()).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let mut lib = ScenarioLibrary::<f64>::bundled();
        assert_eq!(lib.load_dir(dir.path()).unwrap(), 1);
        assert_eq!(lib.get("magqa-demo").unwrap().title, "replaced");
        assert_eq!(lib.len(), 2);
    }
}
