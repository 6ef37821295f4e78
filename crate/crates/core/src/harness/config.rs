//! Experiment configuration documents and their validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::agent::{EnvSpec, GreedyQConfig, NeuralE3Config};
use crate::dreem::{open_loop_plus_optimal, perturbed_class, DreemConfig};
use crate::envs::Combolock;
use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::misfit::ModelClass;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label used for output file names.
    #[serde(default = "default_name")]
    pub name: String,
    /// Required for every agent except `dreem` with an explicit truth.
    #[serde(default)]
    pub env: Option<EnvSpec>,
    pub agent: AgentSpec,
    pub seeds: Vec<u64>,
    /// Number of exploration-phase episodes (rounds for `dreem`); overrides
    /// the agent's own setting when present.
    #[serde(default)]
    pub episode_budget: Option<usize>,
    /// Output directory; the command line and `E3_OUT_DIR` take precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    /// Disagreement-driven exploration.
    NeuralE3(NeuralE3Config),
    /// Uniform exploration, otherwise identical to `neural_e3`.
    Ue2(NeuralE3Config),
    /// Uniform exploration without model training, then offline Q.
    OfflineQOnly(NeuralE3Config),
    /// Online ε-greedy Q-learning.
    GreedyQ(GreedyQConfig),
    Dreem(DreemSpec),
}

impl AgentSpec {
    pub fn label(&self) -> &'static str {
        match self {
            AgentSpec::NeuralE3(_) => "neural_e3",
            AgentSpec::Ue2(_) => "ue2",
            AgentSpec::OfflineQOnly(_) => "offline_q_only",
            AgentSpec::GreedyQ(_) => "greedy_q",
            AgentSpec::Dreem(_) => "dreem",
        }
    }
}

/// A DREEM instance: the truth, the candidate model class and the policy
/// class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DreemSpec {
    pub dreem: DreemConfig,
    /// Explicit truth; otherwise the latent model of a combination lock
    /// given as the experiment's environment.
    #[serde(default)]
    pub truth: Option<TabularMdp>,
    #[serde(default)]
    pub class: ClassSpec,
    #[serde(default)]
    pub policies: PolicyClassSpec,
    /// Rollouts of the returned policy recorded as exploit episodes.
    #[serde(default = "default_exploit_rollouts")]
    pub exploit_episodes: usize,
}

fn default_exploit_rollouts() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassSpec {
    /// The truth at index 0 plus `count` random perturbations, drawn per
    /// seed.
    Perturbed {
        count: usize,
        #[serde(default = "default_max_rows")]
        max_rows: usize,
    },
    Explicit {
        models: Vec<TabularMdp>,
        #[serde(default)]
        truth_index: Option<usize>,
    },
}

fn default_max_rows() -> usize {
    2
}

impl Default for ClassSpec {
    fn default() -> Self {
        ClassSpec::Perturbed {
            count: 30,
            max_rows: default_max_rows(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyClassSpec {
    /// Every open-loop action sequence.
    OpenLoop,
    /// Open-loop sequences plus each model's optimal policy.
    #[default]
    OpenLoopPlusOptimal,
}

/// A materialized DREEM instance.
#[derive(Debug, Clone)]
pub struct DreemInstance {
    pub truth: TabularMdp,
    pub class: ModelClass,
    pub policies: Vec<Policy>,
}

impl DreemSpec {
    /// Builds the instance; perturbed classes depend on `seed`.
    pub fn instance(&self, env: Option<&EnvSpec>, seed: u64) -> Result<DreemInstance> {
        let truth = match (&self.truth, env) {
            (Some(t), _) => t.clone(),
            (None, Some(EnvSpec::Combolock(c))) => {
                Combolock::new(c.clone())?.true_tabular_model()?
            }
            (None, _) => {
                return Err(Error::Schema {
                    path: "agent.truth".into(),
                    message: "dreem needs an explicit truth or a combolock environment".into(),
                })
            }
        };
        let class = match &self.class {
            ClassSpec::Perturbed { count, max_rows } => {
                perturbed_class(&truth, *count, *max_rows, &mut stream(seed, 2))?
            }
            ClassSpec::Explicit {
                models,
                truth_index,
            } => {
                let class = ModelClass::new(models.clone(), *truth_index)?;
                if !class.get(0).compatible(&truth) {
                    return Err(Error::Schema {
                        path: "agent.class.models".into(),
                        message: "models do not match the truth's dimensions".into(),
                    });
                }
                class
            }
        };
        let policies = match self.policies {
            PolicyClassSpec::OpenLoop => {
                Policy::all_open_loop(truth.num_actions(), truth.horizon())
            }
            PolicyClassSpec::OpenLoopPlusOptimal => {
                open_loop_plus_optimal(&class, truth.rewards())?
            }
        };
        Ok(DreemInstance {
            truth,
            class,
            policies,
        })
    }
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses a JSON document, reporting the path of the first offending
    /// field, then checks the semantic constraints.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization; the manifest hash is taken over these bytes.
    pub fn canonical_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(schema("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(schema("seeds", "seeds must be distinct"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(schema("name", "name must be a non-empty file name"));
        }
        match &self.agent {
            AgentSpec::NeuralE3(c) | AgentSpec::Ue2(c) | AgentSpec::OfflineQOnly(c) => {
                c.validate().map_err(|e| schema("agent", e.to_string()))?;
                if let Some(b) = self.episode_budget {
                    if b % c.episodes_per_epoch != 0 {
                        return Err(schema(
                            "episode_budget",
                            format!(
                                "{b} is not a multiple of episodes_per_epoch {}",
                                c.episodes_per_epoch
                            ),
                        ));
                    }
                }
            }
            AgentSpec::GreedyQ(c) => {
                c.q.validate()
                    .map_err(|e| schema("agent.q", e.to_string()))?
            }
            AgentSpec::Dreem(d) => d
                .dreem
                .validate()
                .map_err(|e| schema("agent.dreem", e.to_string()))?,
        }
        let needs_env = !matches!(&self.agent, AgentSpec::Dreem(d) if d.truth.is_some());
        if needs_env && self.env.is_none() {
            return Err(schema(
                "env",
                format!("agent {} needs an environment", self.agent.label()),
            ));
        }
        if let (AgentSpec::Dreem(d), Some(env)) = (&self.agent, &self.env) {
            if d.truth.is_none() && !matches!(env, EnvSpec::Combolock(_)) {
                return Err(schema(
                    "env",
                    "dreem derives its truth only from a combolock",
                ));
            }
        }
        Ok(())
    }

    /// The agent configuration with the episode budget applied.
    pub fn effective_agent(&self) -> AgentSpec {
        let mut agent = self.agent.clone();
        if let Some(b) = self.episode_budget {
            match &mut agent {
                AgentSpec::NeuralE3(c) | AgentSpec::Ue2(c) | AgentSpec::OfflineQOnly(c) => {
                    c.exploration_epochs = b / c.episodes_per_epoch;
                }
                AgentSpec::GreedyQ(c) => c.episodes = b,
                AgentSpec::Dreem(d) => d.dreem.round_cap = Some(b),
            }
        }
        if let AgentSpec::OfflineQOnly(c) = &mut agent {
            c.skip_model_training = true;
        }
        agent
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOCK_NEURAL: &str = r#"{
        "env": {"name": "combolock", "horizon": 3},
        "agent": {"kind": "neural_e3", "planner": {"kind": "mcts", "playouts": 10, "samples_per_model": 2},
                  "exploration_epochs": 2},
        "seeds": [0, 1]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_json(LOCK_NEURAL.as_bytes()).unwrap();
        assert_eq!(cfg.agent.label(), "neural_e3");
        let again = ExperimentConfig::from_json(&cfg.canonical_bytes().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let bad = LOCK_NEURAL.replace("\"exploration_epochs\"", "\"explore_epochs\"");
        match ExperimentConfig::from_json(bad.as_bytes()) {
            Err(Error::Schema { path, message }) => {
                assert!(path.starts_with("agent"), "{path}");
                assert!(message.contains("explore_epochs"), "{message}");
            }
            other => panic!("expected a schema error, got {other:?}"),
        }
        let bad = LOCK_NEURAL.replace("\"horizon\": 3", "\"horizon\": 3, \"colour\": 1");
        assert!(matches!(
            ExperimentConfig::from_json(bad.as_bytes()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn semantic_errors_are_schema_errors() {
        let bad = LOCK_NEURAL.replace("[0, 1]", "[]");
        assert!(
            matches!(ExperimentConfig::from_json(bad.as_bytes()), Err(Error::Schema { path, .. }) if path == "seeds")
        );
        let bad = LOCK_NEURAL.replace("[0, 1]", "[1, 1]");
        assert!(matches!(
            ExperimentConfig::from_json(bad.as_bytes()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn budget_overrides_epochs_and_q_only_skips_training() {
        let mut cfg = ExperimentConfig::from_json(LOCK_NEURAL.as_bytes()).unwrap();
        cfg.episode_budget = Some(7);
        match cfg.effective_agent() {
            AgentSpec::NeuralE3(c) => assert_eq!(c.exploration_epochs, 7),
            _ => unreachable!(),
        }
        let q_only = LOCK_NEURAL.replace("neural_e3", "offline_q_only");
        let cfg = ExperimentConfig::from_json(q_only.as_bytes()).unwrap();
        match cfg.effective_agent() {
            AgentSpec::OfflineQOnly(c) => assert!(c.skip_model_training),
            _ => unreachable!(),
        }
    }

    #[test]
    fn dreem_instance_from_lock() {
        let json = r#"{
            "env": {"name": "combolock", "horizon": 2, "noise_bits": 0},
            "agent": {"kind": "dreem", "dreem": {"epsilon": 0.5, "phi": 0.01, "n": 10},
                      "class": {"kind": "perturbed", "count": 3}},
            "seeds": [4]
        }"#;
        let cfg = ExperimentConfig::from_json(json.as_bytes()).unwrap();
        let AgentSpec::Dreem(d) = &cfg.agent else {
            unreachable!()
        };
        let inst = d.instance(cfg.env.as_ref(), 4).unwrap();
        assert_eq!(inst.class.len(), 4);
        assert_eq!(inst.class.get(0), &inst.truth);
        assert!(inst.policies.len() >= 16);
    }
}
