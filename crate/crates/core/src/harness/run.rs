//! Seeded multi-run execution with CSV output and a run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AgentSpec, DreemSpec, ExperimentConfig};
use crate::agent::{
    greedy_q_run, neural_e3_run, with_env, EnvSpec, EnvVisitor, EpisodeRecord, ExplorationRule,
    NeuralE3Config, Phase,
};
use crate::dreem::{dreem_run, DreemResult};
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const CSV_HEADER: [&str; 5] = ["seed", "episode", "phase", "return", "wall_ms"];
pub const CODE_VERSION: &str = concat!("e3-core ", env!("CARGO_PKG_VERSION"));

/// Output location and execution overrides that are not part of the hashed
/// configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    /// Worker pool width; defaults to the available parallelism.
    pub threads: Option<usize>,
    /// Added to every configured seed.
    pub seed_offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    /// Generator streams derived from the seed: environment and agent.
    pub env_stream: u64,
    pub agent_stream: u64,
    pub rows: usize,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// SHA-256 of `config.json` as written next to the manifest.
    pub config_hash: String,
    pub code_version: String,
    pub agent: String,
    pub env: Option<String>,
    pub exploration_rule: Option<ExplorationRule>,
    /// Effective agent settings after overrides, for diffing runs.
    pub agent_config: serde_json::Value,
    pub seed_offset: u64,
    pub seeds: Vec<SeedEntry>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub status: RunStatus,
    pub csv: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub csv_path: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<EpisodeRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// Output directory: explicit option, then `E3_OUT_DIR`, then the config's
/// `output`, then `./out/<name>`.
pub fn resolve_out_dir(config: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os("E3_OUT_DIR").filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    config
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(&config.name))
}

/// Writes records as CSV with LF line endings.
pub fn write_records<W: Write>(records: &[EpisodeRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.seed.to_string(),
            r.episode.to_string(),
            r.phase.as_str().to_string(),
            format_return(r.ret),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest decimal that round-trips, with a `.` separator and at least
/// one fractional digit (`5.0`, `0.1`, `1e-7`).
pub fn format_return(x: f64) -> String {
    format!("{x:?}")
}

/// Runs every seed of the experiment on a worker pool and writes
/// `<name>.csv`, `config.json` and `manifest.json` into the output
/// directory. Rows are ordered by configured seed, then episode. If any seed
/// fails, the rows of the other seeds are still written, the manifest is
/// marked failed, and the first failure is returned.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    let started = unix_ms();
    let out_dir = resolve_out_dir(config, options.out_dir.as_deref());
    fs::create_dir_all(&out_dir)?;
    let config_bytes = config.canonical_bytes()?;
    fs::write(out_dir.join("config.json"), &config_bytes)?;

    let agent = config.effective_agent();
    let seeds: Vec<u64> = config
        .seeds
        .iter()
        .map(|s| s.wrapping_add(options.seed_offset))
        .collect();
    let threads = options
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build the worker pool: {e}")))?;
    let results: Vec<Result<SeedOutput>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_seed(config.env.as_ref(), &agent, seed))
            .collect()
    });

    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut first_error = None;
    for (&seed, res) in seeds.iter().zip(results) {
        match res {
            Ok(out) => {
                entries.push(SeedEntry {
                    seed,
                    env_stream: 0,
                    agent_stream: 1,
                    rows: out.records.len(),
                    status: RunStatus::Ok,
                    error: None,
                });
                records.extend(out.records);
                if let Some(result) = out.dreem {
                    fs::write(
                        out_dir.join(format!("dreem_seed{seed}.json")),
                        serde_json::to_vec_pretty(&result)?,
                    )?;
                }
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                entries.push(SeedEntry {
                    seed,
                    env_stream: 0,
                    agent_stream: 1,
                    rows: 0,
                    status: RunStatus::Failed,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(Error::AgentFailure {
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }

    let csv_name = format!("{}.csv", config.name);
    let csv_path = out_dir.join(&csv_name);
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    fs::write(&csv_path, buf)?;

    let exploration_rule = match &agent {
        AgentSpec::NeuralE3(_) => Some(ExplorationRule::Disagreement),
        AgentSpec::Ue2(_) | AgentSpec::OfflineQOnly(_) => Some(ExplorationRule::Uniform),
        _ => None,
    };
    let agent_config = match &agent {
        AgentSpec::NeuralE3(c) | AgentSpec::Ue2(c) | AgentSpec::OfflineQOnly(c) => {
            serde_json::to_value(c)?
        }
        AgentSpec::GreedyQ(c) => serde_json::to_value(c)?,
        AgentSpec::Dreem(d) => serde_json::to_value(d)?,
    };
    let manifest = RunManifest {
        name: config.name.clone(),
        config_hash: sha256_hex(&config_bytes),
        code_version: CODE_VERSION.into(),
        agent: agent.label().into(),
        env: config.env.as_ref().map(|e| e.label().into()),
        exploration_rule,
        agent_config,
        seed_offset: options.seed_offset,
        seeds: entries,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        status: if first_error.is_some() {
            RunStatus::Failed
        } else {
            RunStatus::Ok
        },
        csv: csv_name,
    };
    let manifest_path = out_dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(RunOutcome {
        csv_path,
        manifest_path,
        manifest,
        records,
    })
}

struct SeedOutput {
    records: Vec<EpisodeRecord>,
    dreem: Option<DreemResult>,
}

fn run_seed(env: Option<&EnvSpec>, agent: &AgentSpec, seed: u64) -> Result<SeedOutput> {
    let plain = |records| SeedOutput {
        records,
        dreem: None,
    };
    match agent {
        AgentSpec::Dreem(spec) => run_dreem_seed(env, spec, seed),
        other => {
            let env = env.ok_or_else(|| Error::Config("this agent needs an environment".into()))?;
            with_env(env, SeedVisitor { agent: other, seed }).map(plain)
        }
    }
}

struct SeedVisitor<'a> {
    agent: &'a AgentSpec,
    seed: u64,
}

impl EnvVisitor for SeedVisitor<'_> {
    type Output = Vec<EpisodeRecord>;

    fn visit<E: Environment + Clone>(self, env: &mut E) -> Result<Self::Output> {
        let (cfg, rule): (&NeuralE3Config, _) = match self.agent {
            AgentSpec::NeuralE3(c) => (c, ExplorationRule::Disagreement),
            AgentSpec::Ue2(c) | AgentSpec::OfflineQOnly(c) => (c, ExplorationRule::Uniform),
            AgentSpec::GreedyQ(c) => {
                return greedy_q_run(env, c, self.seed).map(|(records, _)| records)
            }
            AgentSpec::Dreem(_) => {
                return Err(Error::Config(
                    "dreem does not run on an episodic environment".into(),
                ))
            }
        };
        neural_e3_run(env, cfg, rule, self.seed).map(|r| r.records)
    }
}

/// One sampled rollout of each exploration policy in the truth (explore
/// rows), then `exploit_episodes` rollouts of the returned policy.
fn run_dreem_seed(env: Option<&EnvSpec>, spec: &DreemSpec, seed: u64) -> Result<SeedOutput> {
    let inst = spec.instance(env, seed)?;
    let result = dreem_run(
        &inst.class,
        &inst.policies,
        &inst.truth,
        &spec.dreem,
        &mut stream(seed, 1),
    )?;
    let mut env_rng = stream(seed, 0);
    let mut records = Vec::new();
    let mut push = |phase, ret| {
        records.push(EpisodeRecord {
            seed,
            episode: records.len(),
            phase,
            ret,
            wall_ms: 0,
        })
    };
    for round in &result.history {
        let t = inst
            .truth
            .rollout(&inst.policies[round.explore_policy], seed, &mut env_rng)?;
        push(Phase::Explore, t.total_reward());
    }
    for _ in 0..spec.exploit_episodes {
        let t = inst
            .truth
            .rollout(&result.exploit_policy, seed, &mut env_rng)?;
        push(Phase::Exploit, t.total_reward());
    }
    Ok(SeedOutput {
        records,
        dreem: Some(result),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(agent: &str, seeds: &str) -> ExperimentConfig {
        let json = format!(
            r#"{{
            "name": "tiny",
            "env": {{"name": "combolock", "horizon": 3}},
            "agent": {{"kind": "{agent}", "planner": {{"kind": "mcts", "playouts": 8, "samples_per_model": 2}},
                      "exploration_epochs": 4, "exploit_episodes": 6, "exploit": "planner",
                      "ensemble": {{"ensemble_size": 2, "stochastic": true, "hidden_sizes": [8],
                                   "updates_per_epoch": 3, "minibatch_size": 8}}}},
            "seeds": {seeds}
        }}"#
        );
        ExperimentConfig::from_json(json.as_bytes()).unwrap()
    }

    #[test]
    fn two_seeds_ten_episodes_twenty_rows() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            threads: Some(2),
            seed_offset: 0,
        };
        let out = run_experiment(&tiny("neural_e3", "[3, 1]"), &opts).unwrap();
        let text = fs::read_to_string(&out.csv_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "seed,episode,phase,return,wall_ms");
        assert_eq!(lines.len(), 21);
        assert!(lines[1].starts_with("3,0,explore,"));
        assert!(lines[11].starts_with("1,0,explore,"));
        assert!(!text.contains('\r'));
        let cfg_bytes = fs::read(dir.path().join("config.json")).unwrap();
        assert_eq!(out.manifest.config_hash, sha256_hex(&cfg_bytes));
        let m: RunManifest =
            serde_json::from_slice(&fs::read(&out.manifest_path).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Ok);
    }

    #[test]
    fn rerun_is_byte_identical_and_offset_shifts_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str, offset| {
            let opts = RunOptions {
                out_dir: Some(dir.path().join(sub)),
                threads: Some(1),
                seed_offset: offset,
            };
            fs::read(run_experiment(&tiny("ue2", "[0]"), &opts).unwrap().csv_path).unwrap()
        };
        assert_eq!(run("a", 0), run("b", 0));
        let shifted = String::from_utf8(run("c", 5)).unwrap();
        assert!(shifted.lines().nth(1).unwrap().starts_with("5,0,"));
    }

    #[test]
    fn ue2_and_neural_manifests_differ_only_in_rule() {
        let dir = tempfile::tempdir().unwrap();
        let m = |agent: &str| {
            let opts = RunOptions {
                out_dir: Some(dir.path().join(agent)),
                threads: Some(1),
                seed_offset: 0,
            };
            run_experiment(&tiny(agent, "[0]"), &opts).unwrap().manifest
        };
        let (a, b) = (m("neural_e3"), m("ue2"));
        assert_eq!(a.agent_config, b.agent_config);
        assert_ne!(a.exploration_rule, b.exploration_rule);
    }

    #[test]
    fn failing_seed_leaves_partial_csv_and_failed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{
            "name": "bad",
            "agent": {"kind": "dreem", "dreem": {"epsilon": 0.5, "phi": 0.01, "n": 10},
                      "truth": {"num_states": 2, "num_actions": 1, "horizon": 1,
                                "transitions": [[[0.0, 1.0]], [[0.0, 1.0]]], "rewards": [0.0, 1.0], "initial": 0},
                      "class": {"kind": "explicit", "models": [
                                {"num_states": 2, "num_actions": 1, "horizon": 1,
                                 "transitions": [[[1.0, 0.0]], [[0.0, 1.0]]], "rewards": [0.0, 1.0], "initial": 0},
                                {"num_states": 2, "num_actions": 1, "horizon": 1,
                                 "transitions": [[[0.5, 0.5]], [[0.0, 1.0]]], "rewards": [0.0, 1.0], "initial": 0}]}},
            "seeds": [0]
        }"#;
        let cfg = ExperimentConfig::from_json(json.as_bytes()).unwrap();
        let opts = RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        let err = run_experiment(&cfg, &opts).unwrap_err();
        assert!(matches!(err, Error::AgentFailure { seed: 0, .. }), "{err}");
        let text = fs::read_to_string(dir.path().join("bad.csv")).unwrap();
        assert_eq!(text, "seed,episode,phase,return,wall_ms\n");
        let m: RunManifest =
            serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert!(m.seeds[0].error.is_some());
    }

    #[test]
    fn return_formatting() {
        assert_eq!(format_return(5.0), "5.0");
        assert_eq!(format_return(0.1), "0.1");
        assert_eq!(format_return(-0.2), "-0.2");
        assert_eq!(format_return(1e-7), "1e-7");
    }
}
