//! Experiment configuration, sweeps and seed splitting.
//!
//! Configs are TOML (or JSON, chosen by file extension). Every field has a
//! default, so a config file only lists what it changes.
//!
//! Seeds: agent `i` of an experiment trains with `derive_seed(seed, i)`.
//! Sweep point `j` replaces the master seed by
//! `derive_seed(seed, SWEEP_STREAM + j)`, so adding agents or sweep values
//! never changes the seeds of existing ones.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{Activation, PolicyConfig, PolicyParams};
use crate::channel::{ChannelConfig, ChannelMode, Mutation, Permutation, TemperatureSchedule};
use crate::error::{Error, Result};
use crate::evaluation::{mean_std, metrics, zcp, MetricsReport, ZcpReport};
use crate::optim::RmsPropConfig;
use crate::seeds::derive_seed;
use crate::training::{LossSet, TrainConfig};

pub const SWEEP_STREAM: u64 = 1 << 32;
/// Evaluation of agent `i` uses `derive_seed(seed, EVAL_STREAM + i)`; ZCP uses `EVAL_STREAM - 1`.
pub const EVAL_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// Mutation probability; kind mutation unless the base config says unkind.
    #[serde(alias = "mutation-probability")]
    MutationProbability,
    /// Permutation subset size.
    #[serde(alias = "permutation-subset")]
    PermutationSubset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub agents_per_value: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub classes: usize,
    pub vocab: usize,
    pub loss_set: LossSet,
    pub mutation: Mutation,
    pub permutation: Permutation,
    pub n_agents: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: TemperatureSchedule,
    pub noise_std: f64,
    pub activation: Activation,
    pub dense_units: usize,
    pub lstm_units: usize,
    pub seed: u64,
    /// Self-play games per epoch for the training history.
    pub eval_episodes: usize,
    /// Episodes for each responsiveness and diversity estimate.
    pub metric_episodes: usize,
    /// Games per role assignment in each stranger encounter.
    pub zcp_games: usize,
    pub out: Option<PathBuf>,
    pub sweep: Option<SweepSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            classes: 3,
            vocab: 5,
            loss_set: LossSet::Ac,
            mutation: Mutation::Off,
            permutation: Permutation::Off,
            n_agents: 3,
            epochs: 300,
            steps_per_epoch: 50,
            batch_size: 32,
            learning_rate: 0.01,
            schedule: TemperatureSchedule::default(),
            noise_std: 0.5,
            activation: Activation::Relu,
            dense_units: 128,
            lstm_units: 64,
            seed: 0,
            eval_episodes: 256,
            metric_episodes: 1000,
            zcp_games: 170,
            out: None,
            sweep: None,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(field_err(field, format!("must be in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_schedule(s: &TemperatureSchedule) -> Result<()> {
    match *s {
        TemperatureSchedule::Fixed { temperature } if !(temperature > 0.0) => Err(field_err(
            "schedule.temperature",
            format!("must be > 0, got {temperature}"),
        )),
        TemperatureSchedule::Anneal { start, end, epochs } => {
            if !(start > 0.0) || !(end > 0.0) {
                return Err(field_err(
                    "schedule",
                    format!("temperatures must be > 0, got {start} -> {end}"),
                ));
            }
            if epochs == 0 {
                return Err(field_err("schedule.epochs", "must be >= 1"));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    /// No randomization, `L_AC`.
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            ..Self::default()
        }
    }

    /// Kind mutation with probability `p`, trained on `L_SIC + L_TM + L_PD`.
    pub fn mutation(p: f64) -> Self {
        Self {
            name: format!("mutation-{p}"),
            loss_set: LossSet::SicTmPd,
            mutation: Mutation::Kind { probability: p },
            ..Self::default()
        }
    }

    /// Subset permutation of size `k` with the standard temperature anneal.
    pub fn permutation(k: usize) -> Self {
        Self {
            name: format!("permutation-{k}"),
            permutation: Permutation::Subset { size: k },
            schedule: TemperatureSchedule::standard_anneal(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config is always serializable");
        hex_digest(&json)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(field_err(
                "classes",
                format!("must be >= 2, got {}", self.classes),
            ));
        }
        if self.vocab < 1 {
            return Err(field_err("vocab", "must be >= 1"));
        }
        for (field, v) in [
            ("n_agents", self.n_agents),
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("dense_units", self.dense_units),
            ("lstm_units", self.lstm_units),
            ("eval_episodes", self.eval_episodes),
            ("metric_episodes", self.metric_episodes),
            ("zcp_games", self.zcp_games),
        ] {
            if v < 1 {
                return Err(field_err(field, "must be >= 1"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(field_err(
                "learning_rate",
                format!("must be > 0, got {}", self.learning_rate),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(field_err(
                "noise_std",
                format!("must be >= 0, got {}", self.noise_std),
            ));
        }
        check_probability("mutation.probability", self.mutation.probability())?;
        if let Permutation::Subset { size } = self.permutation {
            if size > self.vocab {
                return Err(field_err(
                    "permutation.size",
                    format!("{size} exceeds vocab {}", self.vocab),
                ));
            }
        }
        if self.mutation != Mutation::Off && self.permutation != Permutation::Off {
            return Err(field_err(
                "permutation",
                "mutation and permutation cannot both be enabled",
            ));
        }
        check_schedule(&self.schedule)?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(field_err("sweep.values", "must not be empty"));
            }
            if sweep.agents_per_value < 1 {
                return Err(field_err("sweep.agents_per_value", "must be >= 1"));
            }
            for &v in &sweep.values {
                match sweep.parameter {
                    SweepParameter::MutationProbability => {
                        check_probability("sweep.values", v)?;
                        if self.permutation != Permutation::Off {
                            return Err(field_err(
                                "sweep",
                                "a mutation sweep needs permutation off",
                            ));
                        }
                    }
                    SweepParameter::PermutationSubset => {
                        if v < 0.0 || v.fract() != 0.0 || v as usize > self.vocab {
                            return Err(field_err(
                                "sweep.values",
                                format!(
                                    "subset sizes must be integers in 0..={}, got {v}",
                                    self.vocab
                                ),
                            ));
                        }
                        if self.mutation != Mutation::Off {
                            return Err(field_err(
                                "sweep",
                                "a permutation sweep needs mutation off",
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn agent_seed(&self, agent: usize) -> u64 {
        derive_seed(self.seed, agent as u64)
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig {
            dense_units: self.dense_units,
            lstm_units: self.lstm_units,
            ..PolicyConfig::standard(self.classes, self.vocab, self.activation)
                .expect("validated classes")
        }
    }

    pub fn channel(&self) -> ChannelConfig {
        ChannelConfig {
            vocab: self.vocab,
            temperature: 1.0,
            noise_std: self.noise_std,
            mode: ChannelMode::Training,
            mutation: self.mutation,
            permutation: self.permutation,
        }
    }

    pub fn train_config(&self, agent: usize) -> TrainConfig {
        TrainConfig {
            policy: self.policy(),
            loss_set: self.loss_set,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            optimizer: RmsPropConfig {
                learning_rate: self.learning_rate,
                ..RmsPropConfig::default()
            },
            channel: self.channel(),
            schedule: self.schedule,
            eval_episodes: self.eval_episodes,
            seed: self.agent_seed(agent),
        }
    }

    /// One config per sweep value, or just this config without a sweep.
    pub fn expand(&self) -> Vec<SweepPoint> {
        let Some(sweep) = &self.sweep else {
            return vec![SweepPoint {
                value: None,
                config: Self {
                    sweep: None,
                    ..self.clone()
                },
            }];
        };
        sweep
            .values
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let mut c = Self {
                    sweep: None,
                    n_agents: sweep.agents_per_value,
                    seed: derive_seed(self.seed, SWEEP_STREAM + j as u64),
                    ..self.clone()
                };
                match sweep.parameter {
                    SweepParameter::MutationProbability => {
                        c.mutation = match self.mutation {
                            Mutation::Unkind { .. } => Mutation::Unkind { probability: v },
                            _ => Mutation::Kind { probability: v },
                        };
                        c.name = format!("{}-pm{v}", self.name);
                    }
                    SweepParameter::PermutationSubset => {
                        c.permutation = Permutation::Subset { size: v as usize };
                        c.name = format!("{}-k{v}", self.name);
                    }
                }
                SweepPoint {
                    value: Some(v),
                    config: c,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub value: Option<f64>,
    pub config: ExperimentConfig,
}

/// Metrics of every agent at one experiment point, plus cross-play.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub name: String,
    pub value: Option<f64>,
    pub agents: Vec<MetricsReport>,
    pub zcp: Option<ZcpReport>,
    pub selfplay_mean: f64,
    pub selfplay_std: f64,
    pub r_s: f64,
    pub r_t: f64,
    pub p_d: f64,
}

impl PointSummary {
    pub fn zcp_mean(&self) -> Option<f64> {
        self.zcp.as_ref().map(|z| z.mean)
    }

    pub fn zcp_std(&self) -> Option<f64> {
        self.zcp.as_ref().map(|z| z.std)
    }
}

/// Evaluates trained agents of one point. Self-play uses the training channel.
pub fn evaluate_point(
    config: &ExperimentConfig,
    value: Option<f64>,
    agents: &[PolicyParams<f32>],
) -> Result<PointSummary> {
    if agents.is_empty() {
        return Err(Error::Usage("no agents to evaluate".into()));
    }
    let channel = config.channel();
    let reports = agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            metrics(
                a,
                &channel,
                config.metric_episodes,
                derive_seed(config.seed, EVAL_STREAM + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let zcp = if agents.len() >= 2 {
        Some(zcp(
            agents,
            config.zcp_games,
            derive_seed(config.seed, EVAL_STREAM - 1),
        )?)
    } else {
        None
    };
    let mean =
        |f: fn(&MetricsReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>()).0;
    let (selfplay_mean, selfplay_std) = mean_std(
        &reports
            .iter()
            .map(|r| r.selfplay_accuracy)
            .collect::<Vec<_>>(),
    );
    let agents = reports
        .iter()
        .map(|r| MetricsReport {
            zcp_mean: zcp.as_ref().map(|z| z.mean),
            zcp_std: zcp.as_ref().map(|z| z.std),
            ..r.clone()
        })
        .collect();
    Ok(PointSummary {
        name: config.name.clone(),
        value,
        r_s: mean(|r| r.r_s),
        r_t: mean(|r| r.r_t),
        p_d: mean(|r| r.p_d),
        agents,
        zcp,
        selfplay_mean,
        selfplay_std,
    })
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Artifacts written by a command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub config_digest: Option<String>,
}

impl Manifest {
    pub fn record(&mut self, path: impl Into<String>, bytes: &[u8], config_digest: Option<String>) {
        let path = path.into();
        self.artifacts.retain(|a| a.path != path);
        self.artifacts.push(ManifestEntry {
            path,
            sha256: hex_digest(bytes),
            config_digest,
        });
    }

    pub fn to_json(&self) -> String {
        let mut entries = self.artifacts.clone();
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        serde_json::to_string_pretty(&Manifest { artifacts: entries }).expect("serializable")
    }
}
