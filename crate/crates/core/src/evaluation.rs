//! Discrete-channel evaluation of frozen agents.
//!
//! Every routine here plays with a test-mode channel. Zero-shot cooperative
//! performance (ZCP) pairs independently trained agents in both role
//! assignments; the responsiveness measures replace one side of the game
//! with a random protocol.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::PolicyParams;
use crate::autodiff::Tape;
use crate::channel::{ChannelConfig, Mutation};
use crate::env::{EpisodeTrace, ObservationSpace};
use crate::error::{Error, Result};
use crate::rollout::{rollout, Teacher};
use crate::seeds::derive_seed;
use crate::tensor::argmax;
use crate::training::{loss_pd, loss_sic, loss_tm};

/// Episodes per tape; larger requests are split into chunks.
const CHUNK: usize = 256;

fn check_compatible(a: &PolicyParams<f32>, b: &PolicyParams<f32>) -> Result<()> {
    if a.config.vocab != b.config.vocab || a.config.classes != b.config.classes {
        return Err(Error::Config(format!(
            "agents disagree on dimensions: {} classes/{} symbols vs {}/{}",
            a.config.classes, a.config.vocab, b.config.classes, b.config.vocab
        )));
    }
    Ok(())
}

/// The teacher for [`play`]: an agent or a fresh random injective protocol per episode.
#[derive(Clone, Copy, Debug)]
pub enum TeacherRole<'a> {
    Agent(&'a PolicyParams<f32>),
    RandomProtocol,
}

/// Plays `episodes` discrete games and returns their traces.
pub fn play<R: Rng + ?Sized>(
    teacher: TeacherRole<'_>,
    student: &PolicyParams<f32>,
    channel: &ChannelConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<Vec<EpisodeTrace>> {
    let space = ObservationSpace::new(student.config.classes)?;
    let channel = channel.discrete();
    let mut traces = Vec::with_capacity(episodes);
    let mut left = episodes;
    while left > 0 {
        let batch = left.min(CHUNK);
        let mut tape = Tape::<f32>::new();
        let s = student.bind_frozen(&mut tape);
        let r = match teacher {
            TeacherRole::Agent(t) => {
                check_compatible(t, student)?;
                let t = t.bind_frozen(&mut tape);
                rollout(
                    &mut tape,
                    &space,
                    Teacher::Policy(&t),
                    &s,
                    &channel,
                    batch,
                    rng,
                )?
            }
            TeacherRole::RandomProtocol => {
                let protocols: Vec<Vec<usize>> = (0..batch)
                    .map(|_| random_protocol(space.classes(), channel.vocab, rng))
                    .collect::<Result<_>>()?;
                rollout(
                    &mut tape,
                    &space,
                    Teacher::Protocol(&protocols),
                    &s,
                    &channel,
                    batch,
                    rng,
                )?
            }
        };
        traces.extend(r.traces);
        left -= batch;
    }
    Ok(traces)
}

/// Uniform injective map from `classes` observations to `vocab` symbols.
pub fn random_protocol<R: Rng + ?Sized>(
    classes: usize,
    vocab: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if vocab < classes {
        return Err(Error::Config(format!(
            "no injective protocol from {classes} observations into {vocab} symbols"
        )));
    }
    let mut symbols: Vec<usize> = (0..vocab).collect();
    symbols.shuffle(rng);
    symbols.truncate(classes);
    Ok(symbols)
}

pub fn accuracy(traces: &[EpisodeTrace]) -> f64 {
    let correct = traces
        .iter()
        .filter(|t| argmax(&t.test.prediction) + 1 == t.test.class)
        .count();
    correct as f64 / traces.len().max(1) as f64
}

/// Fraction of correct predictions over a clean channel.
pub fn performance<R: Rng + ?Sized>(
    teacher: &PolicyParams<f32>,
    student: &PolicyParams<f32>,
    n_games: usize,
    rng: &mut R,
) -> Result<f64> {
    let channel = ChannelConfig::clean(student.config.vocab);
    Ok(accuracy(&play(
        TeacherRole::Agent(teacher),
        student,
        &channel,
        n_games,
        rng,
    )?))
}

/// Self-play over a discrete channel that keeps the given randomization.
pub fn selfplay_performance<R: Rng + ?Sized>(
    agent: &PolicyParams<f32>,
    channel: &ChannelConfig,
    n_games: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(accuracy(&play(
        TeacherRole::Agent(agent),
        agent,
        channel,
        n_games,
        rng,
    )?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterResult {
    pub teacher_id: usize,
    pub student_id: usize,
    pub n_games: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZcpReport {
    /// Mean accuracy over all games.
    pub mean: f64,
    /// Population standard deviation of per-encounter accuracies.
    pub std: f64,
    pub encounters: Vec<EncounterResult>,
}

impl ZcpReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("teacher_id,student_id,n_games,accuracy\n");
        for e in &self.encounters {
            s.push_str(&format!(
                "{},{},{},{:.6}\n",
                e.teacher_id, e.student_id, e.n_games, e.accuracy
            ));
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero-shot cooperative performance over every ordered pair of distinct agents.
///
/// Encounter `(i, j)` uses its own RNG stream derived from `seed`, and rows
/// are ordered by `(teacher_id, student_id)`.
pub fn zcp(
    agents: &[PolicyParams<f32>],
    games_per_direction: usize,
    seed: u64,
) -> Result<ZcpReport> {
    if agents.len() < 2 {
        return Err(Error::Usage(format!(
            "ZCP needs at least 2 agents, got {}",
            agents.len()
        )));
    }
    let k = agents.len();
    let mut encounters = Vec::with_capacity(k * (k - 1));
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (i * k + j) as u64));
            let acc = performance(&agents[i], &agents[j], games_per_direction, &mut rng)?;
            encounters.push(EncounterResult {
                teacher_id: i,
                student_id: j,
                n_games: games_per_direction,
                accuracy: acc,
            });
        }
    }
    let accs: Vec<f64> = encounters.iter().map(|e| e.accuracy).collect();
    let (mean, std) = mean_std(&accs);
    Ok(ZcpReport {
        mean,
        std,
        encounters,
    })
}

fn mean_of(traces: &[EpisodeTrace], f: fn(&EpisodeTrace) -> f64) -> f64 {
    traces.iter().map(f).sum::<f64>() / traces.len().max(1) as f64
}

/// `exp(-mean L_SIC)` over recorded traces.
pub fn student_responsiveness_of(traces: &[EpisodeTrace]) -> f64 {
    (-mean_of(traces, loss_sic)).exp()
}

/// `exp(-mean L_TM)` over recorded traces.
pub fn teacher_responsiveness_of(traces: &[EpisodeTrace]) -> f64 {
    (-mean_of(traces, loss_tm)).exp()
}

/// `1 / mean L_PD` over recorded traces.
pub fn protocol_diversity_of(traces: &[EpisodeTrace]) -> f64 {
    1.0 / mean_of(traces, loss_pd)
}

/// `exp(-mean L_SIC)` with the agent as student of a random-protocol teacher.
pub fn responsiveness_student<R: Rng + ?Sized>(
    agent: &PolicyParams<f32>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let channel = ChannelConfig::clean(agent.config.vocab);
    let traces = play(
        TeacherRole::RandomProtocol,
        agent,
        &channel,
        n_episodes,
        rng,
    )?;
    Ok(student_responsiveness_of(&traces))
}

/// `exp(-mean L_TM)` with the agent as teacher and every establishment
/// message replaced by a kind mutation.
pub fn responsiveness_teacher<R: Rng + ?Sized>(
    agent: &PolicyParams<f32>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let channel = ChannelConfig {
        mutation: Mutation::Kind { probability: 1.0 },
        ..ChannelConfig::clean(agent.config.vocab)
    };
    let traces = play(TeacherRole::Agent(agent), agent, &channel, n_episodes, rng)?;
    Ok(teacher_responsiveness_of(&traces))
}

/// `1 / mean L_PD` in clean self-play.
pub fn protocol_diversity<R: Rng + ?Sized>(
    agent: &PolicyParams<f32>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let channel = ChannelConfig::clean(agent.config.vocab);
    let traces = play(TeacherRole::Agent(agent), agent, &channel, n_episodes, rng)?;
    Ok(protocol_diversity_of(&traces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_t: f64,
    pub r_s: f64,
    pub p_d: f64,
    pub selfplay_accuracy: f64,
    pub zcp_mean: Option<f64>,
    pub zcp_std: Option<f64>,
}

/// `R_T`, `R_S`, `P_D` and self-play accuracy for one agent.
pub fn metrics(
    agent: &PolicyParams<f32>,
    selfplay_channel: &ChannelConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let rng = |s| ChaCha8Rng::seed_from_u64(derive_seed(seed, s));
    Ok(MetricsReport {
        r_t: responsiveness_teacher(agent, n_episodes, &mut rng(0))?,
        r_s: responsiveness_student(agent, n_episodes, &mut rng(1))?,
        p_d: protocol_diversity(agent, n_episodes, &mut rng(2))?,
        selfplay_accuracy: selfplay_performance(agent, selfplay_channel, n_episodes, &mut rng(3))?,
        zcp_mean: None,
        zcp_std: None,
    })
}

/// Co-occurrence counts of delivered symbols over establishment steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolHeatmap {
    /// `class_symbol[c][s]`: class `c + 1` shown while symbol `s` was delivered.
    pub class_symbol: Vec<Vec<usize>>,
    /// `timestep_symbol[t][s]`.
    pub timestep_symbol: Vec<Vec<usize>>,
    pub episodes: usize,
}

impl ProtocolHeatmap {
    pub fn from_traces(traces: &[EpisodeTrace], classes: usize, vocab: usize) -> Self {
        let mut class_symbol = vec![vec![0; vocab]; classes];
        let mut timestep_symbol = vec![vec![0; vocab]; classes];
        for tr in traces {
            for s in &tr.establishment {
                let sym = argmax(&s.message);
                class_symbol[s.class - 1][sym] += 1;
                timestep_symbol[s.t][sym] += 1;
            }
        }
        Self {
            class_symbol,
            timestep_symbol,
            episodes: traces.len(),
        }
    }

    fn matrix_csv(rows: &[Vec<usize>], row_label: &str, first: usize) -> String {
        let vocab = rows.first().map_or(0, Vec::len);
        let mut s = row_label.to_string();
        for j in 0..vocab {
            s.push_str(&format!(",symbol_{j}"));
        }
        s.push('\n');
        for (i, r) in rows.iter().enumerate() {
            s.push_str(&(i + first).to_string());
            for v in r {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn class_csv(&self) -> String {
        Self::matrix_csv(&self.class_symbol, "class", 1)
    }

    pub fn timestep_csv(&self) -> String {
        Self::matrix_csv(&self.timestep_symbol, "timestep", 0)
    }
}

/// Heat maps from clean self-play of `teacher`.
pub fn heatmaps<R: Rng + ?Sized>(
    teacher: &PolicyParams<f32>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<ProtocolHeatmap> {
    let channel = ChannelConfig::clean(teacher.config.vocab);
    let traces = play(
        TeacherRole::Agent(teacher),
        teacher,
        &channel,
        n_episodes,
        rng,
    )?;
    Ok(ProtocolHeatmap::from_traces(
        &traces,
        teacher.config.classes,
        teacher.config.vocab,
    ))
}
