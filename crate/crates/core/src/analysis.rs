//! Behavioural probes on frozen agents and recorded traces.
//!
//! Listening is tested counterfactually by replaying a student along a trace
//! and substituting the received message. Signalling and protocol
//! establishment are measured as plug-in mutual information between discrete
//! variables.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{PolicyParams, StateVars};
use crate::autodiff::Tape;
use crate::channel::ChannelConfig;
use crate::env::EpisodeTrace;
use crate::error::{Error, Result};
use crate::evaluation::{play, selfplay_performance, student_responsiveness_of, TeacherRole};
use crate::tensor::{argmax, softmax, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 0.01;
pub const SHUFFLES: usize = 1000;
pub const MIN_SIGNALLING_EPISODES: usize = 100;
/// Fraction of `log2 M` the probe's MI must reach for an intra-episodic verdict.
pub const INTRA_FRACTION: f64 = 0.8;
/// Threshold for "high" responsiveness and self-play accuracy in verdicts.
pub const HIGH_SCORE: f64 = 0.9;

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Plug-in mutual information in bits between two discrete variables.
pub fn mutual_information(pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let nx = pairs.iter().map(|p| p.0).max().unwrap_or(0) + 1;
    let ny = pairs.iter().map(|p| p.1).max().unwrap_or(0) + 1;
    let mut joint = vec![0usize; nx * ny];
    let mut px = vec![0usize; nx];
    let mut py = vec![0usize; ny];
    for &(x, y) in pairs {
        joint[x * ny + y] += 1;
        px[x] += 1;
        py[y] += 1;
    }
    let n = pairs.len() as f64;
    let mut mi = 0.0;
    for x in 0..nx {
        for y in 0..ny {
            let c = joint[x * ny + y];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (px[x] as f64 * py[y] as f64)).log2();
            }
        }
    }
    mi.max(0.0)
}

// ---------------------------------------------------------------------------
// Listening

/// Counterfactual comparison at one timestep of a replayed student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListeningStep {
    pub t: usize,
    /// Distance between outputs under the received message and under silence.
    pub distance: f64,
    pub prediction_distance: f64,
    pub utterance_distance: f64,
    /// Largest absolute change of the hidden state.
    pub state_distance: f64,
    pub listening: bool,
    /// Number of symbols whose output differs from silence beyond tolerance.
    pub sensitivity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListeningVerdict {
    pub tolerance: f64,
    pub steps: Vec<ListeningStep>,
}

impl ListeningVerdict {
    pub fn any_listening(&self) -> bool {
        self.steps.iter().any(|s| s.listening)
    }

    pub fn test_step(&self) -> Option<&ListeningStep> {
        self.steps.last()
    }
}

struct Outputs {
    prediction: Vec<f64>,
    utterance: Vec<f64>,
    hidden: Vec<f64>,
}

fn row_f64(t: &Tensor<f32>, r: usize) -> Vec<f64> {
    t.row_slice(r).iter().map(|&v| v as f64).collect()
}

/// Replays `student` along `trace` and, at every step, compares its outputs
/// under the received message with its outputs under silence.
///
/// Distances are total variation over the prediction and over the softmaxed
/// utterance; the combined distance is their mean, i.e. total variation of
/// the concatenated outputs renormalized to one unit of mass.
pub fn positive_listening_test(
    student: &PolicyParams<f32>,
    trace: &EpisodeTrace,
    tolerance: f64,
) -> Result<ListeningVerdict> {
    let cfg = &student.config;
    let vocab = cfg.vocab;
    let mut h = Tensor::<f32>::zeros(1, cfg.lstm_units);
    let mut c = Tensor::<f32>::zeros(1, cfg.lstm_units);
    let mut own = vec![0.0f32; vocab];
    let mut steps = Vec::new();

    let inputs = trace
        .establishment
        .iter()
        .map(|s| {
            (
                s.t,
                s.message.clone(),
                s.observation.iter().map(|&b| b as f32).collect(),
            )
        })
        .chain(std::iter::once((
            trace.test.t,
            trace.test.message.clone(),
            vec![0.0; cfg.obs_bits],
        )));
    for (t, message, observation) in inputs {
        let message: Vec<f32> = message.iter().map(|&v| v as f32).collect();
        let observation: Vec<f32> = observation;
        if message.len() != vocab || observation.len() != cfg.obs_bits {
            return Err(Error::Config(
                "trace does not match the agent's dimensions".into(),
            ));
        }
        // Row 0: received message, row 1: silence, rows 2..: every symbol.
        let rows = vocab + 2;
        let mut others = vec![message.clone(), vec![0.0; vocab]];
        others.extend((0..vocab).map(|s| {
            let mut v = vec![0.0; vocab];
            v[s] = 1.0;
            v
        }));
        let repeat = |x: &[f32]| Tensor::from_rows(&vec![x.to_vec(); rows]);
        let mut tape = Tape::<f32>::new();
        let bound = student.bind_frozen(&mut tape);
        let state = StateVars {
            h: tape.constant(repeat(h.row_slice(0))?),
            c: tape.constant(repeat(c.row_slice(0))?),
        };
        let own_v = tape.constant(repeat(&own)?);
        let other_v = tape.constant(Tensor::from_rows(&others)?);
        let obs_v = tape.constant(repeat(&observation)?);
        let out = bound.step(&mut tape, state, own_v, other_v, obs_v)?;
        let (pred, utt) = (tape.value(out.prediction), tape.value(out.utterance));
        let new_h = tape.value(out.state.h);
        let outputs: Vec<Outputs> = (0..rows)
            .map(|r| Outputs {
                prediction: row_f64(pred, r),
                utterance: softmax(&row_f64(utt, r)),
                hidden: row_f64(new_h, r),
            })
            .collect();

        let compare = |a: &Outputs, b: &Outputs| {
            let p = total_variation(&a.prediction, &b.prediction);
            let u = total_variation(&a.utterance, &b.utterance);
            (p, u, 0.5 * (p + u))
        };
        let (p, u, d) = compare(&outputs[0], &outputs[1]);
        let state_distance = outputs[0]
            .hidden
            .iter()
            .zip(&outputs[1].hidden)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let sensitivity = (2..rows)
            .filter(|&r| compare(&outputs[r], &outputs[1]).2 > tolerance)
            .count();
        steps.push(ListeningStep {
            t,
            distance: d,
            prediction_distance: p,
            utterance_distance: u,
            state_distance,
            listening: d > tolerance,
            sensitivity,
        });

        h = Tensor::row(tape.value(out.state.h).row_slice(0).to_vec());
        c = Tensor::row(tape.value(out.state.c).row_slice(0).to_vec());
        let mut next = vec![0.0; vocab];
        next[argmax(utt.row_slice(0))] = 1.0;
        own = next;
    }
    Ok(ListeningVerdict { tolerance, steps })
}

// ---------------------------------------------------------------------------
// Signalling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignallingReport {
    pub episodes: usize,
    /// MI between shown class and delivered symbol, in bits.
    pub class_mi_bits: f64,
    /// Permutation-test p-value for `class_mi_bits`.
    pub p_value: f64,
    /// MI between establishment timestep and delivered symbol, in bits.
    pub timestep_mi_bits: f64,
}

/// Dependence of establishment messages on the observation they accompany.
pub fn positive_signalling_test<R: Rng + ?Sized>(
    traces: &[EpisodeTrace],
    rng: &mut R,
) -> Result<SignallingReport> {
    if traces.len() < MIN_SIGNALLING_EPISODES {
        return Err(Error::Usage(format!(
            "signalling test needs at least {MIN_SIGNALLING_EPISODES} episodes, got {}",
            traces.len()
        )));
    }
    let steps = traces.iter().flat_map(|tr| tr.establishment.iter());
    let (mut classes, mut symbols, mut times) = (Vec::new(), Vec::new(), Vec::new());
    for s in steps {
        classes.push(s.class - 1);
        symbols.push(argmax(&s.message));
        times.push(s.t);
    }
    let zip =
        |a: &[usize], b: &[usize]| a.iter().copied().zip(b.iter().copied()).collect::<Vec<_>>();
    let class_mi = mutual_information(&zip(&classes, &symbols));
    let timestep_mi = mutual_information(&zip(&times, &symbols));

    let mut shuffled = classes.clone();
    let mut at_least = 0usize;
    for _ in 0..SHUFFLES {
        shuffled.shuffle(rng);
        if mutual_information(&zip(&shuffled, &symbols)) >= class_mi - 1e-12 {
            at_least += 1;
        }
    }
    Ok(SignallingReport {
        episodes: traces.len(),
        class_mi_bits: class_mi,
        p_value: (at_least + 1) as f64 / (SHUFFLES + 1) as f64,
        timestep_mi_bits: timestep_mi,
    })
}

// ---------------------------------------------------------------------------
// Protocol establishment

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Establishment {
    Intra,
    Inter,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstablishmentReport {
    pub episodes: usize,
    /// MI between hidden class and predicted class under random protocols, in bits.
    pub mi_bits: f64,
    /// `log2 M`, the largest attainable value.
    pub max_bits: f64,
    pub r_s: f64,
    pub selfplay_accuracy: f64,
    pub verdict: Establishment,
}

/// Verdict from the probe statistics.
pub fn establishment_verdict(
    mi_bits: f64,
    max_bits: f64,
    r_s: f64,
    selfplay: f64,
) -> Establishment {
    if mi_bits >= INTRA_FRACTION * max_bits && r_s >= HIGH_SCORE {
        Establishment::Intra
    } else if selfplay >= HIGH_SCORE && mi_bits < INTRA_FRACTION * max_bits {
        Establishment::Inter
    } else {
        Establishment::None
    }
}

/// Drives `student` with a fresh random injective protocol every episode and
/// measures how much its prediction says about the hidden class.
pub fn establishment_probe<R: Rng + ?Sized>(
    student: &PolicyParams<f32>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<EstablishmentReport> {
    let channel = ChannelConfig::clean(student.config.vocab);
    let traces = play(
        TeacherRole::RandomProtocol,
        student,
        &channel,
        n_episodes,
        rng,
    )?;
    let pairs: Vec<(usize, usize)> = traces
        .iter()
        .map(|t| (t.test.class - 1, argmax(&t.test.prediction)))
        .collect();
    let mi_bits = mutual_information(&pairs);
    let r_s = student_responsiveness_of(&traces);
    let selfplay_accuracy = selfplay_performance(student, &channel, n_episodes, rng)?;
    let max_bits = (student.config.classes as f64).log2();
    Ok(EstablishmentReport {
        episodes: traces.len(),
        mi_bits,
        max_bits,
        r_s,
        selfplay_accuracy,
        verdict: establishment_verdict(mi_bits, max_bits, r_s, selfplay_accuracy),
    })
}

// ---------------------------------------------------------------------------
// Memorisation capacity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    /// Vocabulary size.
    pub n: u64,
    /// Number of subjects a protocol covers.
    pub k: u64,
    /// `N! / (N - k)!`, the number of injective protocols.
    pub protocol_count: f64,
    /// `k * log2 N`.
    pub bits_per_protocol: f64,
    /// Bits to store every protocol.
    pub total_bits: f64,
    /// `(N - k)^k`.
    pub lower_bound: f64,
    /// Number of parameters of the network.
    pub weights: u64,
    /// `32 * W`.
    pub network_bits: f64,
    pub feasible: bool,
}

/// Would a network with `weights` f32 parameters have room to memorise every protocol?
pub fn capacity_calc(n: u64, k: u64, weights: u64) -> Result<CapacityReport> {
    if k == 0 || k > n {
        return Err(Error::Usage(format!(
            "need 1 <= k <= N, got N = {n}, k = {k}"
        )));
    }
    let protocol_count: f64 = ((n - k + 1)..=n).map(|x| x as f64).product();
    let bits_per_protocol = k as f64 * (n as f64).log2();
    let total_bits = protocol_count * bits_per_protocol;
    let lower_bound = ((n - k) as f64).powi(k as i32);
    let network_bits = 32.0 * weights as f64;
    Ok(CapacityReport {
        n,
        k,
        protocol_count,
        bits_per_protocol,
        total_bits,
        lower_bound,
        weights,
        network_bits,
        feasible: network_bits >= total_bits,
    })
}
