//! The teacher/student game: observation set, episode state machine and traces.
//!
//! An episode has `|O_E|` establishment steps, in which both roles see the
//! same observation and the teacher sends a symbol, followed by one test step
//! in which only the teacher sees the hidden observation `o_f` and the student
//! must name its class. Within each joint step the teacher acts first.

use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The binary-vector observations `O_E` and their class labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSpace {
    classes: usize,
    bits: usize,
    observations: Vec<Vec<u8>>,
}

impl ObservationSpace {
    /// Observations encoding `1..=classes` little-endian (bit `i` weighs `2^i`).
    ///
    /// The zero vector is excluded, so the width is the bit length of
    /// `classes`; for powers of two this is one more than `ceil(log2 M)`.
    pub fn new(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let bits = (usize::BITS - classes.leading_zeros()) as usize;
        let observations = (1..=classes)
            .map(|y| (0..bits).map(|i| ((y >> i) & 1) as u8).collect())
            .collect();
        Ok(Self {
            classes,
            bits,
            observations,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Bits of the observation with class index `class` (0-based).
    pub fn observation(&self, class: usize) -> &[u8] {
        &self.observations[class]
    }

    pub fn observations(&self) -> &[Vec<u8>] {
        &self.observations
    }

    /// Class label `y` (1-based) that a bit vector encodes.
    pub fn label(bits: &[u8]) -> usize {
        bits.iter()
            .enumerate()
            .map(|(i, &b)| (b as usize) << i)
            .sum()
    }
}

/// State of one episode.
///
/// Observations are referred to by 0-based class index; `class + 1` is the
/// label `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub t: usize,
    pub current: usize,
    /// Message delivered at the previous step; all zeros (silence) at `t = 0`.
    pub last_message: Vec<f64>,
    /// Observations shown so far, in order.
    pub history: Vec<usize>,
    pub done: bool,
}

impl EpisodeState {
    /// Fresh episode with a uniformly drawn first observation.
    pub fn reset<R: Rng + ?Sized>(space: &ObservationSpace, vocab: usize, rng: &mut R) -> Self {
        Self {
            t: 0,
            current: rng.random_range(0..space.classes()),
            last_message: vec![0.0; vocab],
            history: Vec::with_capacity(space.classes()),
            done: false,
        }
    }

    pub fn in_test_phase(&self, space: &ObservationSpace) -> bool {
        self.t == space.classes()
    }

    /// Advance one joint step after the teacher's message was delivered.
    pub fn step<R: Rng + ?Sized>(
        &self,
        space: &ObservationSpace,
        teacher_message: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        if self.done {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let n = space.classes();
        let mut next = self.clone();
        next.last_message = teacher_message.to_vec();
        if self.t == n {
            next.done = true;
            return Ok(next);
        }
        next.history.push(self.current);
        next.t += 1;
        if next.t < n {
            let remaining: Vec<usize> = (0..n).filter(|c| !next.history.contains(c)).collect();
            next.current = *remaining.choose(rng).expect("unshown observation left");
        } else {
            next.current = *next.history.choose(rng).expect("non-empty history");
        }
        Ok(next)
    }

    /// What the teacher sees: the true observation and the last message.
    pub fn teacher_view<'a>(&'a self, space: &'a ObservationSpace) -> (Vec<u8>, &'a [f64]) {
        (space.observation(self.current).to_vec(), &self.last_message)
    }

    /// What the student sees: the observation, or all zeros during the test step.
    pub fn student_view<'a>(&'a self, space: &'a ObservationSpace) -> (Vec<u8>, &'a [f64]) {
        let obs = if self.in_test_phase(space) {
            vec![0; space.bits()]
        } else {
            space.observation(self.current).to_vec()
        };
        (obs, &self.last_message)
    }
}

/// One establishment step of a recorded episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub observation: Vec<u8>,
    /// Class label `y` (1-based).
    pub class: usize,
    pub utterance: Vec<f64>,
    /// Message as the teacher sent it, after mutation and before permutation.
    pub sent: Vec<f64>,
    /// Message as the student received it.
    pub message: Vec<f64>,
    pub mutated: bool,
    pub permutation: Option<Vec<usize>>,
}

/// The test step: hidden observation, final message and the student's prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub t: usize,
    pub observation: Vec<u8>,
    pub class: usize,
    pub utterance: Vec<f64>,
    pub sent: Vec<f64>,
    pub message: Vec<f64>,
    pub mutated: bool,
    pub prediction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub establishment: Vec<StepRecord>,
    pub test: TestRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
enum TraceLine {
    Establishment {
        episode: usize,
        #[serde(flatten)]
        record: StepRecord,
    },
    Test {
        episode: usize,
        #[serde(flatten)]
        record: TestRecord,
    },
}

impl EpisodeTrace {
    /// Index of the establishment step that showed `o_f`.
    pub fn step_showing_final(&self) -> Option<usize> {
        self.establishment
            .iter()
            .position(|s| s.class == self.test.class)
    }
}

/// Writes traces as JSON lines, one line per timestep.
pub fn write_traces<W: Write>(traces: &[EpisodeTrace], mut out: W) -> Result<()> {
    for (episode, trace) in traces.iter().enumerate() {
        for record in &trace.establishment {
            let line = TraceLine::Establishment {
                episode,
                record: record.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        let line = TraceLine::Test {
            episode,
            record: trace.test.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads traces written by [`write_traces`].
pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<EpisodeTrace>> {
    let mut traces = Vec::new();
    let mut pending: Vec<StepRecord> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceLine>(&line)? {
            TraceLine::Establishment { record, .. } => pending.push(record),
            TraceLine::Test { record, .. } => traces.push(EpisodeTrace {
                establishment: std::mem::take(&mut pending),
                test: record,
            }),
        }
    }
    if !pending.is_empty() {
        return Err(Error::Usage("trace log ends inside an episode".into()));
    }
    Ok(traces)
}
