//! The teacher-to-student communication channel.
//!
//! During training an utterance becomes a relaxed sample
//! `softmax((u + n + g) / tau)` with Gaussian noise `n` and Gumbel noise `g`;
//! at test time it becomes the one-hot argmax. Message mutation and channel
//! permutation act on the resulting symbol.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gumbel, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, one_hot, softmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Training,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    Off,
    /// Replacement drawn from symbols not yet delivered this episode.
    Kind {
        probability: f64,
    },
    /// Replacement drawn from the whole vocabulary.
    Unkind {
        probability: f64,
    },
}

impl Mutation {
    pub fn probability(&self) -> f64 {
        match *self {
            Mutation::Off => 0.0,
            Mutation::Kind { probability } | Mutation::Unkind { probability } => probability,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Permutation {
    Off,
    /// Permute a uniformly chosen subset of `size` symbols.
    Subset {
        size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub vocab: usize,
    pub temperature: f64,
    pub noise_std: f64,
    pub mode: ChannelMode,
    pub mutation: Mutation,
    pub permutation: Permutation,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            vocab: 5,
            temperature: 1.0,
            noise_std: 0.5,
            mode: ChannelMode::Training,
            mutation: Mutation::Off,
            permutation: Permutation::Off,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 1 {
            return Err(Error::Config("vocabulary must be non-empty".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        let p = self.mutation.probability();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!(
                "mutation probability {p} outside [0, 1]"
            )));
        }
        if let Permutation::Subset { size } = self.permutation {
            if size > self.vocab {
                return Err(Error::Config(format!(
                    "permutation subset {size} exceeds vocabulary {}",
                    self.vocab
                )));
            }
            if self.mutation != Mutation::Off {
                return Err(Error::Config(
                    "mutation and permutation cannot both be enabled".into(),
                ));
            }
        }
        Ok(())
    }

    /// Noise-free test-mode copy keeping the randomization settings.
    pub fn discrete(&self) -> Self {
        Self {
            mode: ChannelMode::Test,
            noise_std: 0.0,
            ..self.clone()
        }
    }

    /// Test mode with no noise, mutation or permutation.
    pub fn clean(vocab: usize) -> Self {
        Self {
            vocab,
            mode: ChannelMode::Test,
            noise_std: 0.0,
            mutation: Mutation::Off,
            permutation: Permutation::Off,
            ..Self::default()
        }
    }
}

/// Additive perturbation `n + g` for one utterance.
pub fn sample_perturbation<T: Scalar, R: Rng + ?Sized>(
    vocab: usize,
    noise_std: f64,
    rng: &mut R,
) -> Vec<T> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let normal = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("valid std"));
    (0..vocab)
        .map(|_| {
            let n = normal.as_ref().map_or(0.0, |d| d.sample(rng));
            T::from_f64(n + gumbel.sample(rng))
        })
        .collect()
}

/// Relaxed training-mode transmission of one utterance.
pub fn transmit_train<T: Scalar, R: Rng + ?Sized>(
    utterance: &[T],
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    if cfg.mode != ChannelMode::Training {
        return Err(Error::Usage(
            "transmit_train needs a training-mode channel".into(),
        ));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {}",
            cfg.temperature
        )));
    }
    let noise: Vec<T> = sample_perturbation(utterance.len(), cfg.noise_std, rng);
    let inv_tau = T::from_f64(1.0 / cfg.temperature);
    let logits: Vec<T> = utterance
        .iter()
        .zip(&noise)
        .map(|(&u, &n)| (u + n) * inv_tau)
        .collect();
    Ok(softmax(&logits))
}

/// One-hot of the utterance argmax (lowest index on ties).
pub fn transmit_test<T: Scalar>(utterance: &[T]) -> Vec<T> {
    one_hot(argmax(utterance), utterance.len())
}

/// Symbols delivered so far in one episode of one directed pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationHistory {
    symbols: Vec<usize>,
}

impl MutationHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn push(&mut self, symbol: usize) {
        self.symbols.push(symbol);
    }

    pub fn clear(&mut self) {
        self.symbols.clear();
    }

    pub fn contains(&self, symbol: usize) -> bool {
        self.symbols.contains(&symbol)
    }
}

/// Outcome of passing one symbol through the mutation step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MutationOutcome {
    pub delivered: usize,
    pub mutated: bool,
}

/// Possibly replaces `symbol` and records the delivered symbol in `history`.
pub fn mutate_symbol<R: Rng + ?Sized>(
    symbol: usize,
    vocab: usize,
    mutation: Mutation,
    history: &mut MutationHistory,
    rng: &mut R,
) -> MutationOutcome {
    let outcome = match mutation {
        Mutation::Off => MutationOutcome {
            delivered: symbol,
            mutated: false,
        },
        Mutation::Kind { probability } | Mutation::Unkind { probability } => {
            let fire = rng.random::<f64>() < probability;
            if !fire {
                MutationOutcome {
                    delivered: symbol,
                    mutated: false,
                }
            } else {
                let pool: Vec<usize> = match mutation {
                    Mutation::Kind { .. } => (0..vocab).filter(|s| !history.contains(*s)).collect(),
                    _ => (0..vocab).collect(),
                };
                match pool.choose(rng) {
                    Some(&s) => MutationOutcome {
                        delivered: s,
                        mutated: true,
                    },
                    None => {
                        log::warn!("kind mutation has no unused symbol left; message kept");
                        MutationOutcome {
                            delivered: symbol,
                            mutated: false,
                        }
                    }
                }
            }
        }
    };
    history.push(outcome.delivered);
    outcome
}

/// Mutation on a message vector. A replaced message becomes an exact one-hot.
pub fn mutate<T: Scalar, R: Rng + ?Sized>(
    message: &[T],
    history: &mut MutationHistory,
    mutation: Mutation,
    rng: &mut R,
) -> Vec<T> {
    let out = mutate_symbol(argmax(message), message.len(), mutation, history, rng);
    if out.mutated {
        one_hot(out.delivered, message.len())
    } else {
        message.to_vec()
    }
}

/// A bijection over symbol indices; `map[x]` is the image of `x`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PermutationMap {
    map: Vec<usize>,
}

impl PermutationMap {
    pub fn identity(vocab: usize) -> Self {
        Self {
            map: (0..vocab).collect(),
        }
    }

    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Usage(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Self { map })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn apply_symbol(&self, symbol: usize) -> usize {
        self.map[symbol]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (x, &y) in self.map.iter().enumerate() {
            inv[y] = x;
        }
        Self { map: inv }
    }

    pub fn compose(&self, then: &Self) -> Self {
        Self {
            map: self.map.iter().map(|&y| then.map[y]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }

    pub fn fixed_points(&self) -> usize {
        self.map.iter().enumerate().filter(|(i, m)| i == *m).count()
    }
}

/// Uniform permutation of a uniformly chosen `subset`-element set, fixing the rest.
pub fn sample_permutation<R: Rng + ?Sized>(
    vocab: usize,
    subset: usize,
    rng: &mut R,
) -> PermutationMap {
    let mut map: Vec<usize> = (0..vocab).collect();
    if subset < 2 {
        return PermutationMap { map };
    }
    let mut chosen: Vec<usize> = (0..vocab).collect();
    chosen.shuffle(rng);
    chosen.truncate(subset);
    let mut images = chosen.clone();
    images.shuffle(rng);
    for (&x, &y) in chosen.iter().zip(&images) {
        map[x] = y;
    }
    PermutationMap { map }
}

/// Reindexes message components: `out[f(x)] = message[x]`.
pub fn apply_permutation<T: Scalar>(map: &PermutationMap, message: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); message.len()];
    for (x, &v) in message.iter().enumerate() {
        out[map.map[x]] = v;
    }
    out
}

/// Channel temperature as a function of the training epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Fixed {
        temperature: f64,
    },
    /// Exponential decay from `start` to `end` over `epochs`, constant afterwards.
    Anneal {
        start: f64,
        end: f64,
        epochs: usize,
    },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Fixed { temperature: 1.0 }
    }
}

impl TemperatureSchedule {
    pub fn standard_anneal() -> Self {
        TemperatureSchedule::Anneal {
            start: 10.0,
            end: 0.1,
            epochs: 200,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        match *self {
            TemperatureSchedule::Fixed { temperature } => temperature,
            TemperatureSchedule::Anneal { start, end, epochs } => {
                if epochs == 0 {
                    return end;
                }
                let frac = epoch.min(epochs) as f64 / epochs as f64;
                start * (end / start).powf(frac)
            }
        }
    }
}

/// `10 * 0.01^(min(epoch, 200) / 200)`.
pub fn anneal_temperature(epoch: usize) -> f64 {
    TemperatureSchedule::standard_anneal().at(epoch)
}
