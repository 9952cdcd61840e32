//! Recurrent policy: dense -> LSTM -> dense, with checkpoint serialization.
//!
//! Inputs per step are the agent's own last message, the other agent's last
//! message and an observation, concatenated. The output layer's first
//! `classes` units are softmaxed into a class prediction; the remaining
//! `vocab` units are the raw utterance logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab: usize,
    pub classes: usize,
    pub obs_bits: usize,
    pub dense_units: usize,
    pub lstm_units: usize,
    pub activation: Activation,
}

impl PolicyConfig {
    /// Paper-sized network (128 dense units, 64 LSTM units) for `classes` and `vocab`.
    pub fn standard(classes: usize, vocab: usize, activation: Activation) -> Result<Self> {
        let space = crate::env::ObservationSpace::new(classes)?;
        Ok(Self {
            vocab,
            classes,
            obs_bits: space.bits(),
            dense_units: 128,
            lstm_units: 64,
            activation,
        })
    }

    pub fn input_width(&self) -> usize {
        2 * self.vocab + self.obs_bits
    }

    pub fn output_width(&self) -> usize {
        self.classes + self.vocab
    }

    /// Shapes of the parameter tensors in declared layer order.
    pub fn param_shapes(&self) -> [[usize; 2]; 7] {
        let (d, h) = (self.dense_units, self.lstm_units);
        [
            [self.input_width(), d],
            [1, d],
            [d, 4 * h],
            [h, 4 * h],
            [1, 4 * h],
            [h, self.output_width()],
            [1, self.output_width()],
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|[r, c]| r * c).sum()
    }
}

/// Network parameters, in declared layer order:
/// dense-1 weight and bias, LSTM input weight, recurrent weight and bias
/// (gate order input, forget, candidate, output), dense-out weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams<T: Scalar = f32> {
    pub config: PolicyConfig,
    tensors: Vec<Tensor<T>>,
}

const DENSE_W: usize = 0;
const DENSE_B: usize = 1;
const LSTM_WX: usize = 2;
const LSTM_WH: usize = 3;
const LSTM_B: usize = 4;
const OUT_W: usize = 5;
const OUT_B: usize = 6;

impl<T: Scalar> PolicyParams<T> {
    /// Glorot-uniform weights, zero biases, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Self {
        let shapes = config.param_shapes();
        let tensors = shapes
            .iter()
            .enumerate()
            .map(|(i, &[r, c])| {
                if r == 1 {
                    let mut b = Tensor::zeros(1, c);
                    if i == LSTM_B {
                        let h = config.lstm_units;
                        for v in &mut b.values_mut()[h..2 * h] {
                            *v = T::one();
                        }
                    }
                    b
                } else {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    let vals = (0..r * c)
                        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                        .collect();
                    Tensor::new(r, c, vals).expect("shape")
                }
            })
            .collect();
        Self { config, tensors }
    }

    pub fn zeros(config: PolicyConfig) -> Self {
        let tensors = config
            .param_shapes()
            .iter()
            .map(|&[r, c]| Tensor::zeros(r, c))
            .collect();
        Self { config, tensors }
    }

    pub fn from_tensors(config: PolicyConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len()
            || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != *s)
        {
            return Err(Error::Shape(
                "parameter tensors do not match the policy config".into(),
            ));
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places the parameters on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundPolicy {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        BoundPolicy {
            config: self.config,
            vars,
        }
    }

    /// Places the parameters on `tape` as constants.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundPolicy {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        BoundPolicy {
            config: self.config,
            vars,
        }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub config: PolicyConfig,
    vars: Vec<Var>,
}

/// LSTM hidden and cell vectors, one row per episode.
#[derive(Clone, Debug, PartialEq)]
pub struct MentalState<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> MentalState<T> {
    pub fn zeros(rows: usize, units: usize) -> Self {
        Self {
            h: Tensor::zeros(rows, units),
            c: Tensor::zeros(rows, units),
        }
    }
}

/// Mental state living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

impl StateVars {
    pub fn constant<T: Scalar>(tape: &mut Tape<T>, state: &MentalState<T>) -> Self {
        Self {
            h: tape.constant(state.h.clone()),
            c: tape.constant(state.c.clone()),
        }
    }

    pub fn zeros<T: Scalar>(tape: &mut Tape<T>, rows: usize, units: usize) -> Self {
        Self::constant(tape, &MentalState::zeros(rows, units))
    }

    pub fn read<T: Scalar>(&self, tape: &Tape<T>) -> MentalState<T> {
        MentalState {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
        }
    }
}

/// Outputs of one policy step on a tape.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub prediction: Var,
    pub utterance: Var,
    pub state: StateVars,
}

impl BoundPolicy {
    /// One recurrent step; every input has one row per episode.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        state: StateVars,
        own_last: Var,
        other_last: Var,
        observation: Var,
    ) -> Result<StepVars> {
        let cfg = &self.config;
        for (name, v, w) in [
            ("own message", own_last, cfg.vocab),
            ("other message", other_last, cfg.vocab),
            ("observation", observation, cfg.obs_bits),
        ] {
            if tape.value(v).cols() != w {
                return Err(Error::Config(format!(
                    "{name} input has width {}, policy expects {w}",
                    tape.value(v).cols()
                )));
            }
        }
        let v = &self.vars;
        let x = tape.concat(&[own_last, other_last, observation])?;
        let pre = tape.matmul(x, v[DENSE_W])?;
        let pre = tape.add_row(pre, v[DENSE_B])?;
        let hidden = match cfg.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Linear => pre,
        };

        let h = cfg.lstm_units;
        let zx = tape.matmul(hidden, v[LSTM_WX])?;
        let zh = tape.matmul(state.h, v[LSTM_WH])?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row(z, v[LSTM_B])?;
        let i = tape.slice(z, 0, h)?;
        let f = tape.slice(z, h, h)?;
        let g = tape.slice(z, 2 * h, h)?;
        let o = tape.slice(z, 3 * h, h)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h_new = tape.mul(o, tc)?;

        let out = tape.matmul(h_new, v[OUT_W])?;
        let out = tape.add_row(out, v[OUT_B])?;
        let logits = tape.slice(out, 0, cfg.classes)?;
        let prediction = tape.softmax(logits);
        let utterance = tape.slice(out, cfg.classes, cfg.vocab)?;
        Ok(StepVars {
            prediction,
            utterance,
            state: StateVars { h: h_new, c },
        })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pre-LSTM activations for a batch of concatenated inputs.
    pub fn first_layer<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let pre = tape.matmul(input, self.vars[DENSE_W])?;
        let pre = tape.add_row(pre, self.vars[DENSE_B])?;
        Ok(match self.config.activation {
            Activation::Relu => tape.relu(pre),
            Activation::Linear => pre,
        })
    }
}

/// Utterance logits and class prediction of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentAction<T = f32> {
    pub utterance: Vec<T>,
    pub prediction: Vec<T>,
}

/// Single-episode step outside of training. Inputs are left untouched.
pub fn act<T: Scalar>(
    params: &PolicyParams<T>,
    state: &MentalState<T>,
    own_last: &[T],
    other_last: &[T],
    observation: &[T],
) -> Result<(AgentAction<T>, MentalState<T>)> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let s = StateVars::constant(&mut tape, state);
    let own = tape.constant(Tensor::row(own_last.to_vec()));
    let other = tape.constant(Tensor::row(other_last.to_vec()));
    let obs = tape.constant(Tensor::row(observation.to_vec()));
    let out = bound.step(&mut tape, s, own, other, obs)?;
    let action = AgentAction {
        utterance: tape.value(out.utterance).values().to_vec(),
        prediction: tape.value(out.prediction).values().to_vec(),
    };
    Ok((action, out.state.read(&tape)))
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"PROTOLAB1";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Provenance stored alongside parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab: usize,
    pub classes: usize,
    pub dense_units: usize,
    pub lstm_units: usize,
    pub activation: Option<Activation>,
    pub config_digest: String,
    pub seed: u64,
    #[serde(default)]
    pub label: String,
}

impl CheckpointMeta {
    pub fn for_config(config: &PolicyConfig, config_digest: String, seed: u64) -> Self {
        Self {
            vocab: config.vocab,
            classes: config.classes,
            dense_units: config.dense_units,
            lstm_units: config.lstm_units,
            activation: Some(config.activation),
            config_digest,
            seed,
            label: String::new(),
        }
    }
}

pub fn save_checkpoint(params: &PolicyParams<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 4 * c.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for d in [c.vocab, c.classes, c.obs_bits, c.dense_units, c.lstm_units] {
        let d = u32::try_from(d).map_err(|_| Error::Checkpoint("dimension exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(match c.activation {
        Activation::Relu => 0,
        Activation::Linear => 1,
    });
    for t in params.tensors() {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let text = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(&text);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(PolicyParams<f32>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let activation = match r.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Linear,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown activation flag {other}"
            )))
        }
    };
    let [vocab, classes, obs_bits, dense_units, lstm_units] = dims;
    let config = PolicyConfig {
        vocab,
        classes,
        obs_bits,
        dense_units,
        lstm_units,
        activation,
    };
    let expected_bits = crate::env::ObservationSpace::new(classes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?
        .bits();
    if expected_bits != obs_bits {
        return Err(Error::Checkpoint(format!(
            "{classes} classes need {expected_bits} observation bits, header says {obs_bits}"
        )));
    }
    let mut tensors = Vec::new();
    for [rows, cols] in config.param_shapes() {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("huge tensor".into()))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("huge tensor".into()))?,
        )?;
        let vals = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
            .collect();
        tensors.push(Tensor::new(rows, cols, vals)?);
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after metadata".into()));
    }
    Ok((PolicyParams::from_tensors(config, tensors)?, meta))
}

/// Loads a checkpoint and checks it against the expected dimensions.
pub fn load_checkpoint_for(
    bytes: &[u8],
    classes: usize,
    vocab: usize,
) -> Result<(PolicyParams<f32>, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(bytes)?;
    if params.config.classes != classes || params.config.vocab != vocab {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes and {} symbols, expected {classes} and {vocab}",
            params.config.classes, params.config.vocab
        )));
    }
    Ok((params, meta))
}
