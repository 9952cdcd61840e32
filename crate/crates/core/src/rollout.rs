//! Batched play of complete episodes on a tape.
//!
//! Each row of every tensor is one episode. The same routine is used for
//! differentiable self-play training (relaxed channel, shared parameters),
//! for discrete evaluation between two different agents, and for probes with
//! a scripted teacher.

use rand::Rng;

use crate::agent::{BoundPolicy, StateVars};
use crate::autodiff::{Tape, Var};
use crate::channel::{
    mutate_symbol, sample_permutation, sample_perturbation, ChannelConfig, ChannelMode, Mutation,
    MutationHistory, Permutation, PermutationMap,
};
use crate::env::{EpisodeState, EpisodeTrace, ObservationSpace, StepRecord, TestRecord};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Who plays the teacher role.
#[derive(Clone, Copy, Debug)]
pub enum Teacher<'a> {
    Policy(&'a BoundPolicy),
    /// Scripted teacher that sends `protocols[row][class]` every step.
    Protocol(&'a [Vec<usize>]),
}

/// Tape handles produced by one batched rollout.
#[derive(Clone, Debug)]
pub struct RolloutVars {
    /// Teacher utterance per step, establishment steps first.
    pub utterances: Vec<Var>,
    /// Teacher-side message per step (after mutation, before permutation).
    pub sent: Vec<Var>,
    /// Student-side message per step.
    pub delivered: Vec<Var>,
    /// Student prediction at the test step.
    pub prediction: Var,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    pub traces: Vec<EpisodeTrace>,
    pub vars: RolloutVars,
}

impl Rollout {
    pub fn establishment_steps(&self) -> usize {
        self.vars.sent.len() - 1
    }

    /// Fraction of episodes whose predicted class is the hidden one.
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .traces
            .iter()
            .filter(|tr| crate::tensor::argmax(&tr.test.prediction) + 1 == tr.test.class)
            .count();
        correct as f64 / self.traces.len().max(1) as f64
    }
}

fn rows_to_vec<T: Scalar>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row_slice(r).iter().map(|v| v.as_f64()).collect()
}

/// Plays `batch` episodes. The student's mental state and the teacher's start at zero.
pub fn rollout<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    space: &ObservationSpace,
    teacher: Teacher<'_>,
    student: &BoundPolicy,
    channel: &ChannelConfig,
    batch: usize,
    rng: &mut R,
) -> Result<Rollout> {
    channel.validate()?;
    let vocab = channel.vocab;
    let n = space.classes();
    let bits = space.bits();
    if student.config.vocab != vocab || student.config.classes != n {
        return Err(Error::Config(format!(
            "student expects {} classes / {} symbols, game has {n} / {vocab}",
            student.config.classes, student.config.vocab
        )));
    }
    match teacher {
        Teacher::Policy(p) if p.config.vocab != vocab || p.config.classes != n => {
            return Err(Error::Config(format!(
                "teacher expects {} classes / {} symbols, game has {n} / {vocab}",
                p.config.classes, p.config.vocab
            )));
        }
        Teacher::Protocol(p) if p.len() != batch || p.iter().any(|m| m.len() != n) => {
            return Err(Error::Config(
                "scripted protocols must cover every episode and class".into(),
            ));
        }
        _ => {}
    }

    let mut states: Vec<EpisodeState> = (0..batch)
        .map(|_| EpisodeState::reset(space, vocab, rng))
        .collect();
    let perms: Vec<PermutationMap> = (0..batch)
        .map(|_| match channel.permutation {
            Permutation::Off => PermutationMap::identity(vocab),
            Permutation::Subset { size } => sample_permutation(vocab, size, rng),
        })
        .collect();
    let permuting = perms.iter().any(|p| !p.is_identity());
    let perm_maps: Vec<Vec<usize>> = perms.iter().map(|p| p.as_slice().to_vec()).collect();
    let mut histories = vec![MutationHistory::new(); batch];

    let mut teacher_state = match teacher {
        Teacher::Policy(p) => Some(StateVars::zeros(tape, batch, p.config.lstm_units)),
        Teacher::Protocol(_) => None,
    };
    let mut student_state = StateVars::zeros(tape, batch, student.config.lstm_units);
    let silence = tape.constant(Tensor::zeros(batch, vocab));
    let mut teacher_own = Tensor::<T>::zeros(batch, vocab);
    let mut student_own = Tensor::<T>::zeros(batch, vocab);
    let inv_tau = T::from_f64(1.0 / channel.temperature);

    let mut vars = RolloutVars {
        utterances: Vec::with_capacity(n + 1),
        sent: Vec::with_capacity(n + 1),
        delivered: Vec::with_capacity(n + 1),
        prediction: silence,
    };
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(n); batch];
    let mut tests: Vec<Option<TestRecord>> = vec![None; batch];

    for step in 0..=n {
        let testing = step == n;
        let mut obs = Tensor::<T>::zeros(batch, bits);
        for (b, s) in states.iter().enumerate() {
            for (d, &x) in obs.row_mut(b).iter_mut().zip(space.observation(s.current)) {
                *d = T::from_f64(x as f64);
            }
        }

        // Teacher acts first.
        let (utterance, message) = match teacher {
            Teacher::Policy(p) => {
                let obs_var = tape.constant(obs.clone());
                let own = tape.constant(teacher_own.clone());
                let out = p.step(
                    tape,
                    teacher_state.expect("policy teacher"),
                    own,
                    silence,
                    obs_var,
                )?;
                teacher_state = Some(out.state);
                let msg = match channel.mode {
                    ChannelMode::Training => {
                        let mut noise = Tensor::<T>::zeros(batch, vocab);
                        for b in 0..batch {
                            let p: Vec<T> = sample_perturbation(vocab, channel.noise_std, rng);
                            noise.row_mut(b).copy_from_slice(&p);
                        }
                        let noise = tape.constant(noise);
                        let logits = tape.add(out.utterance, noise)?;
                        let logits = tape.scale(logits, inv_tau);
                        tape.softmax(logits)
                    }
                    ChannelMode::Test => {
                        let syms = tape.value(out.utterance).argmax_rows();
                        tape.constant(Tensor::one_hot_rows(&syms, vocab))
                    }
                };
                (out.utterance, msg)
            }
            Teacher::Protocol(protocols) => {
                let syms: Vec<usize> = states
                    .iter()
                    .enumerate()
                    .map(|(b, s)| protocols[b][s.current])
                    .collect();
                let msg = tape.constant(Tensor::one_hot_rows(&syms, vocab));
                (msg, msg)
            }
        };

        // Mutation only rewrites establishment messages; the test message is
        // how the teacher uses the protocol that was actually delivered.
        let mutation = if testing {
            Mutation::Off
        } else {
            channel.mutation
        };
        let symbols = tape.value(message).argmax_rows();
        let mut delivered_syms = Vec::with_capacity(batch);
        let mut mutated = vec![false; batch];
        for b in 0..batch {
            let out = mutate_symbol(symbols[b], vocab, mutation, &mut histories[b], rng);
            delivered_syms.push(out.delivered);
            mutated[b] = out.mutated;
        }
        let sent = if mutated.iter().any(|&m| m) {
            let mut keep = Tensor::<T>::filled(batch, vocab, T::one());
            let mut replacement = Tensor::<T>::zeros(batch, vocab);
            for b in (0..batch).filter(|&b| mutated[b]) {
                keep.row_mut(b).fill(T::zero());
                replacement.row_mut(b)[delivered_syms[b]] = T::one();
            }
            let keep = tape.constant(keep);
            let replacement = tape.constant(replacement);
            let kept = tape.mul(message, keep)?;
            tape.add(kept, replacement)?
        } else {
            message
        };
        teacher_own = Tensor::one_hot_rows(&delivered_syms, vocab);

        // Permutation.
        let delivered = if permuting {
            tape.reindex(sent, &perm_maps)?
        } else {
            sent
        };

        // Student acts on the message delivered this step.
        let student_obs = if testing {
            Tensor::zeros(batch, bits)
        } else {
            obs
        };
        let student_obs = tape.constant(student_obs);
        let own = tape.constant(student_own.clone());
        let out = student.step(tape, student_state, own, delivered, student_obs)?;
        student_state = out.state;
        student_own = Tensor::one_hot_rows(&tape.value(out.utterance).argmax_rows(), vocab);

        let (u, s, d) = (
            tape.value(utterance),
            tape.value(sent),
            tape.value(delivered),
        );
        for (b, st) in states.iter().enumerate() {
            let class = st.current + 1;
            let observation = space.observation(st.current).to_vec();
            if testing {
                tests[b] = Some(TestRecord {
                    t: step,
                    observation,
                    class,
                    utterance: rows_to_vec(u, b),
                    sent: rows_to_vec(s, b),
                    message: rows_to_vec(d, b),
                    mutated: mutated[b],
                    prediction: rows_to_vec(tape.value(out.prediction), b),
                });
            } else {
                records[b].push(StepRecord {
                    t: step,
                    observation,
                    class,
                    utterance: rows_to_vec(u, b),
                    sent: rows_to_vec(s, b),
                    message: rows_to_vec(d, b),
                    mutated: mutated[b],
                    permutation: (channel.permutation != Permutation::Off)
                        .then(|| perm_maps[b].clone()),
                });
            }
        }
        vars.utterances.push(utterance);
        vars.sent.push(sent);
        vars.delivered.push(delivered);
        if testing {
            vars.prediction = out.prediction;
        }

        let feedback: Vec<Vec<f64>> = (0..batch).map(|b| rows_to_vec(&teacher_own, b)).collect();
        for (b, st) in states.iter_mut().enumerate() {
            *st = st.step(space, &feedback[b], rng)?;
        }
    }

    let traces = records
        .into_iter()
        .zip(tests)
        .map(|(establishment, test)| EpisodeTrace {
            establishment,
            test: test.expect("test step"),
        })
        .collect();
    Ok(Rollout { traces, vars })
}
