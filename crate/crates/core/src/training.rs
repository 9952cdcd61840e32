//! Differentiable self-play training and the four error metrics.
//!
//! One parameter set plays both roles. Relaxed teacher messages are fed to
//! the student on the same tape, so the student's losses reach the teacher
//! through the channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{PolicyConfig, PolicyParams};
use crate::autodiff::{cce, Tape, Var};
use crate::channel::{ChannelConfig, ChannelMode, TemperatureSchedule};
use crate::env::{EpisodeTrace, ObservationSpace};
use crate::error::{Error, Result};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::rollout::{rollout, Rollout, Teacher};
use crate::seeds::derive_seed;
use crate::tensor::{argmax, softmax, Scalar, Tensor};

// ---------------------------------------------------------------------------
// Metrics on recorded traces

fn one_hot_f64(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Class a student ought to predict: the mean class of establishment steps
/// whose delivered symbol equals the final one, uniform if none match.
pub fn implied_class(trace: &EpisodeTrace, classes: usize) -> Vec<f64> {
    let final_sym = argmax(&trace.test.message);
    let matches: Vec<usize> = trace
        .establishment
        .iter()
        .filter(|s| argmax(&s.message) == final_sym)
        .map(|s| s.class - 1)
        .collect();
    if matches.is_empty() {
        return vec![1.0 / classes as f64; classes];
    }
    let mut target = vec![0.0; classes];
    for &c in &matches {
        target[c] += 1.0 / matches.len() as f64;
    }
    target
}

/// `CCE(y_hat_f, y_f)`.
pub fn loss_ac(trace: &EpisodeTrace) -> f64 {
    let pred = &trace.test.prediction;
    cce(pred, &one_hot_f64(trace.test.class - 1, pred.len())).expect("matching lengths")
}

/// `CCE(y_hat_f, y*)` with `y*` from [`implied_class`].
pub fn loss_sic(trace: &EpisodeTrace) -> f64 {
    let pred = &trace.test.prediction;
    cce(pred, &implied_class(trace, pred.len())).expect("matching lengths")
}

/// `CCE(softmax(u_f), m_t)` where `o_t = o_f`, with `m_t` as the teacher sent it.
pub fn loss_tm(trace: &EpisodeTrace) -> f64 {
    let t = trace
        .step_showing_final()
        .expect("establishment shows every observation");
    let pred = softmax(&trace.test.utterance);
    cce(&pred, &trace.establishment[t].sent).expect("matching lengths")
}

/// Largest column sum of the matrix whose rows are the establishment messages.
pub fn loss_pd(trace: &EpisodeTrace) -> f64 {
    let vocab = trace.test.message.len();
    let mut cols = vec![0.0f64; vocab];
    for s in &trace.establishment {
        for (c, &v) in cols.iter_mut().zip(&s.message) {
            *c += v;
        }
    }
    cols.into_iter().fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// The same metrics as differentiable batch means

pub fn tape_loss_ac<T: Scalar>(tape: &mut Tape<T>, r: &Rollout) -> Result<Var> {
    let classes = tape.value(r.vars.prediction).cols();
    let labels: Vec<usize> = r.traces.iter().map(|t| t.test.class - 1).collect();
    let target = tape.constant(Tensor::one_hot_rows(&labels, classes));
    tape.cce(r.vars.prediction, target)
}

/// Target `y*` is a constant; gradient reaches the student and, through `m_f`, the teacher.
pub fn tape_loss_sic<T: Scalar>(tape: &mut Tape<T>, r: &Rollout) -> Result<Var> {
    let classes = tape.value(r.vars.prediction).cols();
    let rows: Vec<Vec<T>> = r
        .traces
        .iter()
        .map(|t| {
            implied_class(t, classes)
                .into_iter()
                .map(T::from_f64)
                .collect()
        })
        .collect();
    let target = tape.constant(Tensor::from_rows(&rows)?);
    tape.cce(r.vars.prediction, target)
}

/// Target message is a constant; gradient reaches the final utterance.
pub fn tape_loss_tm<T: Scalar>(tape: &mut Tape<T>, r: &Rollout) -> Result<Var> {
    let n = r.establishment_steps();
    let final_utt = r.vars.utterances[n];
    let vocab = tape.value(final_utt).cols();
    let mut target = Tensor::<T>::zeros(r.traces.len(), vocab);
    for (b, trace) in r.traces.iter().enumerate() {
        let t = trace
            .step_showing_final()
            .ok_or_else(|| Error::Usage("hidden observation was never shown".into()))?;
        let sent = tape.value(r.vars.sent[t]).row_slice(b).to_vec();
        target.row_mut(b).copy_from_slice(&sent);
    }
    let target = tape.constant(target);
    let pred = tape.softmax(final_utt);
    tape.cce(pred, target)
}

/// Mean over episodes of the largest column sum of the relaxed establishment messages.
pub fn tape_loss_pd<T: Scalar>(tape: &mut Tape<T>, r: &Rollout) -> Result<Var> {
    let n = r.establishment_steps();
    let mut cols = r.vars.sent[0];
    for &m in &r.vars.sent[1..n] {
        cols = tape.add(cols, m)?;
    }
    let worst = tape.max_cols(cols);
    Ok(tape.mean(worst))
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSet {
    /// `L_AC` only.
    Ac,
    /// `L_SIC + L_TM + L_PD`.
    #[serde(alias = "sic-tm-pd")]
    SicTmPd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ac: f64,
    pub sic: f64,
    pub tm: f64,
    pub pd: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.ac += w * other.ac;
        self.sic += w * other.sic;
        self.tm += w * other.tm;
        self.pd += w * other.pd;
        self.total += w * other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    pub loss_set: LossSet,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub channel: ChannelConfig,
    pub schedule: TemperatureSchedule,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "steps_per_epoch and batch_size must be >= 1".into(),
            ));
        }
        if self.channel.vocab != self.policy.vocab {
            return Err(Error::Config(
                "channel and policy vocabularies differ".into(),
            ));
        }
        if self.channel.mode != ChannelMode::Training {
            return Err(Error::Config(
                "training needs a training-mode channel".into(),
            ));
        }
        if !(self.optimizer.learning_rate > 0.0) || !(0.0..1.0).contains(&self.optimizer.decay) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if let TemperatureSchedule::Fixed { temperature } = self.schedule {
            if !(temperature > 0.0) {
                return Err(Error::Config("temperature must be > 0".into()));
            }
        }
        ObservationSpace::new(self.policy.classes)?;
        self.channel.validate()
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step_count: usize,
    pub l_ac: f64,
    pub l_sic: f64,
    pub l_tm: f64,
    pub l_pd: f64,
    pub total: f64,
    pub selfplay_accuracy: f64,
    pub temperature: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,step_count,L_AC,L_SIC,L_TM,L_PD,total,selfplay_accuracy,temperature";

impl HistoryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.step_count,
            self.l_ac,
            self.l_sic,
            self.l_tm,
            self.l_pd,
            self.total,
            self.selfplay_accuracy,
            self.temperature
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Runs one differentiable batch. Returns per-metric batch means and the total on the tape.
pub fn run_batch<T: Scalar, R: rand::Rng + ?Sized>(
    tape: &mut Tape<T>,
    space: &ObservationSpace,
    bound: &crate::agent::BoundPolicy,
    channel: &ChannelConfig,
    loss_set: LossSet,
    batch: usize,
    rng: &mut R,
) -> Result<(Rollout, LossBreakdown, Var)> {
    let r = rollout(
        tape,
        space,
        Teacher::Policy(bound),
        bound,
        channel,
        batch,
        rng,
    )?;
    let ac = tape_loss_ac(tape, &r)?;
    let sic = tape_loss_sic(tape, &r)?;
    let tm = tape_loss_tm(tape, &r)?;
    let pd = tape_loss_pd(tape, &r)?;
    let total = match loss_set {
        LossSet::Ac => ac,
        LossSet::SicTmPd => {
            let s = tape.add(sic, tm)?;
            tape.add(s, pd)?
        }
    };
    let item = |v: Var| tape.value(v).values()[0].as_f64();
    let losses = LossBreakdown {
        ac: item(ac),
        sic: item(sic),
        tm: item(tm),
        pd: item(pd),
        total: item(total),
    };
    Ok((r, losses, total))
}

/// Discrete-channel self-play accuracy with the configured randomization.
pub fn selfplay_accuracy<R: rand::Rng + ?Sized>(
    params: &PolicyParams<f32>,
    channel: &ChannelConfig,
    episodes: usize,
    rng: &mut R,
) -> Result<f64> {
    let space = ObservationSpace::new(params.config.classes)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let r = rollout(
        &mut tape,
        &space,
        Teacher::Policy(&bound),
        &bound,
        &channel.discrete(),
        episodes,
        rng,
    )?;
    Ok(r.accuracy())
}

/// Stateful trainer; call [`Trainer::run_epoch`] until done.
pub struct Trainer {
    pub config: TrainConfig,
    space: ObservationSpace,
    params: PolicyParams<f32>,
    optimizer: RmsProp<f32>,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    history: Vec<HistoryRow>,
    steps: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let space = ObservationSpace::new(config.policy.classes)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
        let params = PolicyParams::init(config.policy, &mut init_rng);
        Ok(Self {
            space,
            params,
            optimizer: RmsProp::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1)),
            eval_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2)),
            history: Vec::new(),
            steps: 0,
            config,
        })
    }

    pub fn params(&self) -> &PolicyParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> PolicyParams<f32> {
        self.params
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_done(&self) -> bool {
        self.history.len() >= self.config.epochs
    }

    /// One optimizer step on a fresh batch.
    pub fn train_step(&mut self, temperature: f64) -> Result<LossBreakdown> {
        let epoch = self.history.len();
        let channel = ChannelConfig {
            temperature,
            ..self.config.channel.clone()
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (_, losses, total) = run_batch(
            &mut tape,
            &self.space,
            &bound,
            &channel,
            self.config.loss_set,
            self.config.batch_size,
            &mut self.rng,
        )?;
        let diverged = |detail: String| Error::Diverged {
            epoch,
            step: self.steps,
            detail,
        };
        if !tape.all_finite() {
            return Err(diverged("non-finite activation".into()));
        }
        let grads = tape.backward(total)?;
        let grads: Vec<Tensor<f32>> = bound
            .vars()
            .iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect();
        let mut params: Vec<&mut Tensor<f32>> = self.params.tensors_mut().iter_mut().collect();
        self.optimizer
            .step(&mut params, &grads)
            .map_err(|e| match e {
                Error::Diverged { detail, .. } => diverged(detail),
                other => other,
            })?;
        self.steps += 1;
        Ok(losses)
    }

    /// Trains one epoch and appends its history row.
    pub fn run_epoch(&mut self) -> Result<HistoryRow> {
        let epoch = self.history.len();
        let temperature = self.config.schedule.at(epoch);
        let mut mean = LossBreakdown::default();
        let w = 1.0 / self.config.steps_per_epoch as f64;
        for _ in 0..self.config.steps_per_epoch {
            let l = self.train_step(temperature)?;
            mean.add_scaled(&l, w);
        }
        let acc = selfplay_accuracy(
            &self.params,
            &self.config.channel,
            self.config.eval_episodes,
            &mut self.eval_rng,
        )?;
        let row = HistoryRow {
            epoch,
            step_count: self.steps,
            l_ac: mean.ac,
            l_sic: mean.sic,
            l_tm: mean.tm,
            l_pd: mean.pd,
            total: mean.total,
            selfplay_accuracy: acc,
            temperature,
        };
        log::debug!("epoch {epoch}: {}", row.csv_line());
        self.history.push(row.clone());
        Ok(row)
    }
}

/// Trained parameters and the full history.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams<f32>,
    pub history: Vec<HistoryRow>,
}

/// Trains for `config.epochs` epochs.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    let history = trainer.history.clone();
    Ok(TrainOutcome {
        params: trainer.into_params(),
        history,
    })
}
