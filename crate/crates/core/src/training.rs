//! Guide pretraining, gated-learner training and greedy validation.
//!
//! Training batches are unrolled over whole episodes. Episodes in a batch are
//! sorted by decreasing length so the live episodes at every step form a
//! prefix of the batch; finished rows are dropped with `slice_rows`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    encode_observations, GateMode, GatedModel, GuidePretrainModel, Inference, Memories, OBS_CHANNELS, REPR_DIM,
};
use crate::analysis::{self, FrameRecord};
use crate::diffcore::{argmax, Adam, AdamConfig, Binder, CheckpointError, OptimError, ParameterStore, Tape, Var};
use crate::expert::{self, Demonstration, PlannerError};
use crate::gridworld::{self, Action, EnvError, EnvState, Level, MissionSpec, Observation, VIEW_SIZE};
use crate::seeds::{self, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("demonstration {index} does not replay: {source}")]
    Replay { index: usize, source: EnvError },
    #[error("{stage}: loss became non-finite at epoch {epoch}, batch {batch} ({episodes} episodes, {frames} frames, loss {loss})")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        batch: usize,
        episodes: usize,
        frames: usize,
        loss: f64,
    },
    #[error("{stage}: {source}")]
    Optim { stage: &'static str, source: OptimError },
    #[error("guide checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Sink(String),
}

fn default_name() -> String {
    "run".into()
}
fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-3
}
fn default_validation() -> usize {
    500
}
fn default_gate_bias() -> f64 {
    crate::agents::DEFAULT_GATE_BIAS
}
fn default_runs() -> usize {
    3
}
fn default_pretrain_epochs() -> usize {
    20
}
fn default_checkpoint_every() -> usize {
    10
}
fn default_heatmap_rollouts() -> usize {
    64
}

/// Experiment configuration. `lambda` and `demo_count` default per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_episodes: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_count: Option<usize>,
    #[serde(default = "default_validation")]
    pub validation_episodes: usize,
    #[serde(default = "default_gate_bias")]
    pub gate_bias_init: f64,
    /// Independent learner initializations, seeded `seed, seed + 1, ...`.
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    /// Save the gated model every this many epochs (0: final epoch only).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_heatmap_rollouts")]
    pub heatmap_rollouts: usize,
}

impl TrainConfig {
    pub fn new(level: Level) -> Self {
        serde_json::from_value(serde_json::json!({ "level": level })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(match self.level {
            Level::GoToObj => 0.3,
            Level::PutNextLocal => 0.05,
        })
    }

    pub fn demo_count(&self) -> usize {
        self.demo_count.unwrap_or(match self.level {
            Level::GoToObj => 20_000,
            Level::PutNextLocal => 50_000,
        })
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        let lambda = self.lambda();
        if !(lambda.is_finite() && lambda >= 0.0) {
            return bad(format!("lambda must be a finite non-negative number, got {lambda}"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !self.gate_bias_init.is_finite() {
            return bad("gate_bias_init must be finite".into());
        }
        for (name, v) in [
            ("batch_episodes", self.batch_episodes),
            ("demo_count", self.demo_count()),
            ("validation_episodes", self.validation_episodes),
            ("runs", self.runs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name {:?} is not a plain directory name", self.name));
        }
        Ok(())
    }
}

/// `l_ce + lambda * g`.
pub fn gated_loss(l_ce: f64, g: u8, lambda: f64) -> Result<f64, TrainError> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(TrainError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    if g > 1 {
        return Err(TrainError::Config(format!("gate must be 0 or 1, got {g}")));
    }
    Ok(l_ce + lambda * f64::from(g))
}

/// Which gate the learner trains and validates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Learned gate with penalty `lambda`.
    Gated,
    /// Gate fixed closed: the learner never sees a message.
    Alone,
    /// Gate fixed open, no penalty.
    Guided,
}

impl TrainMode {
    pub fn gate_mode(self) -> GateMode {
        match self {
            TrainMode::Gated => GateMode::Learned,
            TrainMode::Alone => GateMode::Forced(0),
            TrainMode::Guided => GateMode::Forced(1),
        }
    }

    pub fn lambda(self, config: &TrainConfig) -> f64 {
        match self {
            TrainMode::Guided => 0.0,
            _ => config.lambda(),
        }
    }

    pub fn needs_guide(self) -> bool {
        self != TrainMode::Alone
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Gated => "none",
            TrainMode::Alone => "alone",
            TrainMode::Guided => "guided",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" | "gated" => Ok(TrainMode::Gated),
            "alone" => Ok(TrainMode::Alone),
            "guided" => Ok(TrainMode::Guided),
            _ => Err(format!("unknown baseline {s:?} (expected none, alone or guided)")),
        }
    }
}

/// A demonstration expanded into observations and expert labels.
#[derive(Debug, Clone)]
pub struct Episode {
    pub instruction: Vec<usize>,
    pub observations: Vec<Observation>,
    pub labels: Vec<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn episodes_from_demos(demos: &[Demonstration]) -> Result<Vec<Episode>, TrainError> {
    demos
        .par_iter()
        .enumerate()
        .map(|(index, d)| {
            let states = d.states().map_err(|source| TrainError::Replay { index, source })?;
            let observations: Vec<_> = states[..d.length()].iter().map(EnvState::observe).collect();
            Ok(Episode {
                instruction: states[0].spec.instruction_tokens(),
                observations,
                labels: d.actions.iter().map(|&a| usize::from(a)).collect(),
            })
        })
        .collect()
}

/// Shuffled batches of episode indices for one epoch, each sorted by
/// decreasing episode length.
pub fn epoch_batches(episodes: &[Episode], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Shuffle, epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(batch)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_by_key(|&i| std::cmp::Reverse(episodes[i].len()));
            c
        })
        .collect()
}

/// Loss bookkeeping for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub epoch: usize,
    pub batch: usize,
    pub frames: usize,
    /// Mean of `L_ce + lambda * g` over frames, as differentiated.
    pub loss: f64,
    pub mean_ce: f64,
    pub mean_gate: f64,
    pub lambda: f64,
}

impl BatchLoss {
    pub fn decomposition_residual(&self) -> f64 {
        (self.loss - self.mean_ce - self.lambda * self.mean_gate).abs()
    }
}

struct Unrolled {
    loss: Var,
    ce_sum: f64,
    gate_sum: f64,
    frames: usize,
}

fn obs_constant(tape: &mut Tape, eps: &[&Episode], t: usize) -> Var {
    let k = eps.len();
    let (data, _) = encode_observations(eps.iter().map(|e| &e.observations[t]));
    tape.constant(data, &[k, VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS])
}

fn live_prefix(eps: &[&Episode], t: usize) -> usize {
    eps.iter().take_while(|e| e.len() > t).count()
}

fn accumulate(tape: &mut Tape, total: Option<Var>, x: Var) -> Option<Var> {
    Some(match total {
        Some(acc) => tape.add(acc, x),
        None => x,
    })
}

fn unroll_gated(
    model: &GatedModel,
    tape: &mut Tape,
    binder: &mut Binder,
    eps: &[&Episode],
    mode: GateMode,
    lambda: f64,
) -> Unrolled {
    let n = eps.len();
    let instructions: Vec<&[usize]> = eps.iter().map(|e| e.instruction.as_slice()).collect();
    let full_ctx = model.context(tape, binder, &instructions);
    let mut ctx = full_ctx;
    let mut h_l = tape.constant(vec![0.0; n * REPR_DIM], &[n, REPR_DIM]);
    let mut h_g = tape.constant(vec![0.0; n * REPR_DIM], &[n, REPR_DIM]);
    let (mut ce_total, mut g_total) = (None, None);
    let mut rows = n;
    let mut frames = 0;
    for t in 0..eps[0].len() {
        let k = live_prefix(eps, t);
        if k < rows {
            h_l = tape.slice_rows(h_l, k);
            h_g = tape.slice_rows(h_g, k);
            ctx = full_ctx.prefix(tape, k);
            rows = k;
        }
        let obs = obs_constant(tape, &eps[..k], t);
        let labels: Vec<usize> = eps[..k].iter().map(|e| e.labels[t]).collect();
        let v = model.step(tape, binder, &ctx, obs, h_l, h_g, mode);
        let ce = tape.cross_entropy_rows(v.logits, &labels);
        let ce = tape.sum(ce);
        let g = tape.sum(v.gate);
        ce_total = accumulate(tape, ce_total, ce);
        g_total = accumulate(tape, g_total, g);
        h_l = v.r;
        h_g = v.h_guide;
        frames += k;
    }
    let (ce_total, g_total) = (ce_total.expect("non-empty batch"), g_total.expect("non-empty batch"));
    let penalty = tape.scale(g_total, lambda);
    let total = tape.add(ce_total, penalty);
    let loss = tape.scale(total, 1.0 / frames as f64);
    Unrolled {
        loss,
        ce_sum: tape.scalar(ce_total),
        gate_sum: tape.scalar(g_total),
        frames,
    }
}

fn unroll_pretrain(model: &GuidePretrainModel, tape: &mut Tape, binder: &mut Binder, eps: &[&Episode]) -> Unrolled {
    let n = eps.len();
    let instructions: Vec<&[usize]> = eps.iter().map(|e| e.instruction.as_slice()).collect();
    let full_film = model.film(tape, binder, &instructions);
    let mut film = full_film;
    let mut h = tape.constant(vec![0.0; n * REPR_DIM], &[n, REPR_DIM]);
    let mut ce_total = None;
    let mut rows = n;
    let mut frames = 0;
    for t in 0..eps[0].len() {
        let k = live_prefix(eps, t);
        if k < rows {
            h = tape.slice_rows(h, k);
            film = full_film.prefix(tape, k);
            rows = k;
        }
        let obs = obs_constant(tape, &eps[..k], t);
        let labels: Vec<usize> = eps[..k].iter().map(|e| e.labels[t]).collect();
        let (hg, logits) = model.step(tape, binder, &film, obs, h);
        let ce = tape.cross_entropy_rows(logits, &labels);
        let ce = tape.sum(ce);
        ce_total = accumulate(tape, ce_total, ce);
        h = hg;
        frames += k;
    }
    let ce_total = ce_total.expect("non-empty batch");
    let loss = tape.scale(ce_total, 1.0 / frames as f64);
    Unrolled {
        loss,
        ce_sum: tape.scalar(ce_total),
        gate_sum: 0.0,
        frames,
    }
}

/// One greedy pass over validation missions.
#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub frames: Vec<FrameRecord>,
    pub successes: usize,
    pub episodes: usize,
}

pub fn validation_missions(config: &TrainConfig) -> Vec<MissionSpec> {
    (0..config.validation_episodes)
        .map(|i| gridworld::generate_mission(config.level, expert::validation_mission_seed(config.seed, i)))
        .collect()
}

/// Expert label for a state the learner reached; `Done` if the planner has
/// no answer (e.g. the learner picked up the GoTo target).
pub fn expert_label(state: &EnvState) -> Action {
    expert::expert_action(state).unwrap_or(Action::Done)
}

const INFER_CHUNK: usize = 64;

/// Greedy batched rollouts. `step` maps (observation, memory) pairs to
/// (action, new memory, payload); `record` sees every frame before the action
/// is applied.
fn greedy_rollouts<M, T, S, R>(missions: &[MissionSpec], step: S, mut record: R) -> Vec<bool>
where
    M: Clone + Default + Send + Sync,
    T: Send,
    S: Fn(&[(&Observation, &M)]) -> Vec<(usize, M, T)> + Sync,
    R: FnMut(usize, &EnvState, usize, T),
{
    let mut states: Vec<EnvState> = missions.iter().map(gridworld::reset).collect();
    let mut memories = vec![M::default(); missions.len()];
    loop {
        let live: Vec<usize> = (0..states.len()).filter(|&i| !states[i].done).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<Observation> = live.iter().map(|&i| states[i].observe()).collect();
        let items: Vec<(&Observation, &M)> = live.iter().zip(&obs).map(|(&i, o)| (o, &memories[i])).collect();
        let outputs: Vec<(usize, M, T)> = items.par_chunks(INFER_CHUNK).flat_map_iter(&step).collect();
        for (&i, (action, memory, payload)) in live.iter().zip(outputs) {
            record(i, &states[i], action, payload);
            states[i]
                .step(Action::from_id(action).expect("valid action id"))
                .expect("live episode");
            memories[i] = memory;
        }
    }
    states.iter().map(|s| s.success).collect()
}

/// Greedy validation of the gated model; frames are ordered by (episode, t).
pub fn validate(model: &GatedModel, missions: &[MissionSpec], mode: GateMode) -> Validation {
    let mut per_episode: Vec<Vec<FrameRecord>> = vec![Vec::new(); missions.len()];
    let step = |items: &[(&Observation, &Memories)]| -> Vec<(usize, Memories, Inference)> {
        model
            .infer(items, mode)
            .into_iter()
            .map(|inf| (argmax(&inf.dist), inf.memories.clone(), inf))
            .collect()
    };
    let outcomes = greedy_rollouts(missions, step, |ep, state, action, inf: Inference| {
        let (d1, d2) = analysis::observation_type(state);
        let frames = &mut per_episode[ep];
        frames.push(FrameRecord {
            ep,
            t: frames.len() + 1,
            len: 0,
            agent_pos: [state.agent_pos.col, state.agent_pos.row],
            action: action as u8,
            expert: expert_label(state).id() as u8,
            g: inf.g,
            msg: inf.message.words,
            p_nat: inf.dist,
            p_open: inf.p_open,
            p_closed: inf.p_closed,
            obs_type: [d1, d2],
        });
    });
    let mut frames = Vec::new();
    for mut ep_frames in per_episode {
        let len = ep_frames.len();
        for f in &mut ep_frames {
            f.len = len;
        }
        frames.extend(ep_frames);
    }
    Validation {
        frames,
        successes: outcomes.iter().filter(|&&s| s).count(),
        episodes: missions.len(),
    }
}

/// Validation statistics of one epoch; `None` marks an empty condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub success_rate: f64,
    pub accuracy: f64,
    pub guidance_rate: f64,
    pub acc_gate_open: Option<f64>,
    pub acc_gate_closed: Option<f64>,
    pub acc_forced_open: Option<f64>,
    pub acc_forced_closed: Option<f64>,
    pub loss_open_factual: Option<f64>,
    pub loss_open_counterfactual: Option<f64>,
    pub loss_closed_factual: Option<f64>,
    pub loss_closed_counterfactual: Option<f64>,
    pub entropy_open_factual: Option<f64>,
    pub entropy_open_counterfactual: Option<f64>,
    pub entropy_closed_factual: Option<f64>,
    pub entropy_closed_counterfactual: Option<f64>,
    pub mean_total_loss: f64,
    pub mean_ce: f64,
}

impl EpochMetrics {
    pub const COLUMNS: [&'static str; 18] = [
        "epoch",
        "success_rate",
        "accuracy",
        "guidance_rate",
        "acc_gate_open",
        "acc_gate_closed",
        "acc_forced_open",
        "acc_forced_closed",
        "loss_open_factual",
        "loss_open_counterfactual",
        "loss_closed_factual",
        "loss_closed_counterfactual",
        "entropy_open_factual",
        "entropy_open_counterfactual",
        "entropy_closed_factual",
        "entropy_closed_counterfactual",
        "mean_total_loss",
        "mean_ce",
    ];

    pub fn from_validation(epoch: usize, v: &Validation, lambda: f64) -> Self {
        let frames = &v.frames;
        let n = frames.len() as f64;
        let correct = frames.iter().filter(|f| f.action == f.expert).count();
        let ces: Vec<f64> = frames
            .iter()
            .map(|f| analysis::cross_entropy(&f.p_nat, usize::from(f.expert)))
            .collect();
        let mean_ce = ces.iter().sum::<f64>() / n;
        let mean_total_loss = frames
            .iter()
            .zip(&ces)
            .map(|(f, ce)| ce + lambda * f64::from(f.g))
            .sum::<f64>()
            / n;
        let losses = analysis::counterfactual_losses(frames);
        let entropies = analysis::counterfactual_entropies(frames);
        EpochMetrics {
            epoch,
            success_rate: v.successes as f64 / v.episodes as f64,
            accuracy: correct as f64 / n,
            guidance_rate: analysis::guidance_rate(frames).expect("validation produced frames"),
            acc_gate_open: analysis::conditional_accuracy(frames, 1),
            acc_gate_closed: analysis::conditional_accuracy(frames, 0),
            acc_forced_open: analysis::intervention_accuracy(frames, 1),
            acc_forced_closed: analysis::intervention_accuracy(frames, 0),
            loss_open_factual: losses.open_factual,
            loss_open_counterfactual: losses.open_counterfactual,
            loss_closed_factual: losses.closed_factual,
            loss_closed_counterfactual: losses.closed_counterfactual,
            entropy_open_factual: entropies.open_factual,
            entropy_open_counterfactual: entropies.open_counterfactual,
            entropy_closed_factual: entropies.closed_factual,
            entropy_closed_counterfactual: entropies.closed_counterfactual,
            mean_total_loss,
            mean_ce,
        }
    }

    pub fn csv_fields(&self) -> Vec<String> {
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = vec![
            self.epoch.to_string(),
            self.success_rate.to_string(),
            self.accuracy.to_string(),
            self.guidance_rate.to_string(),
        ];
        out.extend(
            [
                self.acc_gate_open,
                self.acc_gate_closed,
                self.acc_forced_open,
                self.acc_forced_closed,
                self.loss_open_factual,
                self.loss_open_counterfactual,
                self.loss_closed_factual,
                self.loss_closed_counterfactual,
                self.entropy_open_factual,
                self.entropy_open_counterfactual,
                self.entropy_closed_factual,
                self.entropy_closed_counterfactual,
            ]
            .map(o),
        );
        out.push(self.mean_total_loss.to_string());
        out.push(self.mean_ce.to_string());
        out
    }
}

/// Metrics CSV with a leading `run_seed` column.
pub fn metrics_csv_header() -> String {
    let mut s = String::from("run_seed");
    for c in EpochMetrics::COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    s
}

pub fn metrics_csv_row(run_seed: u64, m: &EpochMetrics) -> String {
    let mut s = run_seed.to_string();
    for f in m.csv_fields() {
        write!(s, ",{f}").unwrap();
    }
    s.push('\n');
    s
}

/// Training-side summary of one epoch (the CSV reports validation metrics).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpoch {
    pub batches: Vec<BatchLoss>,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub guidance_rate: f64,
}

fn summarize(batches: Vec<BatchLoss>) -> TrainEpoch {
    let frames: usize = batches.iter().map(|b| b.frames).sum();
    let w = |f: fn(&BatchLoss) -> f64| batches.iter().map(|b| f(b) * b.frames as f64).sum::<f64>() / frames as f64;
    TrainEpoch {
        mean_loss: w(|b| b.loss),
        mean_ce: w(|b| b.mean_ce),
        guidance_rate: w(|b| b.mean_gate),
        batches,
    }
}

pub fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    }
}

/// One pass over `episodes` with per-batch Adam updates of every parameter.
#[allow(clippy::too_many_arguments)]
pub fn train_gated_epoch(
    model: &mut GatedModel,
    adam: &mut Adam,
    episodes: &[Episode],
    config: &TrainConfig,
    mode: TrainMode,
    run_seed: u64,
    epoch: usize,
) -> Result<TrainEpoch, TrainError> {
    let lambda = mode.lambda(config);
    let mut batches = Vec::new();
    for (b, idx) in epoch_batches(episodes, config.batch_episodes, run_seed, epoch).iter().enumerate() {
        let eps: Vec<&Episode> = idx.iter().map(|&i| &episodes[i]).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let u = unroll_gated(model, &mut tape, &mut binder, &eps, mode.gate_mode(), lambda);
        let loss = tape.scalar(u.loss);
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                stage: "train",
                epoch,
                batch: b,
                episodes: eps.len(),
                frames: u.frames,
                loss,
            });
        }
        let mut grads = tape.backward(u.loss);
        let grads = binder.gradients(&mut grads);
        drop(tape);
        adam.step(&mut model.store, &grads)
            .map_err(|source| TrainError::Optim { stage: "train", source })?;
        batches.push(BatchLoss {
            epoch,
            batch: b,
            frames: u.frames,
            loss,
            mean_ce: u.ce_sum / u.frames as f64,
            mean_gate: u.gate_sum / u.frames as f64,
            lambda,
        });
    }
    Ok(summarize(batches))
}

/// Fresh learner, gate, encoder and policy; guide copied from `guide` when given.
pub fn init_gated_model(config: &TrainConfig, run_seed: u64, guide: Option<&ParameterStore>) -> Result<GatedModel, TrainError> {
    let mut model = GatedModel::new(run_seed, config.gate_bias_init);
    if let Some(guide) = guide {
        let loaded = model.store.load_from(guide)?;
        if loaded != guide.len() {
            return Err(TrainError::Config(format!(
                "guide checkpoint has {} tensors but only {loaded} match the model",
                guide.len()
            )));
        }
    }
    Ok(model)
}

/// What a run reports after each validation (epoch 0 validates the initial model).
pub struct EpochReport<'a> {
    pub run_seed: u64,
    pub metrics: &'a EpochMetrics,
    pub validation: &'a Validation,
    pub train: Option<&'a TrainEpoch>,
    pub model: &'a GatedModel,
}

/// Train one learner for `config.epochs` epochs, validating before training
/// and after every epoch.
pub fn train_run(
    config: &TrainConfig,
    mode: TrainMode,
    guide: Option<&ParameterStore>,
    episodes: &[Episode],
    run_seed: u64,
    mut on_epoch: impl FnMut(EpochReport) -> Result<(), TrainError>,
) -> Result<GatedModel, TrainError> {
    if mode.needs_guide() && guide.is_none() {
        return Err(TrainError::Config(format!("baseline {} needs a pretrained guide", mode.name())));
    }
    let mut model = init_gated_model(config, run_seed, guide)?;
    let mut adam = Adam::new(&model.store, adam_config(config));
    let missions = validation_missions(config);
    let lambda = mode.lambda(config);
    for epoch in 0..=config.epochs {
        let train = if epoch == 0 {
            None
        } else {
            Some(train_gated_epoch(&mut model, &mut adam, episodes, config, mode, run_seed, epoch)?)
        };
        let validation = validate(&model, &missions, mode.gate_mode());
        let metrics = EpochMetrics::from_validation(epoch, &validation, lambda);
        log::info!(
            "run {run_seed} epoch {epoch}: success {:.3} accuracy {:.3} guidance {:.3}",
            metrics.success_rate,
            metrics.accuracy,
            metrics.guidance_rate
        );
        on_epoch(EpochReport {
            run_seed,
            metrics: &metrics,
            validation: &validation,
            train: train.as_ref(),
            model: &model,
        })?;
    }
    Ok(model)
}

/// Per-epoch progress of guide pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_success: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: GuidePretrainModel,
    pub history: Vec<PretrainEpoch>,
}

impl PretrainOutcome {
    /// The artifact worth saving: guide parameters only.
    pub fn guide(&self) -> ParameterStore {
        self.model.guide_params()
    }
}

/// Greedy validation of the guide + bottleneck policy: (accuracy, success rate).
pub fn validate_pretrain(model: &GuidePretrainModel, missions: &[MissionSpec]) -> (f64, f64) {
    #[derive(Clone)]
    struct Hidden(Vec<f64>);
    impl Default for Hidden {
        fn default() -> Self {
            Hidden(vec![0.0; REPR_DIM])
        }
    }
    let step = |items: &[(&Observation, &Hidden)]| -> Vec<(usize, Hidden, ())> {
        let flat: Vec<(&Observation, &[f64])> = items.iter().map(|(o, h)| (*o, h.0.as_slice())).collect();
        model
            .infer(&flat)
            .into_iter()
            .map(|(p, _, h)| (argmax(&p), Hidden(h), ()))
            .collect()
    };
    let (mut frames, mut correct) = (0usize, 0usize);
    let outcomes = greedy_rollouts(missions, step, |_, state, action, ()| {
        frames += 1;
        correct += usize::from(expert_label(state).id() == action);
    });
    let successes = outcomes.iter().filter(|&&s| s).count();
    (correct as f64 / frames as f64, successes as f64 / missions.len() as f64)
}

/// Train guide + temporary encoder/policy through the discrete bottleneck.
pub fn pretrain_guide(config: &TrainConfig, episodes: &[Episode]) -> Result<PretrainOutcome, TrainError> {
    let mut model = GuidePretrainModel::new(config.seed);
    let mut adam = Adam::new(&model.store, adam_config(config));
    let missions = validation_missions(config);
    let mut history = Vec::new();
    for epoch in 1..=config.pretrain_epochs {
        let (mut loss_sum, mut frames) = (0.0, 0usize);
        for (b, idx) in epoch_batches(episodes, config.batch_episodes, config.seed, epoch).iter().enumerate() {
            let eps: Vec<&Episode> = idx.iter().map(|&i| &episodes[i]).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.store);
            let u = unroll_pretrain(&model, &mut tape, &mut binder, &eps);
            let loss = tape.scalar(u.loss);
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    stage: "pretrain",
                    epoch,
                    batch: b,
                    episodes: eps.len(),
                    frames: u.frames,
                    loss,
                });
            }
            let mut grads = tape.backward(u.loss);
            let grads = binder.gradients(&mut grads);
            drop(tape);
            adam.step(&mut model.store, &grads)
                .map_err(|source| TrainError::Optim { stage: "pretrain", source })?;
            loss_sum += u.ce_sum;
            frames += u.frames;
        }
        let (val_accuracy, val_success) = validate_pretrain(&model, &missions);
        log::info!("pretrain epoch {epoch}: loss {:.4} accuracy {val_accuracy:.3}", loss_sum / frames as f64);
        history.push(PretrainEpoch {
            epoch,
            train_loss: loss_sum / frames as f64,
            val_accuracy,
            val_success,
        });
    }
    Ok(PretrainOutcome { model, history })
}

/// Expert demonstrations for the configured training missions.
pub fn generate_demos(config: &TrainConfig) -> Result<Vec<Demonstration>, TrainError> {
    Ok(expert::generate_demos(config.level, config.demo_count(), config.seed)?)
}
