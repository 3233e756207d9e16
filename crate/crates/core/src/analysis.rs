//! Statistics over validation frame logs.
//!
//! Everything here is a pure function of [`FrameRecord`]s except
//! [`build_heatmap`], which rolls out a model. Cells with no supporting
//! frames are reported as `None` and written as empty CSV fields.

use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{GateMode, GatedModel, Memories, Message, NUM_MESSAGES};
use crate::diffcore::argmax;
use crate::gridworld::{self, Action, Cell, EnvState, MissionSpec, NUM_ACTIONS};
use crate::seeds::{self, Stream};

pub const NUM_QUANTILES: usize = 10;
pub const NUM_OBS_TYPES: usize = 9;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("guidance rate is undefined on an empty frame set")]
    EmptyFrames,
}

/// One validation time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub ep: usize,
    /// 1-indexed time step.
    pub t: usize,
    pub len: usize,
    pub agent_pos: [i32; 2],
    pub action: u8,
    pub expert: u8,
    pub g: u8,
    pub msg: [u8; 2],
    pub p_nat: [f64; NUM_ACTIONS],
    pub p_open: [f64; NUM_ACTIONS],
    pub p_closed: [f64; NUM_ACTIONS],
    pub obs_type: [u8; 2],
}

impl FrameRecord {
    /// The natural distribution is the forced one matching the applied gate.
    pub fn is_consistent(&self) -> bool {
        let forced = if self.g == 1 { &self.p_open } else { &self.p_closed };
        self.p_nat.iter().zip(forced).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn forced(&self, g: u8) -> &[f64; NUM_ACTIONS] {
        if g == 1 {
            &self.p_open
        } else {
            &self.p_closed
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("frame record serializes")
    }
}

/// Natural-log Shannon entropy; `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).fold(0.0, |h, &x| h - x * x.ln())
}

/// `-ln p[label]`.
pub fn cross_entropy(p: &[f64], label: usize) -> f64 {
    -p[label].ln()
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn guidance_rate(frames: &[FrameRecord]) -> Result<f64, AnalysisError> {
    let opened = frames.iter().filter(|f| f.g == 1).count();
    ratio(opened, frames.len()).ok_or(AnalysisError::EmptyFrames)
}

/// Fraction of correct actions among frames whose gate equals `gate_value`.
pub fn conditional_accuracy(frames: &[FrameRecord], gate_value: u8) -> Option<f64> {
    let cell: Vec<_> = frames.iter().filter(|f| f.g == gate_value).collect();
    ratio(cell.iter().filter(|f| f.action == f.expert).count(), cell.len())
}

/// Accuracy of the greedy action under the gate forced to `forced_g`, over all frames.
pub fn intervention_accuracy(frames: &[FrameRecord], forced_g: u8) -> Option<f64> {
    let hits = frames
        .iter()
        .filter(|f| argmax(f.forced(forced_g)) == usize::from(f.expert))
        .count();
    ratio(hits, frames.len())
}

/// Means bucketed by natural gate; "counterfactual" is the opposite gate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Buckets {
    pub open_factual: Option<f64>,
    pub open_counterfactual: Option<f64>,
    pub closed_factual: Option<f64>,
    pub closed_counterfactual: Option<f64>,
}

impl Buckets {
    pub const NAMES: [&'static str; 4] = [
        "open_factual",
        "open_counterfactual",
        "closed_factual",
        "closed_counterfactual",
    ];

    pub fn values(&self) -> [Option<f64>; 4] {
        [
            self.open_factual,
            self.open_counterfactual,
            self.closed_factual,
            self.closed_counterfactual,
        ]
    }
}

fn bucketed(frames: &[FrameRecord], stat: impl Fn(&FrameRecord, &[f64; NUM_ACTIONS]) -> f64) -> Buckets {
    let by_gate = |g: u8, forced: u8| mean(frames.iter().filter(|f| f.g == g).map(|f| stat(f, f.forced(forced))));
    Buckets {
        open_factual: by_gate(1, 1),
        open_counterfactual: by_gate(1, 0),
        closed_factual: by_gate(0, 0),
        closed_counterfactual: by_gate(0, 1),
    }
}

pub fn counterfactual_losses(frames: &[FrameRecord]) -> Buckets {
    bucketed(frames, |f, p| cross_entropy(p, usize::from(f.expert)))
}

pub fn counterfactual_entropies(frames: &[FrameRecord]) -> Buckets {
    bucketed(frames, |_, p| entropy(p))
}

/// Guidance rate within one category plus the category's share of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateCell {
    pub rate: Option<f64>,
    pub count: usize,
    pub opened: usize,
    pub freq: f64,
}

fn rates_by(frames: &[FrameRecord], categories: usize, key: impl Fn(&FrameRecord) -> usize) -> Vec<RateCell> {
    let mut count = vec![0usize; categories];
    let mut opened = vec![0usize; categories];
    for f in frames {
        let k = key(f);
        count[k] += 1;
        opened[k] += usize::from(f.g == 1);
    }
    let total = frames.len();
    (0..categories)
        .map(|k| RateCell {
            rate: ratio(opened[k], count[k]),
            count: count[k],
            opened: opened[k],
            freq: ratio(count[k], total).unwrap_or(0.0),
        })
        .collect()
}

pub fn guidance_by_action(frames: &[FrameRecord]) -> Vec<RateCell> {
    rates_by(frames, NUM_ACTIONS, |f| usize::from(f.action))
}

pub fn guidance_by_message(frames: &[FrameRecord]) -> Vec<RateCell> {
    rates_by(frames, NUM_MESSAGES, |f| Message::new(f.msg[0], f.msg[1]).index())
}

/// Indexed by `3 · d1 + d2`.
pub fn guidance_by_obs_type(frames: &[FrameRecord]) -> Vec<RateCell> {
    rates_by(frames, NUM_OBS_TYPES, |f| usize::from(f.obs_type[0]) * 3 + usize::from(f.obs_type[1]))
}

/// Quantile `k ∈ 1..=10` of time step `t` in an episode of length `len`.
pub fn time_quantile(t: usize, len: usize) -> usize {
    assert!(1 <= t && t <= len, "time step {t} outside episode of length {len}");
    (NUM_QUANTILES * t).div_ceil(len)
}

/// Indexed by `k - 1`.
pub fn guidance_by_quantile(frames: &[FrameRecord]) -> Vec<RateCell> {
    rates_by(frames, NUM_QUANTILES, |f| time_quantile(f.t, f.len) - 1)
}

/// Shared (color, kind) features between the goal object and the objects
/// orthogonally left and right of the agent.
pub fn observation_type(state: &EnvState) -> (u8, u8) {
    let goal = state.typing_goal();
    let side = |p| match state.cell(p) {
        Cell::Object(i) => state.objects[i].shared_features(&goal),
        Cell::Wall | Cell::Empty => 0,
    };
    (
        side(state.agent_pos.step(state.agent_dir.left())),
        side(state.agent_pos.step(state.agent_dir.right())),
    )
}

/// Per-cell sums of the applied gate and visit counts, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapGrid {
    pub size: usize,
    pub gate_sum: Vec<u64>,
    pub count: Vec<u64>,
}

impl HeatmapGrid {
    pub fn new(size: usize) -> Self {
        HeatmapGrid {
            size,
            gate_sum: vec![0; size * size],
            count: vec![0; size * size],
        }
    }

    pub fn rate(&self, col: usize, row: usize) -> Option<f64> {
        let i = row * self.size + col;
        ratio(self.gate_sum[i] as usize, self.count[i] as usize)
    }

    pub fn total_count(&self) -> u64 {
        self.count.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,rate,count\n");
        for row in 0..self.size {
            for col in 0..self.size {
                let i = row * self.size + col;
                writeln!(out, "{row},{col},{},{}", opt(self.rate(col, row)), self.count[i]).unwrap();
            }
        }
        out
    }
}

/// Greedy rollouts of `model` on `spec`, each starting from a random free
/// pose drawn from `derive(seed, Heatmap, i)`. The applied gate is summed at
/// the agent's cell before every action.
pub fn build_heatmap(model: &GatedModel, spec: &MissionSpec, n_rollouts: usize, seed: u64, mode: GateMode) -> HeatmapGrid {
    let mut grid = HeatmapGrid::new(spec.grid_size as usize);
    let mut states: Vec<EnvState> = (0..n_rollouts)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, Stream::Heatmap, i as u64));
            gridworld::reset_with_rng(spec, &mut rng)
        })
        .collect();
    let mut memories = vec![Memories::default(); n_rollouts];
    loop {
        let live: Vec<usize> = (0..n_rollouts).filter(|&i| !states[i].done).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<_> = live.iter().map(|&i| states[i].observe()).collect();
        let items: Vec<_> = live.iter().zip(&obs).map(|(&i, o)| (o, &memories[i])).collect();
        let out = model.infer(&items, mode);
        for (&i, inf) in live.iter().zip(out) {
            let p = states[i].agent_pos;
            let cell = p.row as usize * grid.size + p.col as usize;
            grid.count[cell] += 1;
            grid.gate_sum[cell] += u64::from(inf.g);
            let action = Action::from_id(argmax(&inf.dist)).expect("action id");
            states[i].step(action).expect("live episode");
            memories[i] = inf.memories;
        }
    }
    grid
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Frames of one validation epoch.
pub type EpochFrames<'a> = (usize, &'a [FrameRecord]);

pub fn by_action_csv(epochs: &[EpochFrames]) -> String {
    let mut out = String::from("epoch,action,rate,freq\n");
    for &(epoch, frames) in epochs {
        for (a, c) in guidance_by_action(frames).iter().enumerate() {
            writeln!(out, "{epoch},{a},{},{}", opt(c.rate), c.freq).unwrap();
        }
    }
    out
}

pub fn by_message_csv(epochs: &[EpochFrames]) -> String {
    let mut out = String::from("epoch,w0,w1,rate,freq\n");
    for &(epoch, frames) in epochs {
        for (m, c) in guidance_by_message(frames).iter().enumerate() {
            let words = Message::from_index(m).words;
            writeln!(out, "{epoch},{},{},{},{}", words[0], words[1], opt(c.rate), c.freq).unwrap();
        }
    }
    out
}

/// Only observation types that actually occur get a row.
pub fn by_obstype_csv(epochs: &[EpochFrames]) -> String {
    let mut out = String::from("epoch,d1,d2,rate,freq\n");
    for &(epoch, frames) in epochs {
        for (k, c) in guidance_by_obs_type(frames).iter().enumerate() {
            if c.count > 0 {
                writeln!(out, "{epoch},{},{},{},{}", k / 3, k % 3, opt(c.rate), c.freq).unwrap();
            }
        }
    }
    out
}

pub fn quantiles_csv(epochs: &[EpochFrames]) -> String {
    let mut out = String::from("epoch,k,rate\n");
    for &(epoch, frames) in epochs {
        for (k, c) in guidance_by_quantile(frames).iter().enumerate() {
            writeln!(out, "{epoch},{},{}", k + 1, opt(c.rate)).unwrap();
        }
    }
    out
}

pub fn counterfactual_csv(epochs: &[EpochFrames]) -> String {
    let mut out = String::from("epoch,bucket,loss,entropy\n");
    for &(epoch, frames) in epochs {
        let losses = counterfactual_losses(frames).values();
        let entropies = counterfactual_entropies(frames).values();
        for (i, name) in Buckets::NAMES.iter().enumerate() {
            writeln!(out, "{epoch},{name},{},{}", opt(losses[i]), opt(entropies[i])).unwrap();
        }
    }
    out
}
