//! Scripted planner used as the imitation label source.
//!
//! GoToObj is solved optimally by breadth-first search over (cell, heading).
//! PutNextLocal runs a phase plan: face the mover, pick it up, face a free
//! cell next to the anchor, drop.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{self, Action, Cell, Direction, EnvState, Goal, Level, Pos};
use crate::seeds::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlannerError {
    #[error("no path to the goal from {pos:?} facing {dir:?} (mission seed {seed})")]
    Unreachable { seed: u64, pos: Pos, dir: Direction },
    #[error("expert failed to finish mission seed {seed} within {steps} steps")]
    Timeout { seed: u64, steps: u32 },
}

/// BFS over (cell, heading) using only turn right / turn left / forward.
///
/// Returns `Ok(None)` when the agent already faces a cell accepted by
/// `is_target`, otherwise the first action of a shortest path, with ties
/// broken by smallest action id.
pub fn navigate(
    state: &EnvState,
    is_target: impl Fn(Pos) -> bool,
) -> Result<Option<Action>, PlannerError> {
    let size = state.spec.grid_size as usize;
    let index = |p: Pos, d: Direction| (p.row as usize * size + p.col as usize) * 4 + d.index();
    if is_target(state.front_pos()) {
        return Ok(None);
    }
    let mut seen = vec![false; size * size * 4];
    let mut queue = VecDeque::new();
    seen[index(state.agent_pos, state.agent_dir)] = true;
    queue.push_back((state.agent_pos, state.agent_dir, None::<Action>));
    while let Some((pos, dir, via)) = queue.pop_front() {
        for action in [Action::TurnRight, Action::TurnLeft, Action::Forward] {
            let (np, nd) = match action {
                Action::TurnRight => (pos, dir.right()),
                Action::TurnLeft => (pos, dir.left()),
                _ => {
                    let f = pos.step(dir);
                    if state.cell(f) != Cell::Empty {
                        continue;
                    }
                    (f, dir)
                }
            };
            let k = index(np, nd);
            if seen[k] {
                continue;
            }
            seen[k] = true;
            let via = via.or(Some(action));
            if is_target(np.step(nd)) {
                return Ok(via);
            }
            queue.push_back((np, nd, via));
        }
    }
    Err(PlannerError::Unreachable {
        seed: state.spec.seed,
        pos: state.agent_pos,
        dir: state.agent_dir,
    })
}

/// The expert's label for `state`.
pub fn expert_action(state: &EnvState) -> Result<Action, PlannerError> {
    match state.spec.goal {
        Goal::GoTo { target } => {
            let goal = |p: Pos| state.cell(p) == Cell::Object(target);
            // Already facing the goal: any no-op completes the mission.
            Ok(navigate(state, goal)?.unwrap_or(Action::Done))
        }
        Goal::PutNext { mover, anchor } => match state.carrying {
            Some(held) if held == mover => {
                let anchor_pos = state.objects[anchor].pos;
                let slot = |p: Pos| state.cell(p) == Cell::Empty && p.manhattan(anchor_pos) == 1;
                Ok(navigate(state, slot)?.unwrap_or(Action::Drop))
            }
            Some(_) => {
                // Holding the wrong object: put it down somewhere harmless.
                let anchor_pos = state.objects[anchor].pos;
                let spot = |p: Pos| state.cell(p) == Cell::Empty && p.manhattan(anchor_pos) > 1;
                Ok(navigate(state, spot)?.unwrap_or(Action::Drop))
            }
            None => {
                let goal = |p: Pos| state.cell(p) == Cell::Object(mover);
                Ok(navigate(state, goal)?.unwrap_or(Action::Pickup))
            }
        },
    }
}

/// Run the expert from `state` to the end of the episode.
pub fn solve(mut state: EnvState) -> Result<Vec<Action>, PlannerError> {
    let mut actions = Vec::new();
    while !state.done {
        let a = expert_action(&state)?;
        state.step(a).expect("live state");
        actions.push(a);
    }
    if state.success {
        Ok(actions)
    } else {
        Err(PlannerError::Timeout {
            seed: state.spec.seed,
            steps: state.step_count,
        })
    }
}

/// One expert episode, stored in replay form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub level: Level,
    #[serde(rename = "seed")]
    pub spec_seed: u64,
    pub actions: Vec<u8>,
    #[serde(default = "expert_flag")]
    pub expert: bool,
}

fn expert_flag() -> bool {
    true
}

impl Demonstration {
    pub fn length(&self) -> usize {
        self.actions.len()
    }

    /// States visited, starting with the reset state (`length() + 1` entries).
    pub fn states(&self) -> Result<Vec<EnvState>, gridworld::EnvError> {
        gridworld::replay(self.level, self.spec_seed, &self.actions)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("demonstration serializes")
    }
}

/// Mission seed used for training episode `index`.
pub fn train_mission_seed(seed: u64, index: usize) -> u64 {
    seeds::derive(seed, Stream::TrainMissions, index as u64)
}

/// Mission seed used for validation episode `index`.
pub fn validation_mission_seed(seed: u64, index: usize) -> u64 {
    seeds::derive(seed, Stream::ValidationMissions, index as u64)
}

pub fn demonstrate(level: Level, spec_seed: u64) -> Result<Demonstration, PlannerError> {
    let spec = gridworld::generate_mission(level, spec_seed);
    let actions = solve(gridworld::reset(&spec))?;
    Ok(Demonstration {
        level,
        spec_seed,
        actions: actions.into_iter().map(|a| a.id() as u8).collect(),
        expert: true,
    })
}

/// Expert demonstrations for `n_episodes` training missions, in episode order.
pub fn generate_demos(
    level: Level,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<Demonstration>, PlannerError> {
    (0..n_episodes)
        .into_par_iter()
        .map(|i| demonstrate(level, train_mission_seed(seed, i)))
        .collect()
}

pub fn demos_to_jsonl(demos: &[Demonstration]) -> String {
    let mut out = String::new();
    for d in demos {
        out.push_str(&d.to_json_line());
        out.push('\n');
    }
    out
}
