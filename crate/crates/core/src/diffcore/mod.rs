//! Minimal reverse-mode differentiation: exactly the operations the agent
//! networks need, plus straight-through estimators for the binary gate and
//! the discrete message.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, AdamConfig, OptimError};
pub use params::{Binder, CheckpointError, Param, ParamId, ParameterStore};
pub use tape::{argmax, sigmoid, Gradients, Tape, Var};

/// Fully connected layer parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// GRU cell parameters: input and hidden projections to `3 * hidden`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_hid: ParamId,
    pub b_hid: ParamId,
    pub hidden: usize,
}

impl LinearParams {
    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Var {
        let w = binder.var(tape, self.w);
        let b = self.b.map(|b| binder.var(tape, b));
        tape.linear(x, w, b)
    }
}

impl GruParams {
    pub fn apply(&self, tape: &mut Tape, binder: &mut Binder, x: Var, h: Var) -> Var {
        let (w_in, b_in) = (binder.var(tape, self.w_in), binder.var(tape, self.b_in));
        let (w_hid, b_hid) = (binder.var(tape, self.w_hid), binder.var(tape, self.b_hid));
        let gi = tape.linear(x, w_in, Some(b_in));
        let gh = tape.linear(h, w_hid, Some(b_hid));
        tape.gru_combine(gi, gh, h)
    }
}

#[cfg(test)]
mod tests;
