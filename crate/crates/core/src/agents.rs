//! Learner, guide, message encoder, gate and policy networks.
//!
//! ```text
//! r_t  = L(o_t, i)                       learner representation (FiLM + GRU memory)
//! m_t  = G(o_t, i)                       guide message, 2 words x 3 tokens
//! g_t  = [σ(gate(r_t)) > 0.5]            binary gate
//! a_t  = P(r_t, g_t · Enc(m_t))          policy over 7 actions
//! ```
//!
//! Parameters are name-spaced `learner.*`, `guide.*`, `encoder.*`, `gate.*`
//! and `policy.*`. Guide pretraining adds `pretrain.*`, which is never saved.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{argmax, sigmoid, Binder, GruParams, LinearParams, ParamId, ParameterStore, Tape, Var};
use crate::gridworld::{Observation, CHANNEL_CARDINALITY, NUM_ACTIONS, VIEW_SIZE, VOCAB};

pub const REPR_DIM: usize = 128;
pub const ENC_DIM: usize = 64;
pub const HIDDEN_DIM: usize = 64;
pub const WORD_EMBED_DIM: usize = 32;
pub const INSTR_DIM: usize = 32;
pub const CONV1_CHANNELS: usize = 16;
pub const CONV2_CHANNELS: usize = 32;
pub const KERNEL: usize = 3;
pub const MSG_WORDS: usize = 2;
pub const MSG_TOKENS: usize = 3;
pub const MSG_EMBED_DIM: usize = 16;
pub const NUM_MESSAGES: usize = MSG_TOKENS * MSG_TOKENS;
pub const DEFAULT_GATE_BIAS: f64 = 2.0;

/// One-hot channels per view cell (kind, color, state).
pub const OBS_CHANNELS: usize = CHANNEL_CARDINALITY[0] + CHANNEL_CARDINALITY[1] + CHANNEL_CARDINALITY[2];
const CONV_OUT: usize = VIEW_SIZE - 2 * (KERNEL - 1);
const FLAT_DIM: usize = CONV_OUT * CONV_OUT * CONV2_CHANNELS;

/// The guide's two-word utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message {
    pub words: [u8; MSG_WORDS],
}

impl Message {
    pub fn new(w0: u8, w1: u8) -> Self {
        assert!((w0 as usize) < MSG_TOKENS && (w1 as usize) < MSG_TOKENS, "message token out of range");
        Message { words: [w0, w1] }
    }

    pub fn all() -> impl Iterator<Item = Message> {
        (0..MSG_TOKENS as u8).flat_map(|a| (0..MSG_TOKENS as u8).map(move |b| Message::new(a, b)))
    }

    /// Index in `0..9`.
    pub fn index(self) -> usize {
        self.words[0] as usize * MSG_TOKENS + self.words[1] as usize
    }

    pub fn from_index(i: usize) -> Message {
        Message::new((i / MSG_TOKENS) as u8, (i % MSG_TOKENS) as u8)
    }

    /// Per-word argmax of word logits (ties to the lowest token).
    pub fn from_logits(logits: [[f64; MSG_TOKENS]; MSG_WORDS]) -> Message {
        Message::new(argmax(&logits[0]) as u8, argmax(&logits[1]) as u8)
    }

    fn one_hot(self, word: usize) -> [f64; MSG_TOKENS] {
        let mut v = [0.0; MSG_TOKENS];
        v[self.words[word] as usize] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision {
    pub score: f64,
    pub prob: f64,
    pub g: u8,
}

impl GateDecision {
    pub fn from_score(score: f64) -> Self {
        let prob = sigmoid(score);
        GateDecision {
            score,
            prob,
            g: u8::from(prob > 0.5),
        }
    }
}

/// How the gate value fed to the policy is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Natural gate computed from `r_t`.
    Learned,
    /// Gate overridden to the given value for every frame.
    Forced(u8),
}

/// One-hot encode a batch of observations into `[n, 7, 7, OBS_CHANNELS]`.
pub fn encode_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> (Vec<f64>, usize) {
    let mut out = Vec::new();
    let mut n = 0;
    for o in obs {
        for row in &o.grid {
            for cell in row {
                let base = out.len();
                out.resize(base + OBS_CHANNELS, 0.0);
                let mut offset = 0;
                for (ch, &card) in CHANNEL_CARDINALITY.iter().enumerate() {
                    let v = cell[ch] as usize;
                    assert!(v < card, "observation channel {ch} value {v} out of range");
                    out[base + offset + v] = 1.0;
                    offset += card;
                }
            }
        }
        n += 1;
    }
    (out, n)
}

fn linear_params(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearParams {
    let w = store.insert_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
    let b = bias.then(|| store.insert_uniform(&format!("{name}.b"), &[fan_out], fan_in, rng));
    LinearParams { w, b }
}

fn gru_params(store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> GruParams {
    GruParams {
        w_in: store.insert_uniform(&format!("{name}.w_in"), &[input, 3 * hidden], hidden, rng),
        b_in: store.insert_uniform(&format!("{name}.b_in"), &[3 * hidden], hidden, rng),
        w_hid: store.insert_uniform(&format!("{name}.w_hid"), &[hidden, 3 * hidden], hidden, rng),
        b_hid: store.insert_uniform(&format!("{name}.b_hid"), &[3 * hidden], hidden, rng),
        hidden,
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
}

/// Instruction-dependent FiLM coefficients for one batch.
#[derive(Debug, Clone, Copy)]
pub struct FilmCoefficients {
    gamma: [Var; 2],
    beta: [Var; 2],
    rows: usize,
}

impl FilmCoefficients {
    /// Restrict to the first `n` rows of the batch.
    pub fn prefix(self, tape: &mut Tape, n: usize) -> FilmCoefficients {
        if n == self.rows {
            return self;
        }
        FilmCoefficients {
            gamma: self.gamma.map(|v| tape.slice_rows(v, n)),
            beta: self.beta.map(|v| tape.slice_rows(v, n)),
            rows: n,
        }
    }
}

/// Representation unit: instruction GRU, two FiLM-modulated convolutions and
/// a GRU memory whose state is `r_t`.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationUnit {
    embed: ParamId,
    instr_gru: GruParams,
    conv: [ConvParams; 2],
    film: [LinearParams; 2],
    memory: GruParams,
}

impl RepresentationUnit {
    fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let embed = store.insert_uniform(&format!("{prefix}.embed"), &[VOCAB.len(), WORD_EMBED_DIM], 1, rng);
        let instr_gru = gru_params(store, rng, &format!("{prefix}.instr_gru"), WORD_EMBED_DIM, INSTR_DIM);
        let mut conv_layer = |name: &str, cin: usize, cout: usize| {
            let fan_in = KERNEL * KERNEL * cin;
            ConvParams {
                w: store.insert_uniform(&format!("{prefix}.{name}.w"), &[cout, KERNEL, KERNEL, cin], fan_in, rng),
                b: store.insert_uniform(&format!("{prefix}.{name}.b"), &[cout], fan_in, rng),
            }
        };
        let conv = [
            conv_layer("conv1", OBS_CHANNELS, CONV1_CHANNELS),
            conv_layer("conv2", CONV1_CHANNELS, CONV2_CHANNELS),
        ];
        let film = [CONV1_CHANNELS, CONV2_CHANNELS].map(|c| {
            let name = format!("{prefix}.film{}", if c == CONV1_CHANNELS { 1 } else { 2 });
            let w = store.insert_uniform(&format!("{name}.w"), &[INSTR_DIM, 2 * c], INSTR_DIM, rng);
            // gamma starts at 1, beta at 0
            let mut bias = vec![0.0; 2 * c];
            bias[..c].iter_mut().for_each(|v| *v = 1.0);
            let b = store.insert(&format!("{name}.b"), &[2 * c], bias);
            LinearParams { w, b: Some(b) }
        });
        let memory = gru_params(store, rng, &format!("{prefix}.memory"), FLAT_DIM, REPR_DIM);
        RepresentationUnit {
            embed,
            instr_gru,
            conv,
            film,
            memory,
        }
    }

    /// Encode equal-length token sequences and derive the FiLM coefficients.
    pub fn film_coefficients(&self, tape: &mut Tape, binder: &mut Binder, instructions: &[&[usize]]) -> FilmCoefficients {
        let n = instructions.len();
        let len = instructions[0].len();
        assert!(
            instructions.iter().all(|i| i.len() == len),
            "instructions in one batch must have equal length"
        );
        let table = binder.var(tape, self.embed);
        let mut h = tape.constant(vec![0.0; n * INSTR_DIM], &[n, INSTR_DIM]);
        for t in 0..len {
            let ids: Vec<usize> = instructions.iter().map(|i| i[t]).collect();
            let x = tape.gather_rows(table, &ids);
            h = self.instr_gru.apply(tape, binder, x, h);
        }
        let mut gamma = [h; 2];
        let mut beta = [h; 2];
        for (k, c) in [CONV1_CHANNELS, CONV2_CHANNELS].into_iter().enumerate() {
            let coeffs = self.film[k].apply(tape, binder, h);
            gamma[k] = tape.slice_cols(coeffs, 0, c);
            beta[k] = tape.slice_cols(coeffs, c, c);
        }
        FilmCoefficients { gamma, beta, rows: n }
    }

    /// One time step: `obs` is `[n, 7, 7, OBS_CHANNELS]`, `h_prev` is `[n, 128]`.
    /// Returns the new memory, which is also the representation `r_t`.
    pub fn step(&self, tape: &mut Tape, binder: &mut Binder, film: &FilmCoefficients, obs: Var, h_prev: Var) -> Var {
        let n = tape.shape(obs)[0];
        assert_eq!(film.rows, n, "FiLM coefficients for {} rows, batch has {n}", film.rows);
        let mut x = obs;
        for k in 0..2 {
            let (w, b) = (binder.var(tape, self.conv[k].w), binder.var(tape, self.conv[k].b));
            x = tape.conv2d(x, w, b);
            x = tape.channel_affine(x, film.gamma[k], film.beta[k]);
            x = tape.relu(x);
        }
        let flat = tape.reshape(x, &[n, FLAT_DIM]);
        self.memory.apply(tape, binder, flat, h_prev)
    }
}

/// Guide: a representation unit with its own memory plus two 3-way word heads.
#[derive(Debug, Clone, Copy)]
pub struct Guide {
    pub unit: RepresentationUnit,
    heads: [LinearParams; MSG_WORDS],
}

impl Guide {
    fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Self {
        let unit = RepresentationUnit::new(store, rng, "guide");
        let heads = [0, 1].map(|w| linear_params(store, rng, &format!("guide.word{w}"), REPR_DIM, MSG_TOKENS, true));
        Guide { unit, heads }
    }

    /// Word logits `[n, 3]` per word from the guide memory.
    pub fn word_logits(&self, tape: &mut Tape, binder: &mut Binder, h: Var) -> [Var; MSG_WORDS] {
        self.heads.map(|head| head.apply(tape, binder, h))
    }
}

/// Message encoder: per-word embedding lookup (as one-hot products so
/// straight-through gradients reach the guide) followed by a bias-free mix.
#[derive(Debug, Clone, Copy)]
pub struct MessageEncoder {
    tables: [ParamId; MSG_WORDS],
    mix: ParamId,
}

impl MessageEncoder {
    fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str) -> Self {
        let tables = [0, 1].map(|w| store.insert_uniform(&format!("{prefix}.word{w}"), &[MSG_TOKENS, MSG_EMBED_DIM], 1, rng));
        let mix = store.insert_uniform(&format!("{prefix}.mix"), &[MSG_WORDS * MSG_EMBED_DIM, ENC_DIM], MSG_WORDS * MSG_EMBED_DIM, rng);
        MessageEncoder { tables, mix }
    }

    /// `one_hots[w]` is `[n, 3]`; output `[n, 64]`.
    pub fn encode(&self, tape: &mut Tape, binder: &mut Binder, one_hots: [Var; MSG_WORDS]) -> Var {
        let parts: Vec<Var> = (0..MSG_WORDS)
            .map(|w| {
                let table = binder.var(tape, self.tables[w]);
                tape.matmul(one_hots[w], table)
            })
            .collect();
        let joined = tape.concat_cols(&parts);
        let mix = binder.var(tape, self.mix);
        tape.matmul(joined, mix)
    }
}

/// Gate: `128 -> 64 tanh -> 1`, thresholded sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct Gate {
    hidden: LinearParams,
    out: LinearParams,
}

impl Gate {
    fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, bias_init: f64) -> Self {
        let hidden = linear_params(store, rng, "gate.hidden", REPR_DIM, HIDDEN_DIM, true);
        let w = store.insert_uniform("gate.out.w", &[HIDDEN_DIM, 1], HIDDEN_DIM, rng);
        let b = store.insert_const("gate.out.b", &[1], bias_init);
        Gate {
            hidden,
            out: LinearParams { w, b: Some(b) },
        }
    }

    pub fn bias_id(&self) -> ParamId {
        self.out.b.expect("gate output has a bias")
    }

    /// Pre-activation score `[n, 1]`.
    pub fn score(&self, tape: &mut Tape, binder: &mut Binder, r: Var) -> Var {
        let h = self.hidden.apply(tape, binder, r);
        let h = tape.tanh(h);
        self.out.apply(tape, binder, h)
    }
}

/// Two-layer MLP policy producing 7 action logits.
#[derive(Debug, Clone, Copy)]
pub struct Policy {
    hidden: LinearParams,
    out: LinearParams,
}

impl Policy {
    fn new(store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize) -> Self {
        Policy {
            hidden: linear_params(store, rng, &format!("{prefix}.hidden"), input, HIDDEN_DIM, true),
            out: linear_params(store, rng, &format!("{prefix}.out"), HIDDEN_DIM, NUM_ACTIONS, true),
        }
    }

    pub fn logits(&self, tape: &mut Tape, binder: &mut Binder, input: Var) -> Var {
        let h = self.hidden.apply(tape, binder, input);
        let h = tape.tanh(h);
        self.out.apply(tape, binder, h)
    }
}

/// Per-episode recurrent state of the combined model.
#[derive(Debug, Clone, PartialEq)]
pub struct Memories {
    pub learner: Vec<f64>,
    pub guide: Vec<f64>,
}

impl Default for Memories {
    fn default() -> Self {
        Memories {
            learner: vec![0.0; REPR_DIM],
            guide: vec![0.0; REPR_DIM],
        }
    }
}

/// Instruction context for a batch: FiLM coefficients of both units.
#[derive(Debug, Clone, Copy)]
pub struct BatchContext {
    pub learner: FilmCoefficients,
    pub guide: FilmCoefficients,
}

impl BatchContext {
    pub fn prefix(self, tape: &mut Tape, n: usize) -> BatchContext {
        BatchContext {
            learner: self.learner.prefix(tape, n),
            guide: self.guide.prefix(tape, n),
        }
    }
}

/// Tape handles produced by one batched step of the gated model.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub r: Var,
    pub h_guide: Var,
    pub word_logits: [Var; MSG_WORDS],
    pub words: [Var; MSG_WORDS],
    pub encoding: Var,
    pub gate_score: Var,
    /// Gate value actually applied (`[n, 1]`, binary).
    pub gate: Var,
    pub logits: Var,
}

/// Learner + guide + encoder + gate + policy.
#[derive(Debug, Clone)]
pub struct GatedModel {
    pub store: ParameterStore,
    pub learner: RepresentationUnit,
    pub guide: Guide,
    pub encoder: MessageEncoder,
    pub gate: Gate,
    pub policy: Policy,
}

/// Output of a gradient-free step for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Distribution under the requested gate mode.
    pub dist: [f64; NUM_ACTIONS],
    pub p_open: [f64; NUM_ACTIONS],
    pub p_closed: [f64; NUM_ACTIONS],
    /// Natural gate decision (independent of the mode).
    pub natural: GateDecision,
    /// Gate value applied under the mode.
    pub g: u8,
    pub message: Message,
    pub memories: Memories,
}

fn row_array<const N: usize>(values: &[f64], row: usize) -> [f64; N] {
    values[row * N..(row + 1) * N].try_into().expect("row width")
}

impl GatedModel {
    pub fn new(seed: u64, gate_bias: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, crate::seeds::Stream::ParamInit, 0));
        let mut store = ParameterStore::new();
        let learner = RepresentationUnit::new(&mut store, &mut rng, "learner");
        let guide = Guide::new(&mut store, &mut rng);
        let encoder = MessageEncoder::new(&mut store, &mut rng, "encoder");
        let gate = Gate::new(&mut store, &mut rng, gate_bias);
        let policy = Policy::new(&mut store, &mut rng, "policy", REPR_DIM + ENC_DIM);
        GatedModel {
            store,
            learner,
            guide,
            encoder,
            gate,
            policy,
        }
    }

    pub fn context(&self, tape: &mut Tape, binder: &mut Binder, instructions: &[&[usize]]) -> BatchContext {
        BatchContext {
            learner: self.learner.film_coefficients(tape, binder, instructions),
            guide: self.guide.unit.film_coefficients(tape, binder, instructions),
        }
    }

    /// Policy logits for `(r, gate ⊙ Enc(m))`.
    pub fn gated_logits(&self, tape: &mut Tape, binder: &mut Binder, r: Var, encoding: Var, gate: Var) -> Var {
        let gated = tape.gate_rows(encoding, gate);
        let input = tape.concat_cols(&[r, gated]);
        self.policy.logits(tape, binder, input)
    }

    /// One differentiable step over a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        ctx: &BatchContext,
        obs: Var,
        h_learner: Var,
        h_guide: Var,
        mode: GateMode,
    ) -> StepVars {
        let n = tape.shape(obs)[0];
        let r = self.learner.step(tape, binder, &ctx.learner, obs, h_learner);
        let hg = self.guide.unit.step(tape, binder, &ctx.guide, obs, h_guide);
        let word_logits = self.guide.word_logits(tape, binder, hg);
        let words = word_logits.map(|l| tape.straight_through_argmax(l));
        let encoding = self.encoder.encode(tape, binder, words);
        let gate_score = self.gate.score(tape, binder, r);
        let gate = match mode {
            GateMode::Learned => tape.straight_through_threshold(gate_score),
            GateMode::Forced(g) => tape.constant(vec![f64::from(g); n], &[n, 1]),
        };
        let logits = self.gated_logits(tape, binder, r, encoding, gate);
        StepVars {
            r,
            h_guide: hg,
            word_logits,
            words,
            encoding,
            gate_score,
            gate,
            logits,
        }
    }

    /// Gradient-free batched step. Each item is (observation, memories);
    /// all instructions must have equal length.
    pub fn infer(&self, items: &[(&Observation, &Memories)], mode: GateMode) -> Vec<Inference> {
        let n = items.len();
        if n == 0 {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let instructions: Vec<&[usize]> = items.iter().map(|(o, _)| o.instruction.as_slice()).collect();
        let ctx = self.context(&mut tape, &mut binder, &instructions);
        let (obs_data, _) = encode_observations(items.iter().map(|(o, _)| *o));
        let obs = tape.constant(obs_data, &[n, VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS]);
        let flat = |f: fn(&Memories) -> &Vec<f64>| items.iter().flat_map(|(_, m)| f(m).iter().copied()).collect::<Vec<_>>();
        let h_l = tape.constant(flat(|m| &m.learner), &[n, REPR_DIM]);
        let h_g = tape.constant(flat(|m| &m.guide), &[n, REPR_DIM]);
        let vars = self.step(&mut tape, &mut binder, &ctx, obs, h_l, h_g, mode);
        let dist = tape.softmax_rows(vars.logits);
        let ones = tape.constant(vec![1.0; n], &[n, 1]);
        let zeros = tape.constant(vec![0.0; n], &[n, 1]);
        let open = self.gated_logits(&mut tape, &mut binder, vars.r, vars.encoding, ones);
        let open = tape.softmax_rows(open);
        let closed = self.gated_logits(&mut tape, &mut binder, vars.r, vars.encoding, zeros);
        let closed = tape.softmax_rows(closed);
        (0..n)
            .map(|i| {
                let wl = vars.word_logits.map(|w| row_array::<MSG_TOKENS>(tape.value(w), i));
                Inference {
                    dist: row_array(tape.value(dist), i),
                    p_open: row_array(tape.value(open), i),
                    p_closed: row_array(tape.value(closed), i),
                    natural: GateDecision::from_score(tape.value(vars.gate_score)[i]),
                    g: tape.value(vars.gate)[i] as u8,
                    message: Message::from_logits(wl),
                    memories: Memories {
                        learner: tape.value(vars.r)[i * REPR_DIM..(i + 1) * REPR_DIM].to_vec(),
                        guide: tape.value(vars.h_guide)[i * REPR_DIM..(i + 1) * REPR_DIM].to_vec(),
                    },
                }
            })
            .collect()
    }

    /// `r_t` and the new learner memory (they coincide) for one observation.
    pub fn represent(&self, obs: &Observation, h_prev: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let film = self.learner.film_coefficients(&mut tape, &mut binder, &[&obs.instruction]);
        let (data, _) = encode_observations([obs]);
        let o = tape.constant(data, &[1, VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS]);
        let h = tape.constant(h_prev.to_vec(), &[1, REPR_DIM]);
        let r = self.learner.step(&mut tape, &mut binder, &film, o, h);
        tape.value(r).to_vec()
    }

    /// Guide message and new guide memory for one observation.
    pub fn guide_message(&self, obs: &Observation, h_prev: &[f64]) -> (Message, Vec<f64>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let film = self.guide.unit.film_coefficients(&mut tape, &mut binder, &[&obs.instruction]);
        let (data, _) = encode_observations([obs]);
        let o = tape.constant(data, &[1, VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS]);
        let h = tape.constant(h_prev.to_vec(), &[1, REPR_DIM]);
        let hg = self.guide.unit.step(&mut tape, &mut binder, &film, o, h);
        let wl = self.guide.word_logits(&mut tape, &mut binder, hg);
        let logits = wl.map(|w| row_array::<MSG_TOKENS>(tape.value(w), 0));
        (Message::from_logits(logits), tape.value(hg).to_vec())
    }

    pub fn encode_message(&self, m: Message) -> Vec<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let one_hots = [0, 1].map(|w| tape.constant(m.one_hot(w).to_vec(), &[1, MSG_TOKENS]));
        let e = self.encoder.encode(&mut tape, &mut binder, one_hots);
        tape.value(e).to_vec()
    }

    pub fn gate_decide(&self, r: &[f64]) -> GateDecision {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let rv = tape.constant(r.to_vec(), &[1, REPR_DIM]);
        let s = self.gate.score(&mut tape, &mut binder, rv);
        GateDecision::from_score(tape.scalar(s))
    }

    /// Policy output with the gate decided by the model itself.
    pub fn forward_gated(&self, obs: &Observation, memories: &Memories) -> (Inference, GateDecision, Message) {
        let inf = self.infer(&[(obs, memories)], GateMode::Learned).pop().expect("one item");
        let (natural, message) = (inf.natural, inf.message);
        (inf, natural, message)
    }

    /// Same pass with the gate overridden to `g_forced`.
    pub fn forward_forced(&self, obs: &Observation, memories: &Memories, g_forced: u8) -> Inference {
        assert!(g_forced <= 1, "forced gate must be 0 or 1");
        self.infer(&[(obs, memories)], GateMode::Forced(g_forced)).pop().expect("one item")
    }
}

/// Guide plus a temporary encoder and a policy that sees only the encoded
/// message (the discrete bottleneck). Only `guide.*` is kept afterwards.
#[derive(Debug, Clone)]
pub struct GuidePretrainModel {
    pub store: ParameterStore,
    pub guide: Guide,
    pub encoder: MessageEncoder,
    pub policy: Policy,
}

impl GuidePretrainModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, crate::seeds::Stream::ParamInit, 1));
        let mut store = ParameterStore::new();
        let guide = Guide::new(&mut store, &mut rng);
        let encoder = MessageEncoder::new(&mut store, &mut rng, "pretrain.encoder");
        let policy = Policy::new(&mut store, &mut rng, "pretrain.policy", ENC_DIM);
        GuidePretrainModel {
            store,
            guide,
            encoder,
            policy,
        }
    }

    pub fn film(&self, tape: &mut Tape, binder: &mut Binder, instructions: &[&[usize]]) -> FilmCoefficients {
        self.guide.unit.film_coefficients(tape, binder, instructions)
    }

    /// Returns (new guide memory, action logits).
    pub fn step(&self, tape: &mut Tape, binder: &mut Binder, film: &FilmCoefficients, obs: Var, h: Var) -> (Var, Var) {
        let hg = self.guide.unit.step(tape, binder, film, obs, h);
        let words = self.guide.word_logits(tape, binder, hg).map(|l| tape.straight_through_argmax(l));
        let enc = self.encoder.encode(tape, binder, words);
        (hg, self.policy.logits(tape, binder, enc))
    }

    /// Parameters worth keeping: the guide only.
    pub fn guide_params(&self) -> ParameterStore {
        self.store.subset("guide.")
    }

    /// Gradient-free step: (action distribution, message, new memory) per item.
    pub fn infer(&self, items: &[(&Observation, &[f64])]) -> Vec<([f64; NUM_ACTIONS], Message, Vec<f64>)> {
        let n = items.len();
        if n == 0 {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let instructions: Vec<&[usize]> = items.iter().map(|(o, _)| o.instruction.as_slice()).collect();
        let film = self.film(&mut tape, &mut binder, &instructions);
        let (obs_data, _) = encode_observations(items.iter().map(|(o, _)| *o));
        let obs = tape.constant(obs_data, &[n, VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS]);
        let h = tape.constant(items.iter().flat_map(|(_, h)| h.iter().copied()).collect(), &[n, REPR_DIM]);
        let hg = self.guide.unit.step(&mut tape, &mut binder, &film, obs, h);
        let wl = self.guide.word_logits(&mut tape, &mut binder, hg);
        let words = wl.map(|l| tape.straight_through_argmax(l));
        let enc = self.encoder.encode(&mut tape, &mut binder, words);
        let logits = self.policy.logits(&mut tape, &mut binder, enc);
        let p = tape.softmax_rows(logits);
        (0..n)
            .map(|i| {
                let m = Message::from_logits(wl.map(|w| row_array::<MSG_TOKENS>(tape.value(w), i)));
                (
                    row_array(tape.value(p), i),
                    m,
                    tape.value(hg)[i * REPR_DIM..(i + 1) * REPR_DIM].to_vec(),
                )
            })
            .collect()
    }
}
