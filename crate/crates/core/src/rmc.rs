//! The relational memory core cell: a fixed set of memory slots updated by
//! attention over the previous memory plus the projected input, wrapped in
//! LSTM-style gating shared across slots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_blocks, AttentionParams, AttentionTrace};
use crate::nn::{linear_apply, xavier_uniform, Linear, ParamSet};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Gate granularity: one gate value per memory element, or one scalar per
/// memory row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStyle {
    Unit,
    Memory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmcConfig {
    /// N: number of memory rows.
    pub mem_slots: usize,
    /// F: width of each memory row.
    pub mem_size: usize,
    /// h: attention heads; must divide mem_size.
    pub num_heads: usize,
    /// Iterations of attention per timestep.
    pub num_blocks: usize,
    pub gate_style: GateStyle,
    /// When false the hidden state is tanh(m) with no output gate.
    pub use_output_gate: bool,
    /// Fixed offset added to the forget gate pre-activation.
    pub forget_bias: f64,
    pub input_size: usize,
    /// d_k: query/key width per head.
    pub key_size: usize,
}

impl RmcConfig {
    /// Defaults aside from the task-driven input width; key width is one
    /// head's share of the memory.
    pub fn new(mem_slots: usize, mem_size: usize, num_heads: usize, input_size: usize) -> Self {
        RmcConfig {
            mem_slots,
            mem_size,
            num_heads,
            num_blocks: 1,
            gate_style: GateStyle::Unit,
            use_output_gate: false,
            forget_bias: 1.0,
            input_size,
            key_size: mem_size / num_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("mem_slots", self.mem_slots),
            ("mem_size", self.mem_size),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("input_size", self.input_size),
            ("key_size", self.key_size),
        ] {
            if v == 0 {
                return Err(TensorError::Contract(format!("rmc config: {name} must be >= 1")));
            }
        }
        if !self.mem_size.is_multiple_of(self.num_heads) {
            return Err(TensorError::Contract(format!(
                "rmc config: mem_size {} not divisible by num_heads {}",
                self.mem_size, self.num_heads
            )));
        }
        Ok(())
    }

    /// Total elements of the memory matrix; the capacity knob.
    pub fn total_units(&self) -> usize {
        self.mem_slots * self.mem_size
    }

    /// Width of the flattened per-step output.
    pub fn output_size(&self) -> usize {
        self.total_units()
    }

    fn gate_width(&self) -> usize {
        match self.gate_style {
            GateStyle::Unit => self.mem_size,
            GateStyle::Memory => 1,
        }
    }
}

/// Input/recurrent weights and bias for the forget, input, and output
/// gates. Matrices for unit gating, single columns for memory gating;
/// shared across rows either way.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub w_f: T,
    pub u_f: T,
    pub b_f: T,
    pub w_i: T,
    pub u_i: T,
    pub b_i: T,
    pub w_o: T,
    pub u_o: T,
    pub b_o: T,
}

#[derive(Debug, Clone)]
pub struct RmcParams<T> {
    pub input_proj: Linear<T>,
    pub blocks: Vec<AttentionParams<T>>,
    pub gates: GateParams<T>,
}

impl RmcParams<Tensor> {
    pub fn init(config: &RmcConfig, rng: &mut impl Rng) -> Self {
        let gw = config.gate_width();
        let (f, input) = (config.mem_size, config.input_size);
        RmcParams {
            input_proj: Linear::xavier(rng, input, f),
            blocks: (0..config.num_blocks)
                .map(|_| AttentionParams::init(rng, f, config.num_heads, config.key_size))
                .collect(),
            gates: GateParams {
                w_f: xavier_uniform(rng, input, gw),
                u_f: xavier_uniform(rng, f, gw),
                b_f: Tensor::zeros(1, gw),
                w_i: xavier_uniform(rng, input, gw),
                u_i: xavier_uniform(rng, f, gw),
                b_i: Tensor::zeros(1, gw),
                w_o: xavier_uniform(rng, input, gw),
                u_o: xavier_uniform(rng, f, gw),
                b_o: Tensor::zeros(1, gw),
            },
        }
    }

    /// All-zero parameters with the right shapes; the target for
    /// checkpoint loading and the cheap route to a parameter count.
    pub fn zeros(config: &RmcConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = RmcParams::init(config, &mut rng);
        params.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        params
    }

    pub fn bind(&self, tape: &mut Tape) -> RmcParams<Var> {
        let g = &self.gates;
        RmcParams {
            input_proj: self.input_proj.bind(tape),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            gates: GateParams {
                w_f: tape.leaf(g.w_f.clone()),
                u_f: tape.leaf(g.u_f.clone()),
                b_f: tape.leaf(g.b_f.clone()),
                w_i: tape.leaf(g.w_i.clone()),
                u_i: tape.leaf(g.u_i.clone()),
                b_i: tape.leaf(g.b_i.clone()),
                w_o: tape.leaf(g.w_o.clone()),
                u_o: tape.leaf(g.u_o.clone()),
                b_o: tape.leaf(g.b_o.clone()),
            },
        }
    }

}

impl<T> RmcParams<T> {
    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        self.input_proj.visit_at(&format!("{prefix}.input_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_at(&format!("{prefix}.blocks.{i}"), f);
        }
        let g = &self.gates;
        for (name, t) in [
            ("w_f", &g.w_f),
            ("u_f", &g.u_f),
            ("b_f", &g.b_f),
            ("w_i", &g.w_i),
            ("u_i", &g.u_i),
            ("b_i", &g.b_i),
            ("w_o", &g.w_o),
            ("u_o", &g.u_o),
            ("b_o", &g.b_o),
        ] {
            f(&format!("{prefix}.gates.{name}"), t);
        }
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        self.input_proj.visit_at_mut(&format!("{prefix}.input_proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_at_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        let g = &mut self.gates;
        for (name, t) in [
            ("w_f", &mut g.w_f),
            ("u_f", &mut g.u_f),
            ("b_f", &mut g.b_f),
            ("w_i", &mut g.w_i),
            ("u_i", &mut g.u_i),
            ("b_i", &mut g.b_i),
            ("w_o", &mut g.w_o),
            ("u_o", &mut g.u_o),
            ("b_o", &mut g.b_o),
        ] {
            f(&format!("{prefix}.gates.{name}"), t);
        }
    }
}

impl ParamSet for RmcParams<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_at("rmc", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_at_mut("rmc", f);
    }
}

/// Exact number of scalar parameters for a config. Independent of the
/// number of memory slots: everything is shared across rows.
pub fn param_count(config: &RmcConfig) -> usize {
    RmcParams::zeros(config).param_count()
}

/// Recurrent state: the memory matrix (cell states) and the hidden matrix,
/// both N x F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmcState {
    pub memory: Tensor,
    pub hidden: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Row i of M is the basis vector e_i truncated or zero-padded to F.
    IdentityPadded,
    /// I.i.d. standard normal draws from the seeded generator.
    RandomNormal,
}

pub fn init_state(config: &RmcConfig, mode: InitMode, seed: u64) -> RmcState {
    let (n, f) = (config.mem_slots, config.mem_size);
    let memory = match mode {
        InitMode::IdentityPadded => {
            let mut m = Tensor::zeros(n, f);
            for i in 0..n.min(f) {
                m.set(i, i, 1.0);
            }
            m
        }
        InitMode::RandomNormal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..n * f).map(|_| standard_normal(&mut rng)).collect();
            Tensor::new(n, f, data)
        }
    };
    RmcState {
        memory,
        hidden: Tensor::zeros(n, f),
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero so ln stays finite.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Tape handles produced by one step of the core.
pub struct StepVars {
    pub memory: Var,
    pub hidden: Var,
    /// Row-major flattening of the hidden matrix, 1 x (N*F).
    pub output: Var,
    /// Attention weights, `[block][head]`.
    pub attention: Vec<Vec<Var>>,
    /// Post-sigmoid gates, N x F (unit) or N x 1 (memory).
    pub forget_gate: Var,
    pub input_gate: Var,
}

/// One recurrence step on an existing tape. The raw input drives the
/// gates; its linear projection is appended as an extra row for attention.
pub fn step_on_tape(
    tape: &mut Tape,
    params: &RmcParams<Var>,
    config: &RmcConfig,
    memory: Var,
    hidden: Var,
    x: Var,
) -> Result<StepVars> {
    let (xr, xc) = tape.shape(x);
    if (xr, xc) != (1, config.input_size) {
        return Err(TensorError::Dim {
            op: "rmc_step(input)",
            lhs: (1, config.input_size),
            rhs: (xr, xc),
        });
    }
    let x_proj = linear_apply(tape, &params.input_proj, x)?;
    let (m_tilde, attention) = attend_blocks(tape, &params.blocks, memory, Some(x_proj))?;

    let gate_pre = |tape: &mut Tape, w: Var, u: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(hidden, u)?;
        let s = tape.add(hu, xw)?;
        tape.add(s, b)
    };
    let g = &params.gates;
    let f_pre = gate_pre(tape, g.w_f, g.u_f, g.b_f)?;
    let i_pre = gate_pre(tape, g.w_i, g.u_i, g.b_i)?;
    let f_shifted = tape.shift(f_pre, config.forget_bias);
    let forget_gate = tape.sigmoid(f_shifted);
    let input_gate = tape.sigmoid(i_pre);

    let kept = tape.mul(memory, forget_gate)?;
    let written = tape.mul(m_tilde, input_gate)?;
    let m_next = tape.add(kept, written)?;

    let m_act = tape.tanh(m_next);
    let h_next = if config.use_output_gate {
        let o_pre = gate_pre(tape, g.w_o, g.u_o, g.b_o)?;
        let o_gate = tape.sigmoid(o_pre);
        tape.mul(m_act, o_gate)?
    } else {
        m_act
    };
    let output = tape.reshape(h_next, 1, config.total_units())?;
    Ok(StepVars {
        memory: m_next,
        hidden: h_next,
        output,
        attention,
        forget_gate,
        input_gate,
    })
}

fn trace_values(tape: &Tape, attention: &[Vec<Var>], timestep: usize) -> AttentionTrace {
    AttentionTrace {
        weights: attention
            .iter()
            .map(|heads| heads.iter().map(|&w| tape.value(w).clone()).collect())
            .collect(),
        timestep,
    }
}

/// Value-level single step: output vector, next state, attention trace.
pub fn rmc_step(
    params: &RmcParams<Tensor>,
    config: &RmcConfig,
    state: &RmcState,
    x_t: &[f64],
) -> Result<(Vec<f64>, RmcState, AttentionTrace)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let m = tape.leaf(state.memory.clone());
    let h = tape.leaf(state.hidden.clone());
    let x = tape.leaf(Tensor::row(x_t));
    let step = step_on_tape(&mut tape, &bound, config, m, h, x)?;
    let next = RmcState {
        memory: tape.value(step.memory).clone(),
        hidden: tape.value(step.hidden).clone(),
    };
    let output = tape.value(step.output).data().to_vec();
    let trace = trace_values(&tape, &step.attention, 0);
    Ok((output, next, trace))
}

/// Sequential application over T inputs, threading the state.
pub fn unroll(
    params: &RmcParams<Tensor>,
    config: &RmcConfig,
    state0: &RmcState,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, RmcState, Vec<AttentionTrace>)> {
    assert!(!inputs.is_empty(), "unroll needs at least one input");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut m = tape.leaf(state0.memory.clone());
    let mut h = tape.leaf(state0.hidden.clone());
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for (t, x_t) in inputs.iter().enumerate() {
        let x = tape.leaf(Tensor::row(x_t));
        let step = step_on_tape(&mut tape, &bound, config, m, h, x)?;
        outputs.push(tape.value(step.output).data().to_vec());
        traces.push(trace_values(&tape, &step.attention, t));
        m = step.memory;
        h = step.hidden;
    }
    let final_state = RmcState {
        memory: tape.value(m).clone(),
        hidden: tape.value(h).clone(),
    };
    Ok((outputs, final_state, traces))
}
