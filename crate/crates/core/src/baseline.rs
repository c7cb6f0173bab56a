//! Single-layer LSTM with the same training interface as the relational
//! core, used as the comparison model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{xavier_uniform, ParamSet};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmConfig {
    pub hidden_size: usize,
    pub input_size: usize,
    /// Added to the forget-gate pre-activation.
    pub forget_bias: f64,
}

impl LstmConfig {
    pub fn new(hidden_size: usize, input_size: usize) -> Self {
        LstmConfig {
            hidden_size,
            input_size,
            forget_bias: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.input_size == 0 {
            return Err(TensorError::Contract(
                "lstm config: hidden_size and input_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn output_size(&self) -> usize {
        self.hidden_size
    }
}

/// Input weights (input x hidden), recurrent weights (hidden x hidden),
/// and biases (1 x hidden) for the four standard gates.
#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    pub w_f: T,
    pub u_f: T,
    pub b_f: T,
    pub w_i: T,
    pub u_i: T,
    pub b_i: T,
    pub w_o: T,
    pub u_o: T,
    pub b_o: T,
    pub w_c: T,
    pub u_c: T,
    pub b_c: T,
}

impl LstmParams<Tensor> {
    pub fn init(config: &LstmConfig, rng: &mut impl Rng) -> Self {
        let (inp, hid) = (config.input_size, config.hidden_size);
        let mut make = || {
            (
                xavier_uniform(rng, inp, hid),
                xavier_uniform(rng, hid, hid),
                Tensor::zeros(1, hid),
            )
        };
        let (w_f, u_f, b_f) = make();
        let (w_i, u_i, b_i) = make();
        let (w_o, u_o, b_o) = make();
        let (w_c, u_c, b_c) = make();
        LstmParams {
            w_f,
            u_f,
            b_f,
            w_i,
            u_i,
            b_i,
            w_o,
            u_o,
            b_o,
            w_c,
            u_c,
            b_c,
        }
    }

    pub fn zeros(config: &LstmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = LstmParams::init(config, &mut rng);
        params.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        params
    }

    pub fn bind(&self, tape: &mut Tape) -> LstmParams<Var> {
        LstmParams {
            w_f: tape.leaf(self.w_f.clone()),
            u_f: tape.leaf(self.u_f.clone()),
            b_f: tape.leaf(self.b_f.clone()),
            w_i: tape.leaf(self.w_i.clone()),
            u_i: tape.leaf(self.u_i.clone()),
            b_i: tape.leaf(self.b_i.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            u_o: tape.leaf(self.u_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
            w_c: tape.leaf(self.w_c.clone()),
            u_c: tape.leaf(self.u_c.clone()),
            b_c: tape.leaf(self.b_c.clone()),
        }
    }

}

impl<T> LstmParams<T> {
    fn fields(&self) -> [(&'static str, &T); 12] {
        [
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
            ("w_c", &self.w_c),
            ("u_c", &self.u_c),
            ("b_c", &self.b_c),
        ]
    }

    pub fn visit_at(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (name, t) in self.fields() {
            f(&format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_at_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut T)) {
        for (name, t) in [
            ("w_f", &mut self.w_f),
            ("u_f", &mut self.u_f),
            ("b_f", &mut self.b_f),
            ("w_i", &mut self.w_i),
            ("u_i", &mut self.u_i),
            ("b_i", &mut self.b_i),
            ("w_o", &mut self.w_o),
            ("u_o", &mut self.u_o),
            ("b_o", &mut self.b_o),
            ("w_c", &mut self.w_c),
            ("u_c", &mut self.u_c),
            ("b_c", &mut self.b_c),
        ] {
            f(&format!("{prefix}.{name}"), t);
        }
    }
}

impl ParamSet for LstmParams<Tensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_at("lstm", f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_at_mut("lstm", f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(config: &LstmConfig) -> Self {
        LstmState {
            h: Tensor::zeros(1, config.hidden_size),
            c: Tensor::zeros(1, config.hidden_size),
        }
    }
}

/// One step on an existing tape; returns (h, c, output) vars with
/// output = h.
pub fn lstm_step_on_tape(
    tape: &mut Tape,
    params: &LstmParams<Var>,
    config: &LstmConfig,
    h_prev: Var,
    c_prev: Var,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let (xr, xc) = tape.shape(x);
    if (xr, xc) != (1, config.input_size) {
        return Err(TensorError::Dim {
            op: "lstm_step(input)",
            lhs: (1, config.input_size),
            rhs: (xr, xc),
        });
    }
    let gate_pre = |tape: &mut Tape, w: Var, u: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h_prev, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let f_pre = gate_pre(tape, params.w_f, params.u_f, params.b_f)?;
    let f_shifted = tape.shift(f_pre, config.forget_bias);
    let f = tape.sigmoid(f_shifted);
    let i_pre = gate_pre(tape, params.w_i, params.u_i, params.b_i)?;
    let i = tape.sigmoid(i_pre);
    let o_pre = gate_pre(tape, params.w_o, params.u_o, params.b_o)?;
    let o = tape.sigmoid(o_pre);
    let c_pre = gate_pre(tape, params.w_c, params.u_c, params.b_c)?;
    let c_cand = tape.tanh(c_pre);

    let kept = tape.mul(c_prev, f)?;
    let written = tape.mul(c_cand, i)?;
    let c_next = tape.add(kept, written)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(c_act, o)?;
    Ok((h_next, c_next, h_next))
}

/// Value-level step: output vector (= new hidden state) and next state.
pub fn lstm_step(
    params: &LstmParams<Tensor>,
    config: &LstmConfig,
    state: &LstmState,
    x_t: &[f64],
) -> Result<(Vec<f64>, LstmState)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let h = tape.leaf(state.h.clone());
    let c = tape.leaf(state.c.clone());
    let x = tape.leaf(Tensor::row(x_t));
    let (h_next, c_next, out) = lstm_step_on_tape(&mut tape, &bound, config, h, c, x)?;
    let next = LstmState {
        h: tape.value(h_next).clone(),
        c: tape.value(c_next).clone(),
    };
    Ok((tape.value(out).data().to_vec(), next))
}

pub fn lstm_unroll(
    params: &LstmParams<Tensor>,
    config: &LstmConfig,
    state0: &LstmState,
    inputs: &[Vec<f64>],
) -> Result<(Vec<Vec<f64>>, LstmState)> {
    assert!(!inputs.is_empty(), "unroll needs at least one input");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut h = tape.leaf(state0.h.clone());
    let mut c = tape.leaf(state0.c.clone());
    let mut outputs = Vec::with_capacity(inputs.len());
    for x_t in inputs {
        let x = tape.leaf(Tensor::row(x_t));
        let (h_next, c_next, out) = lstm_step_on_tape(&mut tape, &bound, config, h, c, x)?;
        outputs.push(tape.value(out).data().to_vec());
        h = h_next;
        c = c_next;
    }
    let final_state = LstmState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    };
    Ok((outputs, final_state))
}
