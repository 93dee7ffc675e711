//! LSTM cell and bidirectional sequence encoder, composed from tape
//! primitives so gradients come out of the same reverse sweep.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// One direction's weights: fused input-to-hidden and hidden-to-hidden maps
/// plus a single bias, four gate blocks each (input, forget, cell, output).
/// The forget-gate bias starts at 1.
pub struct LstmDirection {
    pub w_input: Param,  // [4H, d_in]
    pub w_hidden: Param, // [4H, H]
    pub bias: Param,     // [4H]
}

impl LstmDirection {
    pub fn new(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        for v in bias.data_mut()[hidden..2 * hidden].iter_mut() {
            *v = 1.0;
        }
        LstmDirection {
            w_input: Param::new(Tensor::uniform(vec![4 * hidden, d_in], 0.1, rng)),
            w_hidden: Param::new(Tensor::uniform(vec![4 * hidden, hidden], 0.1, rng)),
            bias: Param::new(bias),
        }
    }
}

/// Bidirectional encoder: two independent directional passes, outputs
/// concatenated per position to width `2 * hidden`.
pub struct BiLstm {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
    pub d_in: usize,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fwd: LstmDirection::new(d_in, hidden, rng),
            bwd: LstmDirection::new(d_in, hidden, rng),
            d_in,
            hidden,
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.hidden
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Param)> {
        vec![
            (format!("{prefix}.fwd.w_input"), self.fwd.w_input.clone()),
            (format!("{prefix}.fwd.w_hidden"), self.fwd.w_hidden.clone()),
            (format!("{prefix}.fwd.bias"), self.fwd.bias.clone()),
            (format!("{prefix}.bwd.w_input"), self.bwd.w_input.clone()),
            (format!("{prefix}.bwd.w_hidden"), self.bwd.w_hidden.clone()),
            (format!("{prefix}.bwd.bias"), self.bwd.bias.clone()),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BiLstmVars {
        BiLstmVars {
            fwd: LstmVars {
                w_input: tape.param(&self.fwd.w_input),
                w_hidden: tape.param(&self.fwd.w_hidden),
                bias: tape.param(&self.fwd.bias),
            },
            bwd: LstmVars {
                w_input: tape.param(&self.bwd.w_input),
                w_hidden: tape.param(&self.bwd.w_hidden),
                bias: tape.param(&self.bwd.bias),
            },
            hidden: self.hidden,
            d_in: self.d_in,
        }
    }
}

/// Tape-bound weights for one direction.
#[derive(Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
}

/// Tape-bound weights for both directions.
#[derive(Clone, Copy)]
pub struct BiLstmVars {
    pub fwd: LstmVars,
    pub bwd: LstmVars,
    pub hidden: usize,
    pub d_in: usize,
}

/// Standard LSTM recurrence for one step.
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
    hidden: usize,
) -> Result<(Var, Var)> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 1 {
        return Err(Error::dim("lstm_cell", format!("input shape {xs:?}")));
    }
    let zx = tape.matmul(p.w_input, x)?;
    let zh = tape.matmul(p.w_hidden, h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, p.bias)?;

    let gi = tape.slice(z, 0, hidden)?;
    let gf = tape.slice(z, hidden, 2 * hidden)?;
    let gc = tape.slice(z, 2 * hidden, 3 * hidden)?;
    let go = tape.slice(z, 3 * hidden, 4 * hidden)?;

    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let g = tape.tanh(gc);
    let o = tape.sigmoid(go);

    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

fn run_direction(
    tape: &mut Tape,
    xs: &[Var],
    p: &LstmVars,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<Var>> {
    let mut h = tape.constant(vec![hidden], vec![0.0; hidden])?;
    let mut c = tape.constant(vec![hidden], vec![0.0; hidden])?;
    let mut out = vec![h; xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for t in order {
        let (h2, c2) = lstm_cell(tape, xs[t], h, c, p, hidden)?;
        h = h2;
        c = c2;
        out[t] = h;
    }
    Ok(out)
}

/// Encode a `[d_in, L]` feature matrix bidirectionally into `[2H, L]`.
pub fn bilstm(tape: &mut Tape, input: Var, p: &BiLstmVars) -> Result<Var> {
    let sp = tape.shape(input).to_vec();
    if sp.len() != 2 || sp[0] != p.d_in {
        return Err(Error::dim(
            "bilstm",
            format!("input shape {sp:?}, want [{}, _]", p.d_in),
        ));
    }
    let l = sp[1];
    if l == 0 {
        return Err(Error::EmptySequence);
    }
    let cols: Vec<Var> = (0..l).map(|t| tape.col(input, t)).collect::<Result<_>>()?;
    let f = run_direction(tape, &cols, &p.fwd, p.hidden, false)?;
    let b = run_direction(tape, &cols, &p.bwd, p.hidden, true)?;
    let fm = tape.stack_cols(&f)?;
    let bm = tape.stack_cols(&b)?;
    tape.concat_rows(&[fm, bm])
}
