//! Convolutional LSTM cells.
//!
//! [`ConvLstmCell`] computes all four paths with convolutions.
//! [`DenseGatedCell`] keeps the convolutional candidate path but derives the
//! input, forget and output gates from globally pooled features through a
//! fully-connected map, one gate value per hidden channel broadcast over the
//! spatial grid.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{Activation, ConvLayer, Graph, Init, ParamId, ParamKind, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

pub trait RecurrentCell {
    fn input_channels(&self) -> usize;
    fn hidden_channels(&self) -> usize;
    /// Every parameter owned by the cell.
    fn params(&self) -> Vec<ParamId>;

    /// One step on `x: [C_in,H,W]`; returns the new state whose `h` is the output.
    fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: CellState) -> Result<CellState>;

    fn zero_state(&self, g: &mut Graph, height: usize, width: usize) -> CellState {
        let shape = [self.hidden_channels(), height, width];
        CellState {
            h: g.constant(Tensor::zeros(&shape)),
            c: g.constant(Tensor::zeros(&shape)),
        }
    }

    fn parameter_count(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&p| store.value(p).numel()).sum()
    }
}

fn check_step_shapes(g: &Graph, x: Var, state: CellState, c_in: usize, c_h: usize) -> Result<()> {
    let xs = g.tape.shape(x);
    let hs = g.tape.shape(state.h);
    if xs.len() != 3 || xs[0] != c_in {
        return Err(Error::ShapeMismatch {
            op: "cell input",
            lhs: xs.to_vec(),
            rhs: alloc::vec![c_in, hs.get(1).copied().unwrap_or(0), hs.get(2).copied().unwrap_or(0)],
        });
    }
    if hs.len() != 3 || hs[0] != c_h || hs[1..] != xs[1..] || g.tape.shape(state.c) != hs {
        return Err(Error::ShapeMismatch {
            op: "cell state",
            lhs: xs.to_vec(),
            rhs: hs.to_vec(),
        });
    }
    Ok(())
}

/// `c′ = f⊙c + i⊙g`, `h′ = o⊙tanh(c′)`.
fn lstm_update(g: &mut Graph, i: Var, f: Var, o: Var, cand: Var, c: Var) -> Result<CellState> {
    let keep = g.tape.mul(f, c)?;
    let write = g.tape.mul(i, cand)?;
    let c_next = g.tape.add(keep, write)?;
    let squashed = g.tape.tanh(c_next);
    let h_next = g.tape.mul(o, squashed)?;
    Ok(CellState { h: h_next, c: c_next })
}

fn gate_bias(store: &mut ParamStore, name: &str, gate: &str, channels: usize, init: f64) -> ParamId {
    store.register(
        alloc::format!("{name}.bias_{gate}"),
        &[channels],
        ParamKind::Bias,
        Init::Constant(init),
    )
}

/// Forget-gate bias starts at +1.
const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    /// `C_in → 4·C_h` in gate order i, f, o, g.
    pub input_conv: ConvLayer,
    /// `C_h → 4·C_h`.
    pub hidden_conv: ConvLayer,
    /// Biases for i, f, o, g.
    pub biases: [ParamId; 4],
    in_channels: usize,
    hidden: usize,
}

impl ConvLstmCell {
    /// `kernel` must be odd; padding `(k−1)/2` preserves the spatial grid.
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, hidden: usize, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(alloc::format!("cell kernel must be odd, got {kernel}")));
        }
        let pad = (kernel - 1) / 2;
        let input_conv = ConvLayer::new(
            store,
            &alloc::format!("{name}.input"),
            in_channels,
            4 * hidden,
            kernel,
            1,
            pad,
            false,
            Activation::None,
        );
        let hidden_conv = ConvLayer::new(
            store,
            &alloc::format!("{name}.hidden"),
            hidden,
            4 * hidden,
            kernel,
            1,
            pad,
            false,
            Activation::None,
        );
        let biases = [
            gate_bias(store, name, "i", hidden, 0.0),
            gate_bias(store, name, "f", hidden, FORGET_BIAS),
            gate_bias(store, name, "o", hidden, 0.0),
            gate_bias(store, name, "g", hidden, 0.0),
        ];
        Ok(ConvLstmCell {
            input_conv,
            hidden_conv,
            biases,
            in_channels,
            hidden,
        })
    }
}

impl RecurrentCell for ConvLstmCell {
    fn input_channels(&self) -> usize {
        self.in_channels
    }

    fn hidden_channels(&self) -> usize {
        self.hidden
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = alloc::vec![self.input_conv.kernel, self.hidden_conv.kernel];
        p.extend_from_slice(&self.biases);
        p
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: CellState) -> Result<CellState> {
        check_step_shapes(g, x, state, self.in_channels, self.hidden)?;
        let zx = self.input_conv.forward(g, store, x)?;
        let zh = self.hidden_conv.forward(g, store, state.h)?;
        let z = g.tape.add(zx, zh)?;
        let ch = self.hidden;
        let mut gates = [z; 4];
        for (k, gate) in gates.iter_mut().enumerate() {
            let pre = g.tape.slice(z, 0, k * ch..(k + 1) * ch)?;
            let b = g.param(store, self.biases[k]);
            let b = g.tape.reshape(b, &[ch, 1, 1])?;
            let pre = g.tape.add(pre, b)?;
            *gate = if k == 3 { g.tape.tanh(pre) } else { g.tape.sigmoid(pre) };
        }
        let [i, f, o, cand] = gates;
        lstm_update(g, i, f, o, cand, state.c)
    }
}

#[derive(Debug, Clone)]
pub struct DenseGatedCell {
    /// Candidate path, `C_in → C_h`.
    pub candidate_input: ConvLayer,
    /// Candidate path, `C_h → C_h`.
    pub candidate_hidden: ConvLayer,
    pub candidate_bias: ParamId,
    /// `[C_in + C_h, 3·C_h]`, columns in gate order i, f, o.
    pub gate_weight: ParamId,
    /// Biases for i, f, o.
    pub gate_biases: [ParamId; 3],
    in_channels: usize,
    hidden: usize,
}

impl DenseGatedCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        candidate_kernel: usize,
    ) -> Result<Self> {
        if candidate_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(alloc::format!(
                "candidate kernel must be odd, got {candidate_kernel}"
            )));
        }
        let pad = (candidate_kernel - 1) / 2;
        let candidate_input = ConvLayer::new(
            store,
            &alloc::format!("{name}.cand_input"),
            in_channels,
            hidden,
            candidate_kernel,
            1,
            pad,
            false,
            Activation::None,
        );
        let candidate_hidden = ConvLayer::new(
            store,
            &alloc::format!("{name}.cand_hidden"),
            hidden,
            hidden,
            candidate_kernel,
            1,
            pad,
            false,
            Activation::None,
        );
        let candidate_bias = gate_bias(store, name, "g", hidden, 0.0);
        let pooled = in_channels + hidden;
        let gate_weight = store.register(
            alloc::format!("{name}.gate_weight"),
            &[pooled, 3 * hidden],
            ParamKind::Weight,
            Init::FanIn(pooled),
        );
        let gate_biases = [
            gate_bias(store, name, "i", hidden, 0.0),
            gate_bias(store, name, "f", hidden, FORGET_BIAS),
            gate_bias(store, name, "o", hidden, 0.0),
        ];
        Ok(DenseGatedCell {
            candidate_input,
            candidate_hidden,
            candidate_bias,
            gate_weight,
            gate_biases,
            in_channels,
            hidden,
        })
    }
}

impl RecurrentCell for DenseGatedCell {
    fn input_channels(&self) -> usize {
        self.in_channels
    }

    fn hidden_channels(&self) -> usize {
        self.hidden
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = alloc::vec![
            self.candidate_input.kernel,
            self.candidate_hidden.kernel,
            self.candidate_bias,
            self.gate_weight,
        ];
        p.extend_from_slice(&self.gate_biases);
        p
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: CellState) -> Result<CellState> {
        check_step_shapes(g, x, state, self.in_channels, self.hidden)?;
        let ch = self.hidden;

        // gates from pooled features
        let px = g.tape.global_avg_pool(x)?;
        let ph = g.tape.global_avg_pool(state.h)?;
        let pooled = g.tape.concat(&[px, ph], 0)?;
        let pooled = g.tape.reshape(pooled, &[1, self.in_channels + ch])?;
        let w = g.param(store, self.gate_weight);
        let z = g.tape.matmul(pooled, w)?;
        let z = g.tape.reshape(z, &[3 * ch])?;
        let mut gates = [z; 3];
        for (k, gate) in gates.iter_mut().enumerate() {
            let pre = g.tape.slice(z, 0, k * ch..(k + 1) * ch)?;
            let b = g.param(store, self.gate_biases[k]);
            let pre = g.tape.add(pre, b)?;
            let act = g.tape.sigmoid(pre);
            *gate = g.tape.reshape(act, &[ch, 1, 1])?;
        }
        let [i, f, o] = gates;

        // convolutional candidate
        let cx = self.candidate_input.forward(g, store, x)?;
        let chh = self.candidate_hidden.forward(g, store, state.h)?;
        let pre = g.tape.add(cx, chh)?;
        let b = g.param(store, self.candidate_bias);
        let b = g.tape.reshape(b, &[ch, 1, 1])?;
        let pre = g.tape.add(pre, b)?;
        let cand = g.tape.tanh(pre);

        lstm_update(g, i, f, o, cand, state.c)
    }
}

/// Runs `cell` over `sequence: [T,C_in,H,W]` from `initial` (zeros when
/// `None`); returns the stacked hidden outputs `[T,C_h,H,W]`.
pub fn unroll<C: RecurrentCell + ?Sized>(
    cell: &C,
    g: &mut Graph,
    store: &ParamStore,
    sequence: Var,
    initial: Option<CellState>,
) -> Result<Var> {
    let shape = g.tape.shape(sequence).to_vec();
    if shape.len() != 4 {
        return Err(Error::Rank {
            op: "unroll",
            expected: 4,
            shape,
        });
    }
    if shape[0] == 0 {
        return Err(Error::Empty("unroll"));
    }
    let mut state = match initial {
        Some(s) => s,
        None => cell.zero_state(g, shape[2], shape[3]),
    };
    let mut outputs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let x = g.tape.index_axis0(sequence, t)?;
        state = cell.step(g, store, x, state)?;
        outputs.push(state.h);
    }
    g.tape.stack(&outputs)
}
