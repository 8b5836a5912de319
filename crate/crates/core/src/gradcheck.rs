//! Central finite differences, the reference used to audit tape gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{Example, RiModel};
use crate::nn::{Graph, Mode, ParamId, ParamStore, RegPolicy};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default perturbation for 64-bit central differences.
pub const STEP: f64 = 1e-5;

/// Magnitude below which gradient entries are compared on an absolute scale.
pub const FLOOR: f64 = 1e-5;

/// `∂f/∂xᵢ ≈ (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|, FLOOR)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(FLOOR))
        .fold(0.0, f64::max)
}

/// Fixed, non-uniform weights used to fold a tensor output into a scalar, so
/// that outputs with constant sums (softmax) still carry gradient.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| libm::sin(1.0 + 1.7 * i as f64) + 0.3).collect()
}

/// Builds `f` on a fresh tape over `inputs`, folds its output with
/// [`probe_weights`] and compares the tape gradient of every input element with
/// central differences. Returns the worst relative error.
pub fn tape_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let eval = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        fold(tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for &v in &vars {
        match tape.grad(v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(core::iter::repeat_n(0.0, tape.value(v).numel())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    for (k, input) in inputs.iter().enumerate() {
        let g = numeric_gradient(
            |x| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == k { Tensor::new(t.shape(), x.to_vec()).expect("same shape") } else { t.clone() };
                        tape.leaf(t, true)
                    })
                    .collect();
                let loss = eval(&mut tape, &vars).expect("perturbed evaluation");
                tape.value(loss).item()
            },
            input.data(),
            STEP,
        );
        numeric.extend(g);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Folds `out` into a scalar with [`probe_weights`].
fn fold(tape: &mut Tape, out: Var) -> Result<Var> {
    let w = Tensor::new(tape.shape(out), probe_weights(tape.value(out).numel()))?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Like [`tape_check`] for computations whose inputs live in a parameter
/// store: every trainable entry of `store` is perturbed in turn. `f` may
/// return a non-scalar output, which is folded with [`probe_weights`].
pub fn store_check(
    store: &mut ParamStore,
    mut f: impl FnMut(&mut Graph, &mut ParamStore) -> Result<Var>,
) -> Result<f64> {
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let loss = fold(&mut g.tape, out)?;
    g.backward(loss)?;
    g.collect_grads(store);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let mut analytic = Vec::new();
    for &id in &ids {
        match store.grad(id) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(core::iter::repeat_n(0.0, store.value(id).numel())),
        }
    }
    let mut eval = |store: &mut ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let loss = fold(&mut g.tape, out)?;
        Ok(g.value(loss).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = eval(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Audits the full training objective of `model` on `batch`: every trainable
/// parameter element is perturbed in place and the objective re-evaluated.
/// Dropout must be inactive (rate 0 or eval mode) for the comparison to mean
/// anything. Returns the worst relative error.
pub fn model_check(model: &mut RiModel, batch: &[Example<'_>], mode: Mode, reg: RegPolicy) -> Result<f64> {
    model.compute_gradients(batch, mode, reg)?;
    let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.is_trainable(id)).collect();
    let mut analytic = Vec::new();
    for &id in &ids {
        match model.store.grad(id) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(core::iter::repeat_n(0.0, model.store.value(id).numel())),
        }
    }
    let objective = |model: &mut RiModel| -> Result<f64> {
        let mut g = Graph::new();
        let terms = model.objective(&mut g, batch, mode, reg)?;
        Ok(g.value(terms.total).item())
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..model.store.value(id).numel() {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = objective(model)?;
            model.store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = objective(model)?;
            model.store.value_mut(id).data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(max_relative_error(&analytic, &numeric))
}
