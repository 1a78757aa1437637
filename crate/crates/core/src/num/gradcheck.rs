//! Finite-difference gradient verification (64-bit, central differences).
//! Oracle used by the test suites; independent of the tape's backward rules.

use super::store::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Compares tape gradients against central finite differences with step `h`
/// for every element of every input. The builder must construct a scalar loss
/// as a pure function of the store contents. Returns the maximum relative
/// error: `|a-b| / max(|a|+|b|, 1e-3 * scale, 1e-8)` per element, where
/// `scale` is the largest gradient magnitude seen — near-zero elements are
/// judged against the gradient's overall scale instead of their own.
pub fn max_rel_error(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    build: impl Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
    h: f64,
) -> f64 {
    let analytic = {
        let mut tape = Tape::new(store);
        let leaves: Vec<NodeId> = ids.iter().map(|&p| tape.param(p)).collect();
        let loss = build(&mut tape, &leaves);
        assert!(tape.value(loss).is_scalar(), "gradcheck loss must be scalar");
        tape.backward(loss).expect("backward")
    };
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut tape = Tape::new(store);
        let leaves: Vec<NodeId> = ids.iter().map(|&p| tape.param(p)).collect();
        let loss = build(&mut tape, &leaves);
        tape.value(loss).scalar_value()
    };
    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for &p in ids {
        let n = store.value(p).numel();
        let zero = Tensor::zeros(store.value(p).shape.clone());
        let ga = analytic.get(p).unwrap_or(&zero).clone();
        for i in 0..n {
            let orig = store.value(p).data[i];
            store.value_mut(p).data[i] = orig + h;
            let up = eval(store);
            store.value_mut(p).data[i] = orig - h;
            let down = eval(store);
            store.value_mut(p).data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            pairs.push((ga.data[i], fd));
        }
    }
    let scale = pairs
        .iter()
        .map(|&(a, b)| a.abs().max(b.abs()))
        .fold(0.0f64, f64::max);
    pairs
        .iter()
        .map(|&(a, b)| (a - b).abs() / (a.abs() + b.abs()).max(1e-3 * scale).max(1e-8))
        .fold(0.0f64, f64::max)
}
