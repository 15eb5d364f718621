//! Masked softmax attention over per-slot hidden states.
//!
//! The weight of slot `i` is `softmax_i(<Vec(H_t), Vec(H_i)> / X)`, where
//! `H_t` is the last (current) slot. Masked slots get weight zero and the
//! survivors are renormalized, so the result stays a convex combination.

use crate::autograd::{no_grad, Tensor, Var};
use crate::error::{invalid, Result};

/// Combines `states[k]` (each `[batch·hw, channels]`) per sample.
///
/// `mask[k][b]` is 1.0 for a live slot and 0.0 for a masked one; the last
/// slot must be live for every sample. Returns the combined state and the
/// weights `alpha[k][b]`.
pub(crate) fn attend(
    states: &[Var],
    mask: &[Vec<f64>],
    batch: usize,
    rescale: f64,
) -> (Var, Vec<Vec<f64>>) {
    let current = states.last().expect("at least one slot");
    let (rows, channels) = current.value().dims2();
    let hw = rows / batch;

    let scores: Vec<Var> = states
        .iter()
        .map(|h| {
            current
                .mul(h)
                .sum_cols()
                .reshape(&[batch, hw])
                .sum_cols()
                .scale(1.0 / rescale)
        })
        .collect();

    // Per-sample shift by the largest live score. Softmax is invariant to it,
    // so treating it as a constant keeps gradients exact.
    let shift: Vec<f64> = (0..batch)
        .map(|b| {
            scores
                .iter()
                .zip(mask)
                .filter(|(_, m)| m[b] != 0.0)
                .map(|(s, _)| s.value().data()[b])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let shift_var = Var::constant(Tensor::new(vec![batch], shift.clone()));

    let weights: Vec<Var> = scores
        .iter()
        .zip(mask)
        .map(|(s, m)| {
            let live = Var::constant(Tensor::new(vec![batch], m.clone()));
            let dead = Var::constant(Tensor::new(
                vec![batch],
                m.iter().zip(&shift).map(|(b, sh)| (1.0 - b) * sh).collect(),
            ));
            // A masked slot's score is replaced by the shift so its exponent is
            // exactly 1 before being zeroed; its content never reaches the output.
            s.mul(&live)
                .add(&dead)
                .sub(&shift_var)
                .exp()
                .mul(&live)
        })
        .collect();
    let total = weights
        .iter()
        .skip(1)
        .fold(weights[0].clone(), |acc, w| acc.add(w));
    let alphas: Vec<Var> = weights.iter().map(|w| w.div(&total)).collect();

    let mut combined: Option<Var> = None;
    for (a, h) in alphas.iter().zip(states) {
        let wide = a
            .broadcast_cols(hw)
            .reshape(&[batch * hw])
            .broadcast_cols(channels);
        let term = wide.mul(h);
        combined = Some(match combined {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    let alpha_values = alphas.iter().map(|a| a.value().data().to_vec()).collect();
    (combined.expect("at least one slot"), alpha_values)
}

/// Plain-value attention for a single sample: `states[k]` are flattened
/// hidden states of equal length, `mask[k]` the slot bits, and the last
/// state is the current step. Returns `(H'_t, alpha)`.
pub fn attention_combine(
    states: &[Vec<f64>],
    mask: &[bool],
    rescale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if states.is_empty() {
        return Err(invalid!("attention needs at least one state"));
    }
    if mask.len() != states.len() {
        return Err(invalid!(
            "{} mask bits for {} states",
            mask.len(),
            states.len()
        ));
    }
    if !(rescale > 0.0) {
        return Err(invalid!("attention rescale must be positive"));
    }
    let len = states[0].len();
    if len == 0 || states.iter().any(|s| s.len() != len) {
        return Err(invalid!("attention states must be non-empty and equally sized"));
    }
    if !mask.iter().any(|&b| b) {
        return Err(invalid!("every attention slot is masked"));
    }
    if !mask[states.len() - 1] {
        return Err(invalid!("the current (last) slot cannot be masked"));
    }

    no_grad(|| {
        let vars: Vec<Var> = states
            .iter()
            .map(|s| Var::constant(Tensor::new(vec![len, 1], s.clone())))
            .collect();
        let bits: Vec<Vec<f64>> = mask
            .iter()
            .map(|&b| vec![if b { 1.0 } else { 0.0 }])
            .collect();
        let (combined, alpha) = attend(&vars, &bits, 1, rescale);
        Ok((
            combined.value().data().to_vec(),
            alpha.into_iter().map(|a| a[0]).collect(),
        ))
    })
}
