//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use covsev_core::model::SeverityModel;
use covsev_core::nn::{softmax_cross_entropy, Mode, Module};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this in both estimates are compared absolutely.
const FLOOR: f64 = 1e-6;
pub const SAMPLED: usize = 50;

fn loss<M: SeverityModel<f64>>(model: &mut M, batch: &[&M::Input], targets: &[usize]) -> f64 {
    let logits = model.forward_batch(batch, Mode::Train).unwrap();
    softmax_cross_entropy(&logits, targets, None).0
}

fn get(model: &mut impl Module<f64>, flat: usize) -> f64 {
    let mut offset = 0;
    let mut out = None;
    model.visit_params("", &mut |_, p| {
        if out.is_none() && flat < offset + p.len() {
            out = Some(p.value.as_slice_mut().unwrap()[flat - offset]);
        }
        offset += p.len();
    });
    out.unwrap()
}

fn set(model: &mut impl Module<f64>, flat: usize, v: f64) {
    let mut offset = 0;
    model.visit_params("", &mut |_, p| {
        if flat >= offset && flat < offset + p.len() {
            p.value.as_slice_mut().unwrap()[flat - offset] = v;
        }
        offset += p.len();
    });
}

fn analytic(model: &mut impl Module<f64>) -> Vec<f64> {
    let mut grads = Vec::new();
    model.visit_params("", &mut |_, p| grads.extend(p.grad.iter().copied()));
    grads
}

fn central<M: SeverityModel<f64>>(model: &mut M, batch: &[&M::Input], targets: &[usize], idx: usize, h: f64) -> f64 {
    let v = get(model, idx);
    set(model, idx, v + h);
    let up = loss(model, batch, targets);
    set(model, idx, v - h);
    let down = loss(model, batch, targets);
    set(model, idx, v);
    (up - down) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Compares analytic gradients with central differences on `SAMPLED`
/// parameters drawn at random. ReLU and max-pool switches make the loss
/// piecewise smooth; a central difference only estimates the derivative
/// when no switch lies within `±STEP`, which is detected without looking
/// at the analytic value: the estimates at `STEP` and `STEP / 2` must
/// agree. Parameters failing that test are replaced by fresh draws.
///
/// Returns the worst relative error and the number of replaced draws.
pub fn check<M: SeverityModel<f64>>(model: &mut M, batch: &[&M::Input], targets: &[usize], seed: u64) -> (f64, usize) {
    model.zero_grad();
    let logits = model.forward_batch(batch, Mode::Train).unwrap();
    let (_, grad) = softmax_cross_entropy(&logits, targets, None);
    model.backward(&grad).unwrap();
    let grads = analytic(model);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, grads.len(), grads.len().min(8 * SAMPLED));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut replaced = 0;
    for idx in order {
        if checked == SAMPLED {
            break;
        }
        let numeric = central(model, batch, targets, idx, STEP);
        let half = central(model, batch, targets, idx, STEP / 2.0);
        if rel_err(numeric, half) >= TOLERANCE / 4.0 {
            replaced += 1;
            continue;
        }
        let rel = rel_err(grads[idx], numeric);
        assert!(
            rel < TOLERANCE,
            "param {idx}: analytic {:e} numeric {numeric:e} rel {rel:e}",
            grads[idx]
        );
        worst = worst.max(rel);
        checked += 1;
    }
    assert_eq!(
        checked,
        SAMPLED.min(grads.len()),
        "too few smooth parameters ({replaced} replaced)"
    );
    (worst, replaced)
}
