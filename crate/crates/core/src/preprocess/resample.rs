//! Separable volume resampling.
//!
//! Sample positions use the corner-aligned convention: output index `i` of
//! `n_out` maps to input coordinate `i * (n_in - 1) / (n_out - 1)`, so equal
//! sizes reproduce the input exactly. Linear interpolation along the three
//! axes in turn is trilinear interpolation.

use ndarray::{Array3, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

fn source_position(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

/// `a + t (b - a)`, kept inside `[min(a, b), max(a, b)]` despite rounding.
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Resamples one axis of a 3D array to `n_out` samples.
pub fn resample_axis(input: &Array3<f32>, axis: usize, n_out: usize, interp: Interpolation) -> Array3<f32> {
    let n_in = input.len_of(Axis(axis));
    assert!(n_in >= 1 && n_out >= 1, "resample needs non-empty axes");
    if n_in == n_out {
        return input.clone();
    }
    let mut shape = input.raw_dim();
    shape[axis] = n_out;
    let mut out = Array3::<f32>::zeros(shape);
    for (i, mut lane) in out.axis_iter_mut(Axis(axis)).enumerate() {
        let pos = source_position(i, n_in, n_out);
        match interp {
            Interpolation::Nearest => {
                let j = (pos.round() as usize).min(n_in - 1);
                lane.assign(&input.index_axis(Axis(axis), j));
            }
            Interpolation::Linear => {
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let t = (pos - i0 as f64) as f32;
                let a = input.index_axis(Axis(axis), i0);
                let b = input.index_axis(Axis(axis), i1);
                ndarray::Zip::from(&mut lane)
                    .and(&a)
                    .and(&b)
                    .for_each(|o, &a, &b| *o = if t == 0.0 { a } else { lerp(a, b, t) });
            }
        }
    }
    out
}

/// Resamples a `(D, H, W)` volume to `target`.
pub fn resize_volume(input: &Array3<f32>, target: [usize; 3], interp: Interpolation) -> Array3<f32> {
    let w = resample_axis(input, 2, target[2], interp);
    let h = resample_axis(&w, 1, target[1], interp);
    resample_axis(&h, 0, target[0], interp)
}
