use ndarray::{Array, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Mode, NnError, NnResult};

/// Elementwise `max(0, x)`.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<F: Float, D: Dimension>(&mut self, mut x: Array<F, D>, mode: Mode) -> Array<F, D> {
        x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
        self.mask = match mode {
            Mode::Train => Some(x.iter().map(|v| *v > F::zero()).collect()),
            Mode::Eval => None,
        };
        x
    }

    pub fn backward<F: Float, D: Dimension>(&mut self, mut grad: Array<F, D>) -> NnResult<Array<F, D>> {
        let mask = self.mask.take().ok_or(NnError::NoCache("relu"))?;
        if mask.len() != grad.len() {
            return Err(NnError::shape("relu backward", mask.len(), grad.len()));
        }
        for (g, keep) in grad.iter_mut().zip(mask) {
            if !keep {
                *g = F::zero();
            }
        }
        Ok(grad)
    }
}

/// Inverted dropout with its own seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    scale: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: None,
        }
    }

    pub fn forward<F: Float, D: Dimension>(&mut self, mut x: Array<F, D>, mode: Mode) -> Array<F, D> {
        if mode == Mode::Eval || self.p == 0.0 {
            self.scale = (mode == Mode::Train).then(|| vec![1.0; x.len()]);
            return x;
        }
        let keep = 1.0 - self.p;
        let scale: Vec<f64> = (0..x.len())
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        for (v, s) in x.iter_mut().zip(&scale) {
            *v *= F::cast(*s);
        }
        self.scale = Some(scale);
        x
    }

    pub fn backward<F: Float, D: Dimension>(&mut self, mut grad: Array<F, D>) -> NnResult<Array<F, D>> {
        let scale = self.scale.take().ok_or(NnError::NoCache("dropout"))?;
        for (g, s) in grad.iter_mut().zip(scale) {
            *g *= F::cast(s);
        }
        Ok(grad)
    }
}
