use ndarray::{Array1, Array5, ArrayD, IxDyn};

use super::{join, Float, Mode, Module, NnError, NnResult, Param};

/// Per-channel batch normalization over `(N, D, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm3d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: ArrayD<F>,
    pub running_var: ArrayD<F>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<F>>,
}

#[derive(Debug, Clone)]
struct BnCache<F> {
    xhat: Array5<F>,
    inv_std: Vec<f64>,
}

impl<F: Float> BatchNorm3d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], F::one()),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), F::one()),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> Array5<F> {
        let (n, c, d, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch norm channel count");
        let spatial = d * h * w;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array5::<F>::zeros((n, c, d, h, w));
        let ys = y.as_slice_mut().expect("fresh array");
        let chunk = |i: usize, ch: usize| (i * c + ch) * spatial;

        match mode {
            Mode::Train => {
                let m = (n * spatial) as f64;
                let mut xhat = Array5::<F>::zeros((n, c, d, h, w));
                let xh = xhat.as_slice_mut().expect("fresh array");
                let mut inv_stds = Vec::with_capacity(c);
                for ch in 0..c {
                    let mut sum = 0.0;
                    for i in 0..n {
                        sum += xs[chunk(i, ch)..][..spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += xs[chunk(i, ch)..][..spatial]
                            .iter()
                            .map(|v| {
                                let t = v.as_f64() - mean;
                                t * t
                            })
                            .sum::<f64>();
                    }
                    let var = sq / m;
                    let inv_std = 1.0 / (var + self.eps).sqrt();
                    let (g, b) = (self.gamma.value[ch].as_f64(), self.beta.value[ch].as_f64());
                    for i in 0..n {
                        let off = chunk(i, ch);
                        for j in off..off + spatial {
                            let xn = (xs[j].as_f64() - mean) * inv_std;
                            xh[j] = F::cast(xn);
                            ys[j] = F::cast(g * xn + b);
                        }
                    }
                    let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                    let mom = self.momentum;
                    let rm = &mut self.running_mean[ch];
                    *rm = F::cast((1.0 - mom) * rm.as_f64() + mom * mean);
                    let rv = &mut self.running_var[ch];
                    *rv = F::cast((1.0 - mom) * rv.as_f64() + mom * unbiased);
                    inv_stds.push(inv_std);
                }
                self.cache = Some(BnCache {
                    xhat,
                    inv_std: inv_stds,
                });
            }
            Mode::Eval => {
                for ch in 0..c {
                    let inv_std = 1.0 / (self.running_var[ch].as_f64() + self.eps).sqrt();
                    let mean = self.running_mean[ch].as_f64();
                    let scale = self.gamma.value[ch].as_f64() * inv_std;
                    let shift = self.beta.value[ch].as_f64() - mean * scale;
                    let (scale, shift) = (F::cast(scale), F::cast(shift));
                    for i in 0..n {
                        let off = chunk(i, ch);
                        for j in off..off + spatial {
                            ys[j] = xs[j] * scale + shift;
                        }
                    }
                }
                self.cache = None;
            }
        }
        y
    }

    pub fn backward(&mut self, grad: &Array5<F>) -> NnResult<Array5<F>> {
        let cache = self.cache.take().ok_or(NnError::NoCache("batch norm"))?;
        let (n, c, d, h, w) = cache.xhat.dim();
        if grad.dim() != (n, c, d, h, w) {
            return Err(NnError::shape(
                "batch norm backward",
                format!("{:?}", cache.xhat.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        let spatial = d * h * w;
        let m = (n * spatial) as f64;
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array5::<F>::zeros((n, c, d, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * spatial;
                for j in off..off + spatial {
                    let g = gs[j].as_f64();
                    sum_g += g;
                    sum_gx += g * xh[j].as_f64();
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let gamma = self.gamma.value[ch].as_f64();
            let k = gamma * cache.inv_std[ch] / m;
            for i in 0..n {
                let off = (i * c + ch) * spatial;
                for j in off..off + spatial {
                    dxs[j] = F::cast(k * (m * gs[j].as_f64() - sum_g - xh[j].as_f64() * sum_gx));
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += F::cast(dgamma[ch]);
            self.beta.grad[ch] += F::cast(dbeta[ch]);
        }
        Ok(dx)
    }
}

impl<F: Float> Module<F> for BatchNorm3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<F>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}
