use ndarray::{Array2, Array5};

use super::{Float, Mode, NnError, NnResult};

/// Bin `[start, end)` of input axis `len` feeding output cell `i` of `out`.
pub(crate) fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end.max(start + 1).min(len))
}

/// Adaptive max pooling to a fixed `(D, H, W)` grid.
///
/// Works for inputs smaller than the target too: bins then overlap and
/// repeat input cells. Ties resolve to the first maximal element in
/// row-major order.
#[derive(Debug, Clone)]
pub struct AdaptiveMaxPool3d {
    pub target: [usize; 3],
    cache: Option<([usize; 5], Vec<usize>)>,
}

impl AdaptiveMaxPool3d {
    pub fn new(target: [usize; 3]) -> Self {
        Self { target, cache: None }
    }

    pub fn global() -> Self {
        Self::new([1, 1, 1])
    }

    pub fn forward<F: Float>(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let (n, c, d, h, w) = x.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(NnError::shape(
                "adaptive max pool",
                "non-empty spatial dims",
                format!("{:?}", x.shape()),
            ));
        }
        let [td, th, tw] = self.target;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array5::<F>::zeros((n, c, td, th, tw));
        let mut arg = Vec::with_capacity(out.len());
        let os = out.as_slice_mut().expect("fresh array");
        let mut o = 0;
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for zd in 0..td {
                let (d0, d1) = adaptive_bin(zd, d, td);
                for zh in 0..th {
                    let (h0, h1) = adaptive_bin(zh, h, th);
                    for zw in 0..tw {
                        let (w0, w1) = adaptive_bin(zw, w, tw);
                        let mut best = base + (d0 * h + h0) * w + w0;
                        for z in d0..d1 {
                            for y in h0..h1 {
                                for xx in w0..w1 {
                                    let idx = base + (z * h + y) * w + xx;
                                    if xs[idx] > xs[best] {
                                        best = idx;
                                    }
                                }
                            }
                        }
                        os[o] = xs[best];
                        arg.push(best);
                        o += 1;
                    }
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(([n, c, d, h, w], arg));
        Ok(out)
    }

    pub fn backward<F: Float>(&mut self, grad: &Array5<F>) -> NnResult<Array5<F>> {
        let (dims, arg) = self.cache.take().ok_or(NnError::NoCache("adaptive max pool"))?;
        if grad.len() != arg.len() {
            return Err(NnError::shape("adaptive max pool backward", arg.len(), grad.len()));
        }
        let mut dx = Array5::<F>::zeros((dims[0], dims[1], dims[2], dims[3], dims[4]));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (g, idx) in grad.iter().zip(arg) {
            dxs[idx] += *g;
        }
        Ok(dx)
    }
}

/// Mean over `(D, H, W)`, producing `(N, C)` features.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache: Option<[usize; 5]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<F: Float>(&mut self, x: &Array5<F>, mode: Mode) -> Array2<F> {
        let (n, c, d, h, w) = x.dim();
        let inv = F::cast(1.0 / (d * h * w) as f64);
        let out = Array2::from_shape_fn((n, c), |(i, j)| {
            x.slice(ndarray::s![i, j, .., .., ..]).iter().copied().sum::<F>() * inv
        });
        self.cache = (mode == Mode::Train).then_some([n, c, d, h, w]);
        out
    }

    pub fn backward<F: Float>(&mut self, grad: &Array2<F>) -> NnResult<Array5<F>> {
        let [n, c, d, h, w] = self.cache.take().ok_or(NnError::NoCache("global average pool"))?;
        if grad.dim() != (n, c) {
            return Err(NnError::shape(
                "global average pool backward",
                format!("({n}, {c})"),
                format!("{:?}", grad.shape()),
            ));
        }
        let inv = F::cast(1.0 / (d * h * w) as f64);
        Ok(Array5::from_shape_fn((n, c, d, h, w), |(i, j, _, _, _)| {
            grad[[i, j]] * inv
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_the_axis() {
        for len in 1..20 {
            for out in 1..9 {
                let mut covered = vec![false; len];
                for i in 0..out {
                    let (a, b) = adaptive_bin(i, len, out);
                    assert!(a < b && b <= len);
                    covered[a..b].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|c| *c), "len {len} out {out}");
            }
        }
    }

    #[test]
    fn adaptive_output_shape_is_target() {
        let mut pool = AdaptiveMaxPool3d::new([2, 4, 4]);
        for dims in [(4, 7, 7), (2, 4, 4), (1, 2, 2), (9, 13, 5)] {
            let x = Array5::<f32>::ones((1, 3, dims.0, dims.1, dims.2));
            assert_eq!(pool.forward(&x, Mode::Eval).unwrap().shape(), &[1, 3, 2, 4, 4]);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut pool = AdaptiveMaxPool3d::global();
        let mut x = Array5::<f64>::zeros((1, 1, 2, 2, 2));
        x[[0, 0, 1, 0, 1]] = 3.0;
        let y = pool.forward(&x, Mode::Train).unwrap();
        assert_eq!(y[[0, 0, 0, 0, 0]], 3.0);
        let dx = pool.backward(&Array5::from_elem((1, 1, 1, 1, 1), 2.0)).unwrap();
        assert_eq!(dx.sum(), 2.0);
        assert_eq!(dx[[0, 0, 1, 0, 1]], 2.0);
    }
}
