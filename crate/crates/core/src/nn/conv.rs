use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array5, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{join, Float, Mode, Module, NnError, NnResult, Param};

/// Upper bound on the number of elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 22;

/// 3D convolution over `(N, C, D, H, W)` tensors, lowered to im2col + GEMM.
///
/// The im2col buffer is built for a band of output depth planes at a time so
/// memory stays bounded for large volumes.
#[derive(Debug, Clone)]
pub struct Conv3d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// When false, backward skips the input gradient and returns zeros.
    pub input_grad: bool,
    cache: Option<Array5<F>>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k[0] * self.k[1] * self.k[2]
    }

    /// Output columns whose input column `ow*s + e - p` lies inside `[0, w)`.
    fn valid_range(out: usize, inp: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
        let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
        let hi = if inp + pad > k_off {
            ((inp + pad - k_off).div_ceil(stride)).min(out)
        } else {
            0
        };
        (lo.min(out), hi.max(lo.min(out)))
    }
}

fn im2col<F: Float>(x: &[F], g: &Geometry, d0: usize, d1: usize, col: &mut [F]) {
    let plane = g.oh * g.ow;
    let p = (d1 - d0) * plane;
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for e in 0..g.k[2] {
                    let dst = &mut col[row * p..(row + 1) * p];
                    row += 1;
                    let (lo, hi) = Geometry::valid_range(g.ow, g.w, e, g.s[2], g.p[2]);
                    let mut idx = 0;
                    for odi in d0..d1 {
                        let id = (odi * g.s[0] + a) as isize - g.p[0] as isize;
                        if id < 0 || id >= g.d as isize {
                            dst[idx..idx + plane].fill(F::zero());
                            idx += plane;
                            continue;
                        }
                        let src_plane = &x[(ci * g.d + id as usize) * g.h * g.w..][..g.h * g.w];
                        for ohi in 0..g.oh {
                            let ih = (ohi * g.s[1] + b) as isize - g.p[1] as isize;
                            let out_row = &mut dst[idx..idx + g.ow];
                            idx += g.ow;
                            if ih < 0 || ih >= g.h as isize {
                                out_row.fill(F::zero());
                                continue;
                            }
                            let src = &src_plane[ih as usize * g.w..][..g.w];
                            out_row[..lo].fill(F::zero());
                            out_row[hi..].fill(F::zero());
                            let base = e as isize - g.p[2] as isize;
                            if g.s[2] == 1 {
                                let start = (lo as isize + base) as usize;
                                out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                            } else {
                                for (owi, v) in out_row[lo..hi].iter_mut().enumerate() {
                                    *v = src[((owi + lo) as isize * g.s[2] as isize + base) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Float>(col: &[F], g: &Geometry, d0: usize, d1: usize, dx: &mut [F]) {
    let plane = g.oh * g.ow;
    let p = (d1 - d0) * plane;
    let mut row = 0;
    for ci in 0..g.c {
        for a in 0..g.k[0] {
            for b in 0..g.k[1] {
                for e in 0..g.k[2] {
                    let srccol = &col[row * p..(row + 1) * p];
                    row += 1;
                    let (lo, hi) = Geometry::valid_range(g.ow, g.w, e, g.s[2], g.p[2]);
                    let base = e as isize - g.p[2] as isize;
                    let mut idx = 0;
                    for odi in d0..d1 {
                        let id = (odi * g.s[0] + a) as isize - g.p[0] as isize;
                        if id < 0 || id >= g.d as isize {
                            idx += plane;
                            continue;
                        }
                        let dst_plane = &mut dx[(ci * g.d + id as usize) * g.h * g.w..][..g.h * g.w];
                        for ohi in 0..g.oh {
                            let ih = (ohi * g.s[1] + b) as isize - g.p[1] as isize;
                            let in_row = &srccol[idx..idx + g.ow];
                            idx += g.ow;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let dst = &mut dst_plane[ih as usize * g.w..][..g.w];
                            for (owi, v) in in_row[lo..hi].iter().enumerate() {
                                dst[((owi + lo) as isize * g.s[2] as isize + base) as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<F: Float> Conv3d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let weight = Param::kaiming(
            &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            fan_in,
            rng,
        );
        Self {
            weight,
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    /// Output shape for an `(N, C, D, H, W)` input; zero-sized axes mean the
    /// input is smaller than the kernel footprint.
    pub fn output_shape(&self, input: [usize; 5]) -> [usize; 5] {
        let axis = |i: usize| {
            let padded = input[2 + i] + 2 * self.padding[i];
            if padded < self.kernel[i] {
                0
            } else {
                (padded - self.kernel[i]) / self.stride[i] + 1
            }
        };
        [input[0], self.out_channels, axis(0), axis(1), axis(2)]
    }

    fn geometry(&self, x: &Array5<F>) -> NnResult<Geometry> {
        let (_, c, d, h, w) = x.dim();
        if c != self.in_channels {
            return Err(NnError::shape(
                "conv",
                format!("{} input channels", self.in_channels),
                format!("{c} channels"),
            ));
        }
        let [_, _, od, oh, ow] = self.output_shape([0, c, d, h, w]);
        if od == 0 || oh == 0 || ow == 0 {
            return Err(NnError::shape(
                "conv",
                format!(
                    "spatial dims covering kernel {:?} with padding {:?}",
                    self.kernel, self.padding
                ),
                format!("{:?}", [d, h, w]),
            ));
        }
        Ok(Geometry {
            c,
            d,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            od,
            oh,
            ow,
        })
    }

    fn band_rows(g: &Geometry) -> usize {
        (COL_BUDGET / (g.patch() * g.oh * g.ow).max(1)).clamp(1, g.od)
    }

    pub fn forward(&mut self, x: &Array5<F>, mode: Mode) -> NnResult<Array5<F>> {
        let g = self.geometry(x)?;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let n = x.dim().0;
        let o = self.out_channels;
        let k = g.patch();
        let plane = g.oh * g.ow;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((o, k))
            .expect("contiguous weight");
        let mut out = Array5::<F>::zeros((n, o, g.od, g.oh, g.ow));
        let band = Self::band_rows(&g);
        let mut col = vec![F::zero(); k * band * plane];
        let in_len = g.c * g.d * g.h * g.w;
        for (i, mut out_n) in out.axis_iter_mut(Axis(0)).enumerate() {
            let x_n = &xs[i * in_len..(i + 1) * in_len];
            let mut out_n = out_n
                .view_mut()
                .into_shape_with_order((o, g.od * plane))
                .expect("contiguous output");
            let mut d0 = 0;
            while d0 < g.od {
                let d1 = (d0 + band).min(g.od);
                let p = (d1 - d0) * plane;
                im2col(x_n, &g, d0, d1, &mut col[..k * p]);
                let colv = ArrayView2::from_shape((k, p), &col[..k * p]).expect("col shape");
                let mut dst = out_n.slice_mut(s![.., d0 * plane..d1 * plane]);
                general_mat_mul(F::one(), &wmat, &colv, F::zero(), &mut dst);
                d0 = d1;
            }
            if let Some(bias) = &self.bias {
                for (mut row, b) in out_n.axis_iter_mut(Axis(0)).zip(bias.value.iter()) {
                    row.mapv_inplace(|v| v + *b);
                }
            }
        }
        self.cache = match mode {
            Mode::Train => Some(x.into_owned()),
            Mode::Eval => None,
        };
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array5<F>) -> NnResult<Array5<F>> {
        let x = self.cache.take().ok_or(NnError::NoCache("conv3d"))?;
        let g = self.geometry(&x)?;
        let n = x.dim().0;
        let o = self.out_channels;
        let k = g.patch();
        let plane = g.oh * g.ow;
        let expected = [n, o, g.od, g.oh, g.ow];
        if grad.shape() != expected {
            return Err(NnError::shape(
                "conv backward",
                format!("{expected:?}"),
                format!("{:?}", grad.shape()),
            ));
        }
        let grad = grad.as_standard_layout();
        let xs = x.as_slice().expect("cached input is standard layout");
        let gs = grad.as_slice().expect("standard layout");
        let in_len = g.c * g.d * g.h * g.w;
        let out_len = o * g.od * plane;

        let mut dx = Array5::<F>::zeros(x.raw_dim());
        let band = Self::band_rows(&g);
        let mut col = vec![F::zero(); k * band * plane];
        let mut dcol = vec![F::zero(); k * band * plane];
        {
            let Param { value, grad: wgrad } = &mut self.weight;
            let wmat = value.view().into_shape_with_order((o, k)).expect("contiguous weight");
            let mut dw = wgrad
                .view_mut()
                .into_shape_with_order((o, k))
                .expect("contiguous weight grad");
            let dxs = dx.as_slice_mut().expect("fresh array");
            for i in 0..n {
                let x_n = &xs[i * in_len..(i + 1) * in_len];
                let g_n =
                    ArrayView2::from_shape((o, g.od * plane), &gs[i * out_len..(i + 1) * out_len]).expect("grad shape");
                let dx_n = &mut dxs[i * in_len..(i + 1) * in_len];
                let mut d0 = 0;
                while d0 < g.od {
                    let d1 = (d0 + band).min(g.od);
                    let p = (d1 - d0) * plane;
                    im2col(x_n, &g, d0, d1, &mut col[..k * p]);
                    let colv = ArrayView2::from_shape((k, p), &col[..k * p]).expect("col shape");
                    let g_band = g_n.slice(s![.., d0 * plane..d1 * plane]);
                    general_mat_mul(F::one(), &g_band, &colv.t(), F::one(), &mut dw);
                    if self.input_grad {
                        let mut dcolv = ArrayViewMut2::from_shape((k, p), &mut dcol[..k * p]).expect("dcol shape");
                        general_mat_mul(F::one(), &wmat.t(), &g_band, F::zero(), &mut dcolv);
                        col2im(&dcol[..k * p], &g, d0, d1, dx_n);
                    }
                    d0 = d1;
                }
            }
        }
        if let Some(bias) = &mut self.bias {
            for i in 0..n {
                for (c, b) in bias.grad.iter_mut().enumerate() {
                    let start = i * out_len + c * g.od * plane;
                    *b += gs[start..start + g.od * plane].iter().copied().sum::<F>();
                }
            }
        }
        Ok(dx)
    }
}

impl<F: Float> Module<F> for Conv3d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Direct (non-GEMM) convolution, test oracle for the im2col path.
#[cfg(test)]
pub(crate) fn naive_conv<F: Float>(
    x: &Array5<F>,
    w: &ndarray::ArrayD<F>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Array5<F> {
    let (n, c, d, h, wd) = x.dim();
    let ws = w.shape();
    let (o, k) = (ws[0], [ws[2], ws[3], ws[4]]);
    let dim = |i: usize, len: usize| (len + 2 * pad[i] - k[i]) / stride[i] + 1;
    let (od, oh, ow) = (dim(0, d), dim(1, h), dim(2, wd));
    let mut out = Array5::<F>::zeros((n, o, od, oh, ow));
    for b in 0..n {
        for oc in 0..o {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = F::zero();
                        for ic in 0..c {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for e in 0..k[2] {
                                        let iz = (z * stride[0] + a) as isize - pad[0] as isize;
                                        let iy = (y * stride[1] + bb) as isize - pad[1] as isize;
                                        let ix = (xx * stride[2] + e) as isize - pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc +=
                                            x[[b, ic, iz as usize, iy as usize, ix as usize]] * w[[oc, ic, a, bb, e]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, z, y, xx]] = acc;
                    }
                }
            }
        }
    }
    out
}
