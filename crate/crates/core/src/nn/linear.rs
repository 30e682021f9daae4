use ndarray::{Array2, ArrayD, Axis, Ix2};
use rand::Rng;

use super::{join, Float, Mode, Module, NnError, NnResult, Param};

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<Array2<F>>,
}

impl<F: Float> Linear<F> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming(&[out_features, in_features], in_features, rng),
            bias: Param::zeros(&[out_features]),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn weight2(w: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
        w.view().into_dimensionality::<Ix2>().expect("2D weight")
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> NnResult<Array2<F>> {
        if x.ncols() != self.in_features() {
            return Err(NnError::shape("linear", self.in_features(), x.ncols()));
        }
        let w = Self::weight2(&self.weight.value);
        let mut y = x.dot(&w.t());
        y += &self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1D bias");
        self.cache = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Array2<F>) -> NnResult<Array2<F>> {
        let x = self.cache.take().ok_or(NnError::NoCache("linear"))?;
        if grad.ncols() != self.out_features() || grad.nrows() != x.nrows() {
            return Err(NnError::shape(
                "linear backward",
                format!("({}, {})", x.nrows(), self.out_features()),
                format!("{:?}", grad.shape()),
            ));
        }
        let dw = grad.t().dot(&x);
        let mut wg = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2D weight");
        wg += &dw;
        let db = grad.sum_axis(Axis(0));
        let mut bg = self
            .bias
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("1D bias");
        bg += &db;
        Ok(grad.dot(&Self::weight2(&self.weight.value)))
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_and_backward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fc = Linear::<f64>::new(5, 3, &mut rng);
        let x = Array2::from_elem((4, 5), 0.5);
        let y = fc.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dim(), (4, 3));
        let dx = fc.backward(&Array2::from_elem((4, 3), 1.0)).unwrap();
        assert_eq!(dx.dim(), (4, 5));
        assert!(fc.bias.grad.iter().all(|g| *g == 4.0));
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fc = Linear::<f32>::new(5, 3, &mut rng);
        assert!(fc.forward(&Array2::zeros((1, 4)), Mode::Eval).is_err());
    }
}
