use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, softmax, Linear, Mode, Module, Param, Relu2, Scalar};

/// Projection head f(.): two fully connected layers with ReLU between,
/// shared by all features entering the contrastive losses.
pub struct Projector<F: Scalar> {
    pub fc1: Linear<F>,
    relu: Relu2<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> Projector<F> {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(dim, dim, rng),
            relu: Relu2::new(),
            fc2: Linear::new(dim, dim, rng),
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, mode: Mode) -> Array2<F> {
        let y = self.fc1.forward(x, mode);
        let y = self.relu.forward(&y, mode);
        self.fc2.forward(&y, mode)
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let g = self.fc2.backward(gy);
        let g = self.relu.backward(&g);
        self.fc1.backward(&g)
    }
}

impl<F: Scalar> Module<F> for Projector<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Linear classifier over motion features, emitting class probabilities.
pub struct Classifier<F: Scalar> {
    pub fc: Linear<F>,
    probs: Option<Array2<F>>,
}

impl<F: Scalar> Classifier<F> {
    pub fn new(in_dim: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs >= 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            fc: Linear::new(in_dim, num_classes, rng),
            probs: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn forward(&mut self, m: &Array2<F>, mode: Mode) -> Array2<F> {
        let logits = self.fc.forward(m, mode);
        let probs = softmax(&logits);
        if mode == Mode::Train {
            self.probs = Some(probs.clone());
        }
        probs
    }

    /// Backward of mean cross-entropy taken directly against the cached
    /// softmax output: d logits = (p - onehot) / n.
    pub fn backward_cross_entropy(&mut self, labels: &Array1<usize>) -> Array2<F> {
        let probs = self.probs.take().expect("classifier backward without forward");
        let (n, _) = probs.dim();
        let scale = F::one() / F::from_usize(n).unwrap();
        let mut g = probs;
        for (i, &label) in labels.iter().enumerate() {
            g[[i, label]] -= F::one();
        }
        g.mapv_inplace(|v| v * scale);
        self.fc.backward(&g)
    }
}

impl<F: Scalar> Module<F> for Classifier<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
}
