use super::AdaptError;
use crate::autodiff::Tensor;
use crate::model::MultimodalClassifier;

/// One momentum-SGD update: `v <- momentum * v + grad; param <- param - lr * v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) -> Result<(), AdaptError> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(AdaptError::ShapeMismatch {
            param: param.shape().to_vec(),
            grad: grad.shape().to_vec(),
        });
    }
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over a fixed subset of a model's parameters.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    indices: Vec<usize>,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(model: &MultimodalClassifier, indices: &[usize], learning_rate: f64, momentum: f64) -> Self {
        let velocity = indices
            .iter()
            .map(|&i| Tensor::zeros(model.parameters()[i].value.shape()))
            .collect();
        Self {
            learning_rate,
            momentum,
            indices: indices.to_vec(),
            velocity,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `grads[j]` belongs to parameter `indices()[j]`.
    pub fn step(&mut self, model: &mut MultimodalClassifier, grads: &[Tensor]) -> Result<(), AdaptError> {
        if grads.len() != self.indices.len() {
            return Err(AdaptError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.indices.len()
            )));
        }
        for ((&i, v), g) in self.indices.iter().zip(&mut self.velocity).zip(grads) {
            sgd_step(&mut model.parameter_mut(i).value, g, v, self.learning_rate, self.momentum)?;
        }
        Ok(())
    }
}
