use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Mean squared error over every element, with its gradient
/// `2 (pred - target) / numel`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    let n = T::lit(pred.len().max(1) as f64);
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d * d;
            two * d / n
        })
        .collect();
    Ok((sum / n, Tensor::from_parts(pred.shape().to_vec(), grad)))
}
