use super::{Float, Tensor};
use crate::error::{Error, Result};

/// A learnable tensor with its momentum buffer and last gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub velocity: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Float> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let velocity = Tensor::zeros(value.shape().to_vec());
        Param {
            name: name.into(),
            value,
            velocity,
            grad: None,
        }
    }
}

/// SGD with heavy-ball momentum:
/// `v <- momentum * v + grad; p <- p - lr * v`, then clears every gradient.
///
/// Fails without touching any parameter if one of them has no gradient.
pub fn sgd_step<'a, T: Float>(
    params: impl IntoIterator<Item = &'a mut Param<T>>,
    lr: T,
    momentum: T,
) -> Result<()> {
    let mut params: Vec<&mut Param<T>> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let Param {
            value, velocity, ..
        } = &mut **p;
        for ((w, v), &g) in value
            .data_mut()
            .iter_mut()
            .zip(velocity.data_mut())
            .zip(grad.data())
        {
            *v = momentum * *v + g;
            *w = *w - lr * *v;
        }
    }
    Ok(())
}
