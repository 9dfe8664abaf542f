use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers aligned with a parameter list.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure(&mut self, shapes: &[&[usize]]) -> Result<(), AutodiffError> {
        if self.first.is_empty() {
            self.first = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            self.second = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        }
        if self.first.len() != shapes.len()
            || self.first.iter().zip(shapes).any(|(m, s)| m.shape() != *s)
        {
            return Err(AutodiffError::Shape("Adam moments do not match parameters".into()));
        }
        Ok(())
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// One bias-corrected Adam update over aligned parameter / gradient lists.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() {
        return Err(AutodiffError::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(AutodiffError::Shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
    state.ensure(&shapes)?;
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(eps);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[k].data_mut();
        let v = state.second[k].data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *pi -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Applies [`adam_step`] to the trainable entries of a store, in store order.
/// `grads` is indexed like the store; `None` counts as a zero gradient.
pub fn adam_step_store<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), AutodiffError> {
    if grads.len() != store.len() {
        return Err(AutodiffError::Shape("gradient list does not match store".into()));
    }
    let zeros: Vec<Option<Tensor<T>>> = store
        .entries()
        .iter()
        .zip(grads)
        .map(|(e, g)| match g {
            None if e.trainable => Some(Tensor::zeros(e.tensor.shape())),
            _ => None,
        })
        .collect();
    let mut grad_refs = Vec::new();
    for ((e, g), z) in store.entries().iter().zip(grads).zip(&zeros) {
        if e.trainable {
            grad_refs.push(g.as_ref().or(z.as_ref()).expect("filled above"));
        }
    }
    let trainable: Vec<usize> = (0..store.len()).filter(|&i| store.entries()[i].trainable).collect();
    let mut tensors: Vec<Tensor<T>> = trainable
        .iter()
        .map(|&i| std::mem::replace(&mut store.entry_mut(i).tensor, Tensor::zeros(&[1])))
        .collect();
    let result = {
        let mut refs: Vec<&mut Tensor<T>> = tensors.iter_mut().collect();
        adam_step(&mut refs, &grad_refs, state, lr)
    };
    for (&i, t) in trainable.iter().zip(tensors) {
        store.entry_mut(i).tensor = t;
    }
    result
}
