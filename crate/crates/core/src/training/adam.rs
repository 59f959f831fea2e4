use std::collections::BTreeMap;

use super::TrainError;
use crate::network::ModelParams;
use crate::tensor::Tensor;

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update steps.
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }
}

/// One Adam update of every parameter. All gradients are validated before
/// anything is modified.
pub fn adam_step(params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, st: &mut AdamState) -> Result<(), TrainError> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(TrainError::GradShape {
                name: name.clone(),
                param: p.shape(),
                grad: g.shape(),
            });
        }
    }
    st.step += 1;
    let t = st.step as f64;
    let bc1 = 1.0 - st.beta1.powf(t);
    let bc2 = 1.0 - st.beta2.powf(t);
    let (b1, b2, lr, eps) = (st.beta1, st.beta2, st.lr, st.eps);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = st
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = st
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for (((theta, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn single(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::scalar(v));
        p
    }

    fn grads(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("a".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 after one step, so the update is
        // lr * g / (|g| + eps).
        let mut p = single(0.0);
        let mut st = AdamState::new(0.1);
        adam_step(&mut p, &grads(1.0), &mut st).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.get("a").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_alone() {
        let mut p = single(0.7);
        let mut st = AdamState::new(0.1);
        for _ in 0..10 {
            adam_step(&mut p, &grads(0.0), &mut st).unwrap();
        }
        assert_eq!(p.get("a").unwrap().data()[0], 0.7);
    }

    #[test]
    fn identical_gradients_give_identical_updates() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::full(Shape::new(1, 1, 2, 1), 0.3));
        p.insert("b", Tensor::full(Shape::new(1, 1, 2, 1), 0.3));
        let g = Tensor::new(Shape::new(1, 1, 2, 1), vec![0.2, -1.5]).unwrap();
        let grads = BTreeMap::from([("a".to_string(), g.clone()), ("b".to_string(), g)]);
        let mut st = AdamState::new(0.01);
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut st).unwrap();
        }
        assert_eq!(p.get("a"), p.get("b"));
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = single(0.0);
        p.insert("enc0.map.w", Tensor::scalar(1.0));
        let mut st = AdamState::new(0.1);
        let err = adam_step(&mut p, &grads(1.0), &mut st).unwrap_err();
        assert!(err.to_string().contains("enc0.map.w"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(p.get("a").unwrap().data()[0], 0.0);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut p = single(0.0);
        let mut st = AdamState::new(1e-3);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..1000 {
            adam_step(&mut p, &grads(-0.37), &mut st).unwrap();
            let now = p.get("a").unwrap().data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 1e-3).abs() < 1e-5, "{last_step}");
    }
}
