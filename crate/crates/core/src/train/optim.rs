//! Adam with bias correction, operating over the model's visit order.

use crate::model::ModelParams;
use crate::tensor::Mat;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first: Vec<Mat>,
    pub second: Vec<Mat>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams) -> Self {
        let shapes: Vec<Mat> = model.visit().iter().map(|(_, m)| Mat::zeros(m.rows, m.cols)).collect();
        AdamState { first: shapes.clone(), second: shapes, step: 0 }
    }

    /// One update over all trainable tensors; `grads` aligns with the
    /// model's visit order.
    pub fn apply(&mut self, model: &mut ModelParams, grads: &[Mat], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let mut tensors = model.visit_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient count mismatch");
        for (idx, (_, param)) in tensors.iter_mut().enumerate() {
            let g = &grads[idx];
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for i in 0..param.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                param.data[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
    }
}
