use super::mlp::{MlpGrads, MlpParams};

/// Bias-corrected Adam over one net's parameters, walked in the fixed
/// block order (w1, b1, w2, b2).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params.param_count()],
            v: vec![0.0; params.param_count()],
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        let mut flat = params.flatten();
        let grad_flat = grads.flatten();
        assert_eq!(flat.len(), self.m.len(), "adam state shape");
        assert_eq!(grad_flat.len(), self.m.len(), "gradient shape");

        for i in 0..flat.len() {
            let g = grad_flat[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            flat[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.unflatten(&flat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::Matrix;
    use crate::nn::mlp::OutputActivation;

    fn scalar_net(value: f64) -> MlpParams {
        MlpParams {
            in_dim: 1,
            hidden_dim: 1,
            out_dim: 1,
            w1: Matrix::from_vec(1, 1, vec![value]).unwrap(),
            b1: vec![0.0],
            w2: Matrix::from_vec(1, 1, vec![0.0]).unwrap(),
            b2: vec![0.0],
            output: OutputActivation::Identity,
        }
    }

    fn grads_with_w1(value: f64, params: &MlpParams) -> MlpGrads {
        let mut g = MlpGrads::zeros_like(params);
        g.w1 = Matrix::from_vec(1, 1, vec![value]).unwrap();
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = scalar_net(0.3);
        let before = params.flatten();
        let zero_grads = MlpGrads::zeros_like(&params);
        let mut adam = AdamState::new(&params, 1e-2);
        adam.step(&mut params, &zero_grads);
        assert_eq!(params.flatten(), before);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes m_hat / sqrt(v_hat) = 1 on the first step,
        // so the update is -lr (up to eps).
        let mut params = scalar_net(1.0);
        let grads = grads_with_w1(1.0, &params);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &grads);
        let delta = params.w1.get(0, 0) - 1.0;
        assert!((delta + 1e-3).abs() < 1e-8, "delta {delta}");
    }

    #[test]
    fn two_steps_match_scalar_reference() {
        // Scalar Adam replayed by hand for constant gradient g = 0.5.
        let g = 0.5;
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let mut x = 2.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_pow(b1, t));
            let v_hat = v / (1.0 - b1_pow(b2, t));
            x -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut params = scalar_net(2.0);
        let grads = grads_with_w1(g, &params);
        let mut adam = AdamState::new(&params, lr);
        for _ in 0..2 {
            adam.step(&mut params, &grads);
        }
        assert!((params.w1.get(0, 0) - x).abs() < 1e-14);
        assert_eq!(adam.step_count, 2);
    }

    fn b1_pow(base: f64, t: u32) -> f64 {
        base.powi(t as i32)
    }
}
