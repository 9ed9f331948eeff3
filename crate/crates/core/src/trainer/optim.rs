use super::model::ParamTensors;

/// Adam with decoupled weight decay. Moment buffers follow the visit order
/// of the parameter set they were created for.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, params: &[&dyn ParamTensors]) -> Self {
        let mut shapes = Vec::new();
        for p in params {
            p.visit(&mut |_, t| shapes.push(t.len()));
        }
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every tensor in `params` from the matching `grads`.
    pub fn update(&mut self, params: &mut [&mut dyn ParamTensors], grads: &[&dyn ParamTensors]) {
        self.step += 1;
        let mut flat_grads: Vec<Vec<f64>> = Vec::new();
        for g in grads {
            g.visit(&mut |_, t| flat_grads.push(t.to_vec()));
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, wd, b1, b2, eps) = (
            self.learning_rate,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
        );
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        for p in params.iter_mut() {
            p.visit_mut(&mut |_, t| {
                let g = &flat_grads[idx];
                let (m, v) = (&mut ms[idx], &mut vs[idx]);
                for k in 0..t.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    let mhat = m[k] / bc1;
                    let vhat = v[k] / bc2;
                    t[k] -= lr * (mhat / (vhat.sqrt() + eps) + wd * t[k]);
                }
                idx += 1;
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::ScalarHead;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut head = ScalarHead {
            weight: vec![1.0, -1.0],
            bias: 0.5,
        };
        let grad = ScalarHead {
            weight: vec![2.0, -3.0],
            bias: 0.0,
        };
        let mut opt = AdamW::new(0.1, 0.0, &[&head]);
        opt.update(&mut [&mut head], &[&grad]);
        assert!((head.weight[0] - 0.9).abs() < 1e-6);
        assert!((head.weight[1] + 0.9).abs() < 1e-6);
        assert_eq!(head.bias, 0.5);
    }
}
