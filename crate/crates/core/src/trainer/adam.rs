/// Adam moment buffers for one parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// One bias-corrected Adam update at step `t >= 1`, with decoupled
    /// weight decay `params *= 1 - lr·weight_decay` applied first.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64, t: u64) {
        assert!(t >= 1, "Adam steps are counted from 1");
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        let bc1 = 1.0 - BETA1.powf(t as f64);
        let bc2 = 1.0 - BETA2.powf(t as f64);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if weight_decay != 0.0 {
                params[i] *= decay;
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for t in 1..=10 {
            s.step(&mut p, &[0.0; 3], 1e-2, 0.0, t);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let lr = 1e-3;
        for &g in &[1e-4, 0.3, -50.0] {
            let mut s = AdamState::new(1);
            let mut p = vec![0.0];
            let mut last = 0.0;
            for t in 1..=2000 {
                let before = p[0];
                s.step(&mut p, &[g], lr, 0.0, t);
                last = p[0] - before;
            }
            assert!((last.abs() - lr).abs() < lr * 1e-3, "g={g} step={last}");
            assert_eq!(last.signum(), -g.signum());
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut s = AdamState::new(1);
        let mut p = vec![2.0];
        s.step(&mut p, &[0.0], 0.1, 0.5, 1);
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
    }
}
