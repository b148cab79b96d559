use super::OptimizerKind;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
    v_max: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let state = if kind == OptimizerKind::Amsgrad { n } else { 0 };
        Self {
            kind,
            lr,
            t: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
            v_max: vec![0.0; state],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Amsgrad => {
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = (1.0 - BETA2.powi(self.t)).sqrt();
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    self.v_max[i] = self.v_max[i].max(self.v[i]);
                    let denom = self.v_max[i].sqrt() / c2 + EPS;
                    params[i] -= self.lr / c1 * self.m[i] / denom;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_amsgrad_step_has_learning_rate_size() {
        let mut opt = Optimizer::new(OptimizerKind::Amsgrad, 0.1, 2);
        let mut p = [1.0, -2.0];
        opt.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        for kind in [OptimizerKind::Amsgrad, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.05, 1);
            let mut p = [4.0];
            for _ in 0..2000 {
                let g = [2.0 * (p[0] - 1.0)];
                opt.step(&mut p, &g);
            }
            assert!((p[0] - 1.0).abs() < 1e-3, "{kind:?}: {}", p[0]);
        }
    }
}
