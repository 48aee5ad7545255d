use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    /// One in-place update of `params` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam step: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.t += 1;
        let t = i32::try_from(self.t).map_err(|_| Error::contract("adam step counter overflow"))?;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, th) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] + weight_decay * *th;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *th -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first step is lr·sign(g) up to eps
        let mut st = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[vec![2]],
        );
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        st.step(
            &mut [&mut p],
            &[Tensor::new(vec![2], vec![0.5, -3.0]).unwrap()],
        )
        .unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut st = AdamState::new(AdamConfig::default(), &[vec![2]]);
        let mut p = Tensor::zeros(&[2]);
        assert!(st.step(&mut [&mut p], &[]).is_err());
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }
}
