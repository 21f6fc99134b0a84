use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam moments for an ordered list of parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Matrix>) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. A missing gradient is treated as zero.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.first[i].shape() || grads[i].is_some_and(|g| g.shape() != p.shape()) {
                return Err(Error::dim("adam_step", format!("parameter {i} shape")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let g = grads[i].map_or(0.0, |g| g.data()[j]) + c.weight_decay * pd[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mh = m[j] / bias1;
                let vh = v[j] / bias2;
                pd[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let before = w.clone();
        let mut st = AdamState::new(cfg, [&w]);
        let g = Matrix::zeros(1, 2);
        for _ in 0..5 {
            st.step(&mut [&mut w], &[Some(&g)]).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(st.steps(), 5);
    }

    fn run_quadratic() -> (Matrix, Vec<f64>) {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = Matrix::scalar(1.0);
        let mut st = AdamState::new(cfg, [&w]);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let x = w.item();
            losses.push(x * x);
            let g = Matrix::scalar(2.0 * x);
            st.step(&mut [&mut w], &[Some(&g)]).unwrap();
        }
        (w, losses)
    }

    #[test]
    fn quadratic_descends() {
        let (w, losses) = run_quadratic();
        assert!(w.item().abs() < 0.5);
        assert!(losses.windows(2).all(|p| p[1] < p[0]));
    }

    #[test]
    fn deterministic() {
        assert_eq!(run_quadratic().0.data(), run_quadratic().0.data());
    }

    #[test]
    fn shape_mismatch() {
        let mut w = Matrix::zeros(2, 2);
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        let g = Matrix::zeros(1, 2);
        assert!(st.step(&mut [&mut w], &[Some(&g)]).is_err());
    }
}
