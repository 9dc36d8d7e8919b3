use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

/// Half-cosine decay from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(Error::Argument(format!(
            "step {step} is past the schedule end {total}"
        )));
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            cfg,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Applies one update. Every gradient is checked before any parameter moves.
    pub fn step(
        &mut self,
        params: &mut [Tensor],
        grads: &[&[f64]],
        names: &[String],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return config_err(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.shape() != self.m[i].shape() {
                return config_err(format!("gradient {i} does not match its parameter"));
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                let param = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(Error::NonFiniteGradient {
                    param,
                    index,
                    value,
                });
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6).unwrap(), 2e-4);
        assert!((cosine_lr(100, 100, 2e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 2e-4, 1e-6).unwrap() - 1.005e-4).abs() < 1e-15);
        assert!(matches!(
            cosine_lr(101, 100, 2e-4, 1e-6),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, 1.0, 1.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = [0.5, -3.0, 1e-3];
        opt.step(&mut p, &[&g], &["w".into()], 0.1).unwrap();
        for (w, gi) in p[0].data().iter().zip(g) {
            let expect = 1.0 - 0.1 * gi.signum() * gi.abs() / (gi.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let init = Tensor::<f64>::from_f64(&[2], &[0.3, -0.7]).unwrap();
        let mut p = vec![init.clone()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            opt.step(&mut p, &[&[0.0, 0.0]], &["w".into()], 1e-2)
                .unwrap();
        }
        assert!(p[0].bits_eq(&init));
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let init = Tensor::<f64>::from_f64(&[2], &[0.3, -0.7]).unwrap();
        let mut p = vec![init.clone(), init.clone()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let names = ["a".to_string(), "b".to_string()];
        let err = opt
            .step(&mut p, &[&[1.0, 1.0], &[0.0, f64::NAN]], &names, 0.1)
            .unwrap_err();
        assert!(
            matches!(err, Error::NonFiniteGradient { ref param, index: 1, .. } if param == "b")
        );
        assert!(p[0].bits_eq(&init) && opt.t == 0);
    }
}
