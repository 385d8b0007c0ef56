//! Adam with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::model::{ModelParams, ParamTensors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be >= 0"));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::config("adam betas must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("adam epsilon must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ParamTensors,
    pub v: ParamTensors,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            config,
            m: ParamTensors::zeros_like(model.params()),
            v: ParamTensors::zeros_like(model.params()),
            t: 0,
        })
    }

    /// One update `w -= lr * m_hat / (sqrt(v_hat) + eps)` on weights and biases.
    pub fn step(&mut self, model: &mut ModelParams, grads: &ParamTensors) -> Result<()> {
        if !grads.congruent(&self.m) {
            return Err(Error::input("gradient shapes do not match optimizer state"));
        }
        check_finite(model, grads)?;
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        let tensors = model
            .params_mut()
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((w, g), (m, v)) in tensors {
            let w = w.as_mut_slice();
            let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_finite(model: &ModelParams, grads: &ParamTensors) -> Result<()> {
    let names: Vec<String> = model
        .arch()
        .param_layers()
        .map(|(i, l)| format!("layer {i} ({})", l.name()))
        .collect();
    let n = names.len();
    for (k, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            let (p, what) = if k < n {
                (k, "weight")
            } else {
                (k - n, "bias")
            };
            return Err(Error::Numeric {
                layer: names[p].clone(),
                detail: format!("{what} gradient"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Architecture};

    fn model() -> ModelParams {
        build_model(&Architecture::reference(8, 3), 5).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut m = model();
        let before = m.clone();
        let mut st = AdamState::new(&m, AdamConfig::default()).unwrap();
        let g = ParamTensors::zeros_like(m.params());
        st.step(&mut m, &g).unwrap();
        assert_eq!(m, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = model();
        let before = m.clone();
        let mut st = AdamState::new(&m, AdamConfig::with_lr(0.001)).unwrap();
        let mut g = ParamTensors::zeros_like(m.params());
        for t in g.iter_mut() {
            t.fill(-0.37);
        }
        st.step(&mut m, &g).unwrap();
        for (a, b) in m.params().iter().zip(before.params().iter()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!(((x - y) - 0.001).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut m = model();
        let before = m.clone();
        let mut st = AdamState::new(&m, AdamConfig::with_lr(0.0)).unwrap();
        let mut g = ParamTensors::zeros_like(m.params());
        g.weights[0].fill(4.0);
        st.step(&mut m, &g).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut m = model();
        let mut st = AdamState::new(&m, AdamConfig::default()).unwrap();
        let mut g = ParamTensors::zeros_like(m.params());
        g.weights[2].as_mut_slice()[0] = f64::NAN;
        let err = st.step(&mut m, &g).unwrap_err();
        match err {
            Error::Numeric { layer, .. } => assert!(layer.contains("layer 5"), "{layer}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_config_rejected() {
        let m = model();
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(&m, cfg).is_err());
    }
}
