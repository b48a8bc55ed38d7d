use super::ParamValues;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Parameters without a gradient entry
    /// are updated with a zero gradient (weight decay still applies).
    pub fn step(
        &mut self,
        params: &mut ParamValues,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, (_, data)) in params.entries.iter_mut() {
            let n = data.len();
            if let Some(g) = grads.get(name) {
                if g.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "adamw_step",
                        lhs: vec![n],
                        rhs: vec![g.len()],
                    });
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adamw_state",
                    lhs: vec![n],
                    rhs: vec![m.len()],
                });
            }
            let zero = vec![0.0; n];
            let g = grads.get(name).map(|g| g.as_slice()).unwrap_or(&zero);
            for i in 0..n {
                // decoupled weight decay
                data[i] -= c.lr * c.weight_decay * data[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(x: f64) -> ParamValues {
        let mut p = ParamValues::new();
        p.insert("x", vec![1], vec![x]);
        p
    }

    #[test]
    fn zero_grad_zero_decay_unchanged() {
        let mut p = single_param(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![0.0]);
        opt.step(&mut p, &grads).unwrap();
        assert_eq!(p.get("x").unwrap().1[0], 0.7);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let x0 = 0.5;
        let g = 0.3;
        let c = AdamWConfig::default();
        let mut p = single_param(x0);
        let mut opt = AdamW::new(c);
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![g]);
        opt.step(&mut p, &grads).unwrap();

        // hand-computed first AdamW step
        let xd = x0 - c.lr * c.weight_decay * x0;
        let m = (1.0 - c.beta1) * g;
        let v = (1.0 - c.beta2) * g * g;
        let m_hat = m / (1.0 - c.beta1);
        let v_hat = v / (1.0 - c.beta2);
        let want = xd - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        assert!((p.get("x").unwrap().1[0] - want).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2 from 0 with a larger lr for speed
        let mut p = single_param(0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..100 {
            let x = p.get("x").unwrap().1[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), vec![2.0 * (x - 3.0)]);
            opt.step(&mut p, &grads).unwrap();
        }
        let x = p.get("x").unwrap().1[0];
        assert!((x - 3.0).abs() < 0.5, "got {x}");
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = single_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), vec![1.0, 2.0]);
        assert!(opt.step(&mut p, &grads).is_err());
    }
}
