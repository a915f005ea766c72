use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Gradients};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "radam" => Ok(OptimizerKind::Radam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L2 coefficient added to the gradient before the moment update.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn radam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Radam,
            ..Self::adam(learning_rate)
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    /// Learning rate zero is accepted so that a frozen run can be expressed.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Named parameters plus the optimizer state that belongs to them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    moments: BTreeMap<String, Moments>,
    #[serde(default)]
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.moments.remove(&name);
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter on `graph`, as trainable leaves or as
    /// constants.
    pub fn bind(&self, graph: &Graph, trainable: bool) -> Result<Bound> {
        let mut out = Bound::new();
        for (name, t) in &self.params {
            let v = if trainable {
                graph.param(name, t.clone())?
            } else {
                graph.constant(t.clone())
            };
            out.insert(name.clone(), v);
        }
        Ok(out)
    }

    /// Order-sensitive digest of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in &self.params {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
            for x in t.data() {
                h = (h ^ x.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    fn prepare(&mut self, grads: &Gradients, cfg: &OptimizerConfig) -> Result<BTreeMap<String, Tensor>> {
        cfg.validate()?;
        let mut effective = BTreeMap::new();
        for (name, p) in &self.params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Shape(format!("no gradient for parameter {name}")))?;
            if g.shape() != p.shape() {
                return shape_err(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ));
            }
            let mut g = g.clone();
            if cfg.weight_decay > 0.0 {
                for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                    *gv += cfg.weight_decay * pv;
                }
            }
            effective.insert(name.clone(), g);
        }
        for (name, p) in &self.params {
            self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.shape()),
                second: Tensor::zeros(p.shape()),
            });
        }
        self.step += 1;
        Ok(effective)
    }

    /// Applies one update of the configured kind.
    pub fn step(&mut self, grads: &Gradients, cfg: &OptimizerConfig) -> Result<()> {
        match cfg.kind {
            OptimizerKind::Adam => adam_step(self, grads, cfg),
            OptimizerKind::Radam => radam_step(self, grads, cfg),
            OptimizerKind::Sgd => sgd_step(self, grads, cfg),
        }
    }
}

/// Bias-corrected Adam.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, cfg: &OptimizerConfig) -> Result<()> {
    let grads = params.prepare(grads, cfg)?;
    let t = params.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.params.iter_mut() {
        let m = params.moments.get_mut(name).unwrap();
        let g = &grads[name];
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.first.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * m.second.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.first.data_mut()[i] = mi;
            m.second.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Length of the approximated simple moving average at infinity.
pub fn radam_rho_inf(beta2: f64) -> f64 {
    2.0 / (1.0 - beta2) - 1.0
}

/// Length of the approximated simple moving average after `t` steps.
pub fn radam_rho(beta2: f64, t: u64) -> f64 {
    let bt = beta2.powi(t as i32);
    radam_rho_inf(beta2) - 2.0 * t as f64 * bt / (1.0 - bt)
}

/// Variance rectification term; only defined for `rho_t > 4`.
pub fn radam_rectifier(beta2: f64, t: u64) -> f64 {
    let rho_inf = radam_rho_inf(beta2);
    let rho = radam_rho(beta2, t);
    (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
}

/// Rectified Adam: momentum-only steps while the variance estimate is
/// intractable (`rho_t <= 4`), rectified adaptive steps afterwards.
pub fn radam_step(params: &mut ParamSet, grads: &Gradients, cfg: &OptimizerConfig) -> Result<()> {
    let grads = params.prepare(grads, cfg)?;
    let t = params.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let rho = radam_rho(cfg.beta2, t);
    let rect = if rho > 4.0 { Some(radam_rectifier(cfg.beta2, t)) } else { None };
    for (name, p) in params.params.iter_mut() {
        let m = params.moments.get_mut(name).unwrap();
        let g = &grads[name];
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.first.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * m.second.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.first.data_mut()[i] = mi;
            m.second.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let update = match rect {
                Some(r) => r * m_hat * bc2.sqrt() / (vi.sqrt() + cfg.epsilon),
                None => m_hat,
            };
            p.data_mut()[i] -= cfg.learning_rate * update;
        }
    }
    Ok(())
}

pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, cfg: &OptimizerConfig) -> Result<()> {
    let grads = params.prepare(grads, cfg)?;
    for (name, p) in params.params.iter_mut() {
        for (pv, gv) in p.data_mut().iter_mut().zip(grads[name].data()) {
            *pv -= cfg.learning_rate * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn zero_gradient_is_identity_for_adaptive_optimizers() {
        for cfg in [OptimizerConfig::adam(1e-3), OptimizerConfig::radam(1e-3)] {
            let mut p = single(0.7);
            for _ in 0..20 {
                p.step(&grad(0.0), &cfg).unwrap();
            }
            assert_eq!(p.get("w").unwrap().data(), &[0.7]);
            assert_eq!(p.step_count(), 20);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g and v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps).
        let cfg = OptimizerConfig::adam(1e-3);
        for g in [-3.0, 0.25, 40.0] {
            let mut p = single(1.0);
            p.step(&grad(g), &cfg).unwrap();
            let expected = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
            assert!((p.get("w").unwrap().data()[0] - (1.0 - 1e-3 * g.signum())).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_constant_gradient_strictly_decreases() {
        let cfg = OptimizerConfig::adam(1e-3);
        let mut p = single(0.0);
        let mut prev = 0.0;
        for _ in 0..100 {
            p.step(&grad(1.0), &cfg).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn radam_rho_values() {
        assert!((radam_rho_inf(0.999) - 1999.0).abs() < 1e-9);
        // rho_1 = rho_inf - 2 * b / (1 - b) = 1999 - 1998 = 1
        assert!((radam_rho(0.999, 1) - 1.0).abs() < 1e-9);
        assert!(radam_rho(0.999, 1) <= 4.0);
        // The rectifier approaches one as t grows.
        assert!((radam_rectifier(0.999, 1_000_000) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn radam_early_steps_are_plain_momentum() {
        let cfg = OptimizerConfig::radam(0.1);
        let mut p = single(0.0);
        p.step(&grad(2.0), &cfg).unwrap();
        // m_hat = g at t = 1; the update ignores the second moment.
        assert!((p.get("w").unwrap().data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn radam_matches_hand_recurrence_past_threshold() {
        let cfg = OptimizerConfig::radam(1e-2);
        let gs = [0.5, -1.0, 2.0, 0.3, 0.3, -0.7, 1.1, 0.9];
        let mut p = single(1.0);
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            p.step(&grad(g), &cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let b2t = 0.999f64.powi(t);
            let rho_inf = 2.0 / 0.001 - 1.0;
            let rho = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
            if rho > 4.0 {
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                w -= 1e-2 * r * m_hat * (1.0 - b2t).sqrt() / (v.sqrt() + 1e-8);
            } else {
                w -= 1e-2 * m_hat;
            }
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-14, "step {t}");
        }
        // rho_t crosses 4 within these steps.
        assert!(radam_rho(0.999, 4) <= 4.0 && radam_rho(0.999, 5) > 4.0);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut cfg = OptimizerConfig::sgd(0.5);
        cfg.weight_decay = 0.1;
        let mut p = single(2.0);
        p.step(&grad(0.0), &cfg).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut p = single(1.0);
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::zeros(&[2]));
        assert!(matches!(p.step(&g, &OptimizerConfig::adam(1e-3)), Err(Error::Shape(_))));
        assert!(matches!(p.step(&Gradients::new(), &OptimizerConfig::adam(1e-3)), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_betas_are_config_errors() {
        let mut cfg = OptimizerConfig::adam(1e-3);
        cfg.beta2 = 1.0;
        assert!(matches!(single(0.0).step(&grad(1.0), &cfg), Err(Error::Config(_))));
    }
}
