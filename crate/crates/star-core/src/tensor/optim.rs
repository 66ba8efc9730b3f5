//! Named parameter storage and first-order optimizers.
//!
//! A [`ParamSet`] owns every trainable tensor of a model keyed by a
//! dotted path (`"pi_sem.w0"`). Optimizer moments live next to the
//! values so a checkpoint restores training exactly. Iteration order is
//! the BTreeMap key order, which keeps update order (and therefore the
//! whole parameter trajectory) reproducible.

use std::collections::BTreeMap;

use super::{Tensor, TensorError};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OptVariant {
    Adam,
    RAdam,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Param {
    pub value: Tensor,
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let (r, c) = value.shape();
        self.entries.insert(
            name.to_string(),
            Param { value, m: Tensor::zeros(r, c), v: Tensor::zeros(r, c), steps: 0 },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn steps(&self, name: &str) -> Option<u64> {
        self.entries.get(name).map(|p| p.steps)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k, &p.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `other` in under `prefix.`; used to seed a
    /// policy from a pre-trained prior of identical layout.
    pub fn adopt(&mut self, prefix: &str, other: &ParamSet, other_prefix: &str) {
        for (name, p) in &other.entries {
            if let Some(rest) = name.strip_prefix(other_prefix) {
                self.insert(&format!("{prefix}{rest}"), p.value.clone());
            }
        }
    }

    /// Applies one Adam/RAdam update per named gradient. Parameters not
    /// present in `grads` are untouched and keep their step counts.
    pub fn step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        variant: OptVariant,
    ) -> Result<(), TensorError> {
        for (name, g) in grads {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.value.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGrad(name.clone()));
            }
            p.steps += 1;
            let t = p.steps as f64;
            let bc1 = 1.0 - BETA1.powf(t);
            let bc2 = 1.0 - BETA2.powf(t);
            match variant {
                OptVariant::Adam => {
                    for i in 0..g.data.len() {
                        let gi = g.data[i];
                        p.m.data[i] = BETA1 * p.m.data[i] + (1.0 - BETA1) * gi;
                        p.v.data[i] = BETA2 * p.v.data[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = p.m.data[i] / bc1;
                        let vhat = p.v.data[i] / bc2;
                        p.value.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
                OptVariant::RAdam => {
                    // Rectified Adam: falls back to plain momentum while
                    // the variance estimate is untrustworthy (rho <= 4).
                    let rho_inf = 2.0 / (1.0 - BETA2) - 1.0;
                    let b2t = BETA2.powf(t);
                    let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
                    let rect = if rho > 4.0 {
                        Some(
                            (((rho - 4.0) * (rho - 2.0) * rho_inf)
                                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                                .sqrt(),
                        )
                    } else {
                        None
                    };
                    for i in 0..g.data.len() {
                        let gi = g.data[i];
                        p.m.data[i] = BETA1 * p.m.data[i] + (1.0 - BETA1) * gi;
                        p.v.data[i] = BETA2 * p.v.data[i] + (1.0 - BETA2) * gi * gi;
                        let mhat = p.m.data[i] / bc1;
                        match rect {
                            Some(r) => {
                                let vhat = (p.v.data[i] / bc2).sqrt();
                                p.value.data[i] -= lr * r * mhat / (vhat + ADAM_EPS);
                            }
                            None => p.value.data[i] -= lr * mhat,
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Dual variables ──────────────────────────────────────────────────

/// A Lagrange multiplier parameterized as `exp(log_value)` so it stays
/// positive, driven toward a divergence target.
///
/// The default direction raises the multiplier when the measured
/// divergence exceeds its target (tightening the constraint) and lowers
/// it otherwise. `literal_sign` flips this, reproducing the sign as
/// printed in the reference pseudocode; it is exposed for side-by-side
/// comparison and is off everywhere by default.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DualVariable {
    log_value: f64,
    pub target: f64,
    pub lr: f64,
    pub literal_sign: bool,
}

impl DualVariable {
    pub fn new(init: f64, target: f64, lr: f64) -> Self {
        assert!(init > 0.0, "dual variable must start positive");
        DualVariable { log_value: init.ln(), target, lr, literal_sign: false }
    }

    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    /// One dual step against a measured divergence; returns the updated
    /// multiplier value.
    pub fn update(&mut self, divergence: f64) -> Result<f64, TensorError> {
        if !divergence.is_finite() {
            return Err(TensorError::NonFiniteDual);
        }
        let delta = self.lr * (divergence - self.target);
        self.log_value += if self.literal_sign { -delta } else { delta };
        Ok(self.value())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // === Adam ===

    #[test]
    fn adam_first_step_hand_computed() {
        // f(x) = x^2 at x = 1, lr = 0.1: g = 2, m = 0.2, v = 0.004,
        // mhat = 2, vhat = 4 => x' = 1 - 0.1 * 2/2 = 0.9 (eps-sized slack).
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(2.0));
        p.step(&grads, 0.1, OptVariant::Adam).unwrap();
        let x = p.get("x").unwrap().item();
        assert!((x - 0.9).abs() < 1e-8, "got {x}");
        assert_eq!(p.steps("x"), Some(1));
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(3.0));
        for _ in 0..400 {
            let x = p.get("x").unwrap().item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * x));
            p.step(&grads, 0.05, OptVariant::Adam).unwrap();
        }
        assert!(p.get("x").unwrap().item().abs() < 1e-2);
    }

    #[test]
    fn radam_first_steps_are_momentum_only() {
        // With beta2 = 0.999, rho stays <= 4 for the first 4 steps, so
        // RAdam applies un-rectified momentum: x' = x - lr * mhat = 1 - 0.1*2.
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(2.0));
        p.step(&grads, 0.1, OptVariant::RAdam).unwrap();
        let x = p.get("x").unwrap().item();
        assert!((x - 0.8).abs() < 1e-12, "got {x}");
    }

    #[test]
    fn radam_converges_on_quadratic() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(-2.0));
        for _ in 0..600 {
            let x = p.get("x").unwrap().item();
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * x));
            p.step(&grads, 0.05, OptVariant::RAdam).unwrap();
        }
        assert!(p.get("x").unwrap().item().abs() < 1e-2);
    }

    #[test]
    fn unknown_param_and_nan_grad_rejected() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("y".to_string(), Tensor::scalar(1.0));
        assert!(matches!(p.step(&grads, 0.1, OptVariant::Adam), Err(TensorError::UnknownParam(_))));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(f64::NAN));
        assert!(matches!(p.step(&grads, 0.1, OptVariant::Adam), Err(TensorError::NonFiniteGrad(_))));
    }

    // === Dual variables ===

    #[test]
    fn dual_update_direction() {
        let mut d = DualVariable::new(1.0, 0.5, 0.1);
        // Divergence above target: multiplier must grow.
        let v1 = d.update(1.5).unwrap();
        assert!(v1 > 1.0);
        // At target: unchanged.
        let before = d.value();
        let v2 = d.update(0.5).unwrap();
        assert_eq!(v2, before);
        // Below target: shrinks, stays positive.
        let v3 = d.update(0.0).unwrap();
        assert!(v3 < v2 && v3 > 0.0);
    }

    #[test]
    fn dual_update_monotone_under_constant_divergence() {
        let mut d = DualVariable::new(0.3, 0.1, 0.05);
        let mut last = d.value();
        for _ in 0..50 {
            let v = d.update(0.4).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn dual_literal_sign_flips_direction() {
        let mut d = DualVariable::new(1.0, 0.5, 0.1);
        d.literal_sign = true;
        let v = d.update(1.5).unwrap();
        assert!(v < 1.0);
    }

    #[test]
    fn dual_rejects_non_finite() {
        let mut d = DualVariable::new(1.0, 0.5, 0.1);
        assert!(d.update(f64::NAN).is_err());
    }
}
