//! Named, role-tagged parameters and the SGD optimizer.

use std::collections::BTreeMap;
use std::sync::Arc;

use cdkd_autograd::{DiffTensor, Tape};
use rand::Rng;

use crate::error::{CoreError, Result};

/// Which part of the system a parameter belongs to. Only `Backbone` and
/// `Head` are needed at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Backbone,
    Head,
    Sape,
    Etht,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Backbone, Role::Head, Role::Sape, Role::Etht];
    pub const INFERENCE: [Role; 2] = [Role::Backbone, Role::Head];

    pub fn code(self) -> u8 {
        match self {
            Role::Backbone => 0,
            Role::Head => 1,
            Role::Sape => 2,
            Role::Etht => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::Head => "head",
            Role::Sape => "sape",
            Role::Etht => "etht",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub role: Role,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub grad: Option<Vec<f64>>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Parameters keyed by path. Iteration order is lexicographic, which fixes
/// the order of initialization-independent passes (optimizer, checkpoints).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, role: Role, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != values.len() || shape.is_empty() {
            return Err(CoreError::Shape(format!(
                "parameter `{name}` shape {shape:?} with {} values",
                values.len()
            )));
        }
        if self.params.contains_key(name) {
            return Err(CoreError::DuplicateParam(name.to_string()));
        }
        self.params.insert(
            name.to_string(),
            Param {
                role,
                shape: shape.to_vec(),
                value: Arc::new(values),
                grad: None,
            },
        );
        Ok(())
    }

    /// Inserts a Glorot-uniform weight (`±sqrt(6 / (fan_in + fan_out))`).
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        role: Role,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, role, shape, values)
    }

    pub fn insert_zeros(&mut self, name: &str, role: Role, shape: &[usize]) -> Result<()> {
        self.insert(name, role, shape, vec![0.0; shape.iter().product()])
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))?;
        if values.len() != p.numel() {
            return Err(CoreError::Shape(format!(
                "`{name}` holds {} values, got {}",
                p.numel(),
                values.len()
            )));
        }
        p.value = Arc::new(values);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Copy restricted to the given roles.
    pub fn with_roles(&self, roles: &[Role]) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(_, p)| roles.contains(&p.role))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Registers every parameter as a leaf on `tape`. Frozen sets bind as
    /// constants so no gradient is ever recorded for them.
    pub fn bind(&self, tape: &Tape) -> Result<Bound> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.params {
            let t = tape.leaf_shared(&p.shape, p.value.clone(), !self.frozen)?;
            map.insert(name.clone(), t);
        }
        Ok(Bound { map })
    }

    /// Adds the gradients held by `bound` into each parameter. Parameters
    /// the loss never reached keep no gradient.
    pub fn accumulate_grads(&mut self, bound: &Bound) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        for (name, p) in self.params.iter_mut() {
            let t = bound
                .map
                .get(name)
                .ok_or_else(|| CoreError::MissingParam(name.clone()))?;
            let Some(g) = t.take_grad() else {
                continue;
            };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }
}

/// Parameters of a [`ParamSet`] registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    map: BTreeMap<String, DiffTensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&DiffTensor> {
        self.map
            .get(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }
}

/// Exact scalar parameter count over the listed roles.
pub fn count_params(params: &ParamSet, roles: &[Role]) -> usize {
    params
        .iter()
        .filter(|(_, p)| roles.contains(&p.role))
        .map(|(_, p)| p.numel())
        .sum()
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(CoreError::Config(format!(
                "learning rate must be positive and momentum in [0, 1), got {lr}, {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// Momentum SGD on every trainable parameter except the `Etht` role, which
/// is updated by [`crate::etht::etht_step`]:
/// `v ← μ·v + g`, `θ ← θ − η·v`. Gradients are left for the caller to zero.
pub fn sgd_step(params: &mut ParamSet, opt: &mut OptimState) -> Result<()> {
    if params.is_frozen() {
        return Ok(());
    }
    for (name, p) in params.params_mut() {
        if p.role == Role::Etht {
            continue;
        }
        let g = p
            .grad
            .as_ref()
            .ok_or_else(|| CoreError::MissingGradient(name.clone()))?;
        let v = opt
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let value = Arc::make_mut(&mut p.value);
        for ((theta, vi), gi) in value.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = opt.momentum * *vi + gi;
            *theta -= opt.lr * *vi;
        }
    }
    opt.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Role::Backbone, &[1], vec![value]).unwrap();
        ps.params.get_mut("w").unwrap().grad = Some(vec![grad]);
        ps
    }

    #[test]
    fn one_plain_step() {
        let mut ps = single(1.0, 2.0);
        let mut opt = OptimState::new(0.1, 0.0).unwrap();
        sgd_step(&mut ps, &mut opt).unwrap();
        assert!((ps.get("w").unwrap().value[0] - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
        // gradients are untouched
        assert_eq!(ps.get("w").unwrap().grad, Some(vec![2.0]));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = single(1.5, 0.0);
        let mut opt = OptimState::new(0.1, 0.9).unwrap();
        sgd_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.get("w").unwrap().value[0], 1.5);
    }

    #[test]
    fn frozen_set_never_moves() {
        let mut ps = single(1.0, 5.0);
        ps.freeze();
        let mut opt = OptimState::new(0.1, 0.9).unwrap();
        sgd_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.get("w").unwrap().value[0], 1.0);

        let tape = Tape::new();
        let bound = ps.bind(&tape).unwrap();
        assert!(!bound.get("w").unwrap().requires_grad());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut ps = ParamSet::new();
        ps.insert("w", Role::Head, &[2], vec![1.0, 2.0]).unwrap();
        let mut opt = OptimState::new(0.1, 0.0).unwrap();
        assert!(matches!(sgd_step(&mut ps, &mut opt), Err(CoreError::MissingGradient(_))));
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = single(0.0, 1.0);
        let mut opt = OptimState::new(0.5, 0.9).unwrap();
        sgd_step(&mut ps, &mut opt).unwrap();
        sgd_step(&mut ps, &mut opt).unwrap();
        // v1 = 1, v2 = 1.9; θ = −0.5·(1 + 1.9)
        assert!((ps.get("w").unwrap().value[0] + 1.45).abs() < 1e-15);
    }

    #[test]
    fn descent_on_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("w", Role::Backbone, &[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut opt = OptimState::new(1e-3, 0.9).unwrap();
        let loss = |ps: &mut ParamSet| {
            let tape = Tape::new();
            let b = ps.bind(&tape).unwrap();
            let w = b.get("w").unwrap();
            let l = w.mul(w).unwrap().sum().unwrap();
            l.backprop().unwrap();
            ps.zero_grad();
            ps.accumulate_grads(&b).unwrap();
            l.item().unwrap()
        };
        let before = loss(&mut ps);
        sgd_step(&mut ps, &mut opt).unwrap();
        let after = loss(&mut ps);
        assert!(after < before);
    }

    #[test]
    fn counts_by_role() {
        let mut ps = ParamSet::new();
        assert_eq!(count_params(&ps, &Role::ALL), 0);
        ps.insert_zeros("conv.weight", Role::Backbone, &[8, 1, 3, 3]).unwrap();
        ps.insert_zeros("conv.bias", Role::Backbone, &[8]).unwrap();
        ps.insert_zeros("sape.x", Role::Sape, &[4]).unwrap();
        assert_eq!(count_params(&ps, &[Role::Backbone]), 80);
        assert_eq!(count_params(&ps, &Role::INFERENCE), 80);
        assert_eq!(count_params(&ps, &Role::ALL), 84);
        assert!(ps.insert_zeros("sape.x", Role::Sape, &[1]).is_err());
    }
}
