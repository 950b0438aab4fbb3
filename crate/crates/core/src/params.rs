//! Trainable parameters and batch-norm running statistics.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::tensor::Tensor;

/// Batch-norm running statistic momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters still receive gradients but the optimizer skips them.
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct RunningStats {
    pub name: String,
    pub channels: usize,
    pub mean: Option<Vec<f64>>,
    pub var: Option<Vec<f64>>,
}

/// Statistics observed by a train-mode batch-norm forward, applied after the pass.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub norm: NormId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    norms: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialization; fan sizes follow the conv/linear weight layout.
    pub fn glorot<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut R) -> ParamId {
        let (fan_in, fan_out) = fans(shape);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -limit, limit, rng))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn normal<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        self.add(name, Tensor::normal(shape, std, rng))
    }

    pub fn add_norm(&mut self, name: impl Into<String>, channels: usize) -> NormId {
        self.norms.push(RunningStats {
            name: name.into(),
            channels,
            mean: None,
            var: None,
        });
        NormId(self.norms.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn norm(&self, id: NormId) -> &RunningStats {
        &self.norms[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn norms(&self) -> &[RunningStats] {
        &self.norms
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds the parameter gradients of one backward sweep into the stored buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.param_grads() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate]) {
        for u in updates {
            let stats = &mut self.norms[u.norm.0];
            match (&mut stats.mean, &mut stats.var) {
                (Some(mean), Some(var)) => {
                    for c in 0..stats.channels {
                        mean[c] = BN_MOMENTUM * mean[c] + (1.0 - BN_MOMENTUM) * u.mean[c];
                        var[c] = BN_MOMENTUM * var[c] + (1.0 - BN_MOMENTUM) * u.var[c];
                    }
                }
                _ => {
                    stats.mean = Some(u.mean.clone());
                    stats.var = Some(u.var.clone());
                }
            }
        }
    }

    /// Every stored tensor by name: parameters, then populated running statistics.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for n in &self.norms {
            if let (Some(m), Some(v)) = (&n.mean, &n.var) {
                out.push((format!("{}.running_mean", n.name), Tensor::vector(m.clone())));
                out.push((format!("{}.running_var", n.name), Tensor::vector(v.clone())));
            }
        }
        out
    }

    /// Loads values by name into an already-constructed store of the same architecture.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for p in &mut self.params {
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value = t;
            p.grad.fill(0.0);
        }
        for n in &mut self.norms {
            let m = by_name.remove(&format!("{}.running_mean", n.name));
            let v = by_name.remove(&format!("{}.running_var", n.name));
            match (m, v) {
                (Some(m), Some(v)) if m.numel() == n.channels && v.numel() == n.channels => {
                    n.mean = Some(m.into_data());
                    n.var = Some(v.into_data());
                }
                (None, None) => {
                    n.mean = None;
                    n.var = None;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "checkpoint running statistics for {} are incomplete",
                        n.name
                    )))
                }
            }
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::Config(format!("checkpoint has unknown tensor {name}")));
        }
        Ok(())
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, *n),
        [out, inp] => (*inp, *out),
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.glorot("w", &[20, 30], &mut rng);
        let limit = (6.0f64 / 50.0).sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn running_stats_first_update_copies_then_blends() {
        let mut store = ParamStore::new();
        let n = store.add_norm("bn", 1);
        store.apply_norm_updates(&[NormUpdate { norm: n, mean: vec![2.0], var: vec![4.0] }]);
        assert_eq!(store.norm(n).mean.as_deref(), Some(&[2.0][..]));
        store.apply_norm_updates(&[NormUpdate { norm: n, mean: vec![12.0], var: vec![4.0] }]);
        assert!((store.norm(n).mean.as_ref().unwrap()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn named_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::new();
        a.glorot("w", &[2, 3], &mut rng);
        let n = a.add_norm("bn", 2);
        a.apply_norm_updates(&[NormUpdate { norm: n, mean: vec![1.0, 2.0], var: vec![3.0, 4.0] }]);
        let mut b = ParamStore::new();
        b.zeros("w", &[2, 3]);
        b.add_norm("bn", 2);
        b.load_named(a.named_tensors()).unwrap();
        assert_eq!(a.named_tensors(), b.named_tensors());
    }
}
