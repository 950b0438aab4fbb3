//! Cross-modal fusion with attentive pooling over outer-product matrices.
//!
//! For a pair (m, n): C = m nᵀ. On the m side, Ĉ = tanh(W C + b), α = softmax(Ĉᵀ u),
//! m̂ = relu(Ŵ (C α) + b̂); the n side does the same on Cᵀ. The pair emits m̂ ⊕ n̂.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Attention hidden size.
    pub k: usize,
    /// Reconstruction size per side.
    pub d_prime: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { k: 50, d_prime: 64 }
    }
}

/// `C[i, j] = m[i] · n[j]`.
pub fn cross_modal_matrix(g: &mut Graph<'_>, m: Var, n: Var) -> Result<Var> {
    let (dm, dn) = (g.shape(m).to_vec(), g.shape(n).to_vec());
    if dm.len() != 1 || dn.len() != 1 {
        return Err(Error::shape("cross_modal_matrix", &dm, &dn));
    }
    let col = g.reshape(m, &[dm[0], 1])?;
    let row = g.reshape(n, &[1, dn[0]])?;
    g.matmul(col, row)
}

#[derive(Clone, Debug)]
pub struct FusionSide {
    pub proj: Linear,
    pub context: ParamId,
    pub recon: Linear,
}

impl FusionSide {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, cfg: FusionConfig, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.w"), d, cfg.k, rng),
            context: store.normal(format!("{name}.u"), &[cfg.k], 0.01, rng),
            recon: Linear::new(store, &format!("{name}.recon"), d, cfg.d_prime, rng),
        }
    }

    /// Pools the columns of `c: [d × e]`; returns the reconstruction `[d']` and `α: [e]`.
    pub fn attentive_pool(&self, g: &mut Graph<'_>, c: Var) -> Result<(Var, Var)> {
        let cols = g.transpose(c)?;
        let hidden = self.proj.forward(g, cols)?;
        let hidden = g.tanh(hidden)?;
        let u = g.param(self.context);
        let scores = g.matmul(hidden, u)?;
        let alpha = g.softmax(scores)?;
        let pooled = g.matmul(c, alpha)?;
        let r = self.recon.forward(g, pooled)?;
        Ok((g.relu(r)?, alpha))
    }
}

#[derive(Clone, Debug)]
pub struct FusionPair {
    pub m: FusionSide,
    pub n: FusionSide,
}

pub struct PairOutput {
    pub u: Var,
    pub m_hat: Var,
    pub n_hat: Var,
    pub alpha_m: Var,
    pub alpha_n: Var,
}

impl FusionPair {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dm: usize, dn: usize, cfg: FusionConfig, rng: &mut R) -> Self {
        Self {
            m: FusionSide::new(store, &format!("{name}.m"), dm, cfg, rng),
            n: FusionSide::new(store, &format!("{name}.n"), dn, cfg, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, m: Var, n: Var) -> Result<PairOutput> {
        let c = cross_modal_matrix(g, m, n)?;
        let (m_hat, alpha_m) = self.m.attentive_pool(g, c)?;
        let ct = g.transpose(c)?;
        let (n_hat, alpha_n) = self.n.attentive_pool(g, ct)?;
        let u = g.concat(&[m_hat, n_hat], 0)?;
        Ok(PairOutput {
            u,
            m_hat,
            n_hat,
            alpha_m,
            alpha_n,
        })
    }
}

/// Independent parameters for the (t, v), (t, a) and (a, v) pairs.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub tv: FusionPair,
    pub ta: FusionPair,
    pub av: FusionPair,
}

pub struct Unified {
    /// `u_tv ⊕ u_ta ⊕ u_av`
    pub u: Var,
    pub tv: PairOutput,
    pub ta: PairOutput,
    pub av: PairOutput,
}

impl Unified {
    pub fn attentions(&self) -> [Var; 6] {
        [
            self.tv.alpha_m,
            self.tv.alpha_n,
            self.ta.alpha_m,
            self.ta.alpha_n,
            self.av.alpha_m,
            self.av.alpha_n,
        ]
    }
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        config: FusionConfig,
        rng: &mut R,
    ) -> Self {
        let (dt, da, dv) = dims;
        Self {
            config,
            tv: FusionPair::new(store, &format!("{name}.tv"), dt, dv, config, rng),
            ta: FusionPair::new(store, &format!("{name}.ta"), dt, da, config, rng),
            av: FusionPair::new(store, &format!("{name}.av"), da, dv, config, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        6 * self.config.d_prime
    }

    pub fn fuse_all(&self, g: &mut Graph<'_>, t: Var, a: Var, v: Var) -> Result<Unified> {
        let tv = self.tv.forward(g, t, v)?;
        let ta = self.ta.forward(g, t, a)?;
        let av = self.av.forward(g, a, v)?;
        let u = g.concat(&[tv.u, ta.u, av.u], 0)?;
        Ok(Unified { u, tv, ta, av })
    }
}
