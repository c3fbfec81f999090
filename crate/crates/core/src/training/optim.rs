use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamStore};
use crate::numeric::{Graph, Real};

/// Per-parameter gradient buffers indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(n_params: usize) -> Self {
        Gradients {
            slots: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0)?.as_deref()
    }

    pub fn set(&mut self, id: ParamId, g: Vec<T>) {
        self.slots[id.0] = Some(g);
    }

    fn add_slot(&mut self, i: usize, g: &[T]) {
        match &mut self.slots[i] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot => *slot = Some(g.to_vec()),
        }
    }

    /// Adds every parameter gradient accumulated in `g`.
    pub fn accumulate_graph(&mut self, g: &Graph<T>) {
        for (i, grad) in g.param_grads() {
            self.add_slot(i, grad);
        }
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (i, s) in other.slots.iter().enumerate() {
            if let Some(g) = s {
                self.add_slot(i, g);
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slots.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// Ids that received a gradient.
    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.slots.len())
            .filter(|&i| self.slots[i].is_some())
            .map(ParamId)
            .collect()
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter().map(|x| x.f64() * x.f64()))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments. Moments
/// are kept in `f64` regardless of the parameter type.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    skipped: u64,
}

impl AdamW {
    /// Optimizer over the parameters `ids` of `store`.
    pub fn new<T: Real>(config: AdamWConfig, store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        AdamW {
            config,
            ids: ids.to_vec(),
            m: ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect(),
            v: ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect(),
            step: 0,
            skipped: 0,
        }
    }

    /// Number of applied updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of updates skipped on non-finite gradients.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn first_moment(&self, k: usize) -> &[f64] {
        &self.m[k]
    }

    pub fn second_moment(&self, k: usize) -> &[f64] {
        &self.v[k]
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns `false` (and counts a skip) when any gradient is non-finite.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<bool> {
        for (k, &id) in self.ids.iter().enumerate() {
            if let Some(g) = grads.get(id) {
                if g.len() != self.m[k].len() || store.get(id).numel() != g.len() {
                    return Err(Error::dim(format!(
                        "{}: gradient has {} entries, parameter {}",
                        store.name(id),
                        g.len(),
                        store.get(id).numel()
                    )));
                }
            }
        }
        if !grads.is_finite() {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i].f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut x = p[i].f64() * (1.0 - lr * weight_decay);
                x -= lr * mhat / (vhat.sqrt() + eps);
                p[i] = T::of(x);
            }
        }
        Ok(true)
    }
}

/// `θ̄ ← m·θ̄ + (1−m)·θ` over `(target, context)` pairs, evaluated in `f64`.
pub fn ema_update<T: Real>(store: &mut ParamStore<T>, pairs: &[(ParamId, ParamId)], momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} must lie in [0, 1]")));
    }
    for &(t, c) in pairs {
        if store.get(t).shape() != store.get(c).shape() {
            return Err(Error::dim(format!(
                "EMA pair {} {:?} vs {} {:?}",
                store.name(t),
                store.get(t).shape(),
                store.name(c),
                store.get(c).shape()
            )));
        }
        let src: Vec<f64> = store.get(c).data().iter().map(|x| x.f64()).collect();
        for (dst, s) in store.get_mut(t).data_mut().iter_mut().zip(src) {
            *dst = T::of(ema_scalar(dst.f64(), s, momentum));
        }
    }
    Ok(())
}

/// One EMA coordinate, the exact expression used by [`ema_update`].
pub fn ema_scalar(target: f64, context: f64, momentum: f64) -> f64 {
    momentum * target + (1.0 - momentum) * context
}
