//! Context and target mask sampling.
//!
//! A mask bit of `true` means the feature is masked (dropped). Targets are
//! sampled first; contexts are then drawn only from features that no target
//! keeps visible, so a context never sees a feature it has to predict.
//! Register tokens live outside the `d`-feature mask domain and are never
//! masked.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedSample;
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    /// The null mask `0_d`: every feature visible.
    pub fn null(d: usize) -> Self {
        Mask { bits: vec![false; d] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Mask { bits }
    }

    pub fn from_visible(d: usize, visible: &[usize]) -> Self {
        let mut bits = vec![true; d];
        for &j in visible {
            bits[j] = false;
        }
        Mask { bits }
    }

    pub fn d(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_masked(&self, j: usize) -> bool {
        self.bits[j]
    }

    /// `l_m = d - ‖m‖₁`.
    pub fn visible_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Visible feature indices in ascending order.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| !self.bits[j]).collect()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// `[min, max]` share of the `d` features kept visible by a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShareBounds {
    pub min: f64,
    pub max: f64,
}

impl ShareBounds {
    pub fn new(min: f64, max: f64) -> Self {
        ShareBounds { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v < 1.0;
        if !ok(self.min) || !ok(self.max) {
            return Err(Error::Config(format!(
                "{what} share bounds [{}, {}] must lie in (0, 1)",
                self.min, self.max
            )));
        }
        if self.min > self.max {
            return Err(Error::Config(format!(
                "{what} share bounds: min {} > max {}",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

/// `clamp(round(share·d), 1, max)`.
pub fn share_count(share: f64, d: usize, max: usize) -> usize {
    ((share * d as f64).round() as usize).clamp(1, max.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub context: Vec<Mask>,
    pub target: Vec<Mask>,
    /// Word position of the sampler's stream before this set was drawn.
    pub rng_word_pos: u128,
}

impl MaskSet {
    /// Features visible in at least one target mask.
    pub fn target_pool(&self) -> Vec<usize> {
        let d = self.target.first().map_or(0, Mask::d);
        (0..d)
            .filter(|&j| self.target.iter().any(|m| !m.is_masked(j)))
            .collect()
    }
}

/// Checks that targets and contexts can always be drawn for `d` features.
pub fn check_feasible(d: usize, ctx: ShareBounds, tgt: ShareBounds) -> Result<()> {
    if d < 2 {
        return Err(Error::Config(format!("masking needs d >= 2 features, got {d}")));
    }
    ctx.validate("context")?;
    tgt.validate("target")?;
    let max_target = share_count(tgt.max, d, d - 1);
    let min_context = share_count(ctx.min, d, d - 1);
    if max_target + min_context > d {
        return Err(Error::Config(format!(
            "infeasible masks: max target visible count {max_target} + min context visible count {min_context} > d = {d}"
        )));
    }
    Ok(())
}

pub fn sample_mask_set(
    d: usize,
    n_context: usize,
    n_target: usize,
    ctx: ShareBounds,
    tgt: ShareBounds,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSet> {
    check_feasible(d, ctx, tgt)?;
    if n_context == 0 || n_target == 0 {
        return Err(Error::Config("need at least one context and one target mask".into()));
    }
    let rng_word_pos = rng.get_word_pos();
    let draw = |b: ShareBounds, rng: &mut ChaCha8Rng| b.min + (b.max - b.min) * rng.random::<f64>();

    // Reserve the minimum context budget first so the union of target pools
    // can never swallow every feature.
    let min_context = share_count(ctx.min, d, d - 1);
    let reserved = sample(rng, d, min_context).into_vec();
    let open: Vec<usize> = (0..d).filter(|j| !reserved.contains(j)).collect();

    let mut target = Vec::with_capacity(n_target);
    for _ in 0..n_target {
        let k = share_count(draw(tgt, rng), d, d - 1);
        debug_assert!(k <= open.len());
        let picks = sample(rng, open.len(), k);
        let visible: Vec<usize> = picks.iter().map(|i| open[i]).collect();
        target.push(Mask::from_visible(d, &visible));
    }

    let free: Vec<usize> = (0..d)
        .filter(|&j| target.iter().all(|m| m.is_masked(j)))
        .collect();
    let mut context = Vec::with_capacity(n_context);
    for _ in 0..n_context {
        let k = share_count(draw(ctx, rng), d, free.len());
        let picks = sample(rng, free.len(), k);
        let visible: Vec<usize> = picks.iter().map(|i| free[i]).collect();
        context.push(Mask::from_visible(d, &visible));
    }

    Ok(MaskSet {
        context,
        target,
        rng_word_pos,
    })
}

/// Drops masked features, keeping `(original index, E(x_j))` pairs in order.
pub fn apply_context_mask<'a, T: Real>(
    encoded: &'a EncodedSample<T>,
    m: &Mask,
) -> Result<Vec<(usize, &'a [T])>> {
    if encoded.d() != m.d() {
        return Err(Error::dim(format!(
            "sample has {} features, mask {}",
            encoded.d(),
            m.d()
        )));
    }
    Ok(m.visible()
        .into_iter()
        .map(|j| (j, encoded.features[j].as_slice()))
        .collect())
}

/// Keeps the rows of `h_target[d×h]` whose features are unmasked.
pub fn apply_target_mask<T: Real>(h_target: &Tensor<T>, m: &Mask) -> Result<Tensor<T>> {
    if h_target.rows() != m.d() {
        return Err(Error::dim(format!(
            "target representation has {} rows, mask covers {}",
            h_target.rows(),
            m.d()
        )));
    }
    h_target.select_rows(&m.visible())
}
