use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Real, Var};

/// How each (context, target) block's squared error is scaled before the
/// double average over mask pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalization {
    /// Sum of squared entries over the whole `l×h` block.
    #[default]
    Sum,
    /// Same, divided by `l·h`.
    MeanElements,
}

/// `(1/|M_target|)(1/|M_context|) Σ_m Σ_{m_k} ‖pred − target‖²`.
///
/// `preds` and `targets` are ordered context-major: entry `c·n_target + k`
/// pairs context mask `c` with target mask `k`.
pub fn tjepa_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &[Var],
    targets: &[Var],
    n_context: usize,
    n_target: usize,
    norm: LossNormalization,
) -> Result<Var> {
    let pairs = n_context * n_target;
    if pairs == 0 {
        return Err(Error::Config("loss needs at least one context and one target mask".into()));
    }
    if preds.len() != pairs || targets.len() != pairs {
        return Err(Error::dim(format!(
            "expected {pairs} prediction/target pairs, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(pairs);
    for (i, (&p, &t)) in preds.iter().zip(targets).enumerate() {
        if g.shape(p) != g.shape(t) {
            return Err(Error::dim(format!(
                "pair {i}: prediction {:?} vs target {:?}",
                g.shape(p),
                g.shape(t)
            )));
        }
        let diff = g.sub(p, t)?;
        let sq = g.sum_sq(diff);
        terms.push(match norm {
            LossNormalization::Sum => sq,
            LossNormalization::MeanElements => {
                let n = g.value(p).numel();
                g.scale(sq, T::one() / T::of(n as f64))
            }
        });
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, T::one() / T::of(pairs as f64)))
}
