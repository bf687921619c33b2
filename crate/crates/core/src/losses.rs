//! Instance-level and feature-level NT-Xent losses, the normalized
//! entropy regularizer, and their combination.

use crate::autodiff::{nt_xent_op, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower/upper clamp applied to predictions before taking logs.
pub const ENTROPY_CLAMP: f64 = 1e-7;

/// Positive-pair mapping for a stack of two equally sized views:
/// `pos(i) = i + half` for `i < half`, `i - half` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairIndex {
    half: usize,
}

impl PairIndex {
    pub fn new(half: usize) -> Self {
        Self { half }
    }

    pub fn total(&self) -> usize {
        2 * self.half
    }

    pub fn pos(&self, i: usize) -> usize {
        if i < self.half {
            i + self.half
        } else {
            i - self.half
        }
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.total()).map(|i| self.pos(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperatures<T> {
    pub tau_inst: T,
    pub tau_feat: T,
}

impl<T: Scalar> Default for Temperatures<T> {
    fn default() -> Self {
        Self {
            tau_inst: T::of(0.5),
            tau_feat: T::one(),
        }
    }
}

/// Scalar values of every loss term of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_inst: T,
    pub l_feat: T,
    pub l_entropy: T,
    /// Entropy weight actually applied (0 when the entropy term is off).
    pub alpha: T,
    pub l_total: T,
}

/// Which terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub feature: bool,
    pub entropy: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            feature: true,
            entropy: true,
        }
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 2 {
        return Err(Error::dim(op, &sa, &sb));
    }
    Ok(())
}

/// Stacks two `[N, d]` views into `[2N, d]`.
pub fn concat_instance<'t, T: Scalar>(z1: Var<'t, T>, z2: Var<'t, T>) -> Result<(Var<'t, T>, PairIndex)> {
    same_shape("concat_instance", &z1, &z2)?;
    let n = z1.shape()[0];
    Ok((z1.concat_rows(z2)?, PairIndex::new(n)))
}

/// Stacks the transposed `[N, K]` predictions of two views into `[2K, N]`,
/// so row `i` is feature head `i`'s predictions over the batch.
pub fn concat_feature<'t, T: Scalar>(y1: Var<'t, T>, y2: Var<'t, T>) -> Result<(Var<'t, T>, PairIndex)> {
    same_shape("concat_feature", &y1, &y2)?;
    let k = y1.shape()[1];
    Ok((y1.transpose()?.concat_rows(y2.transpose()?)?, PairIndex::new(k)))
}

/// Pairwise cosine similarity of the rows of `[M, D]`.
pub fn cosine_similarity_matrix<'t, T: Scalar>(rows: Var<'t, T>) -> Result<Var<'t, T>> {
    let u = rows.row_l2_normalize()?;
    u.matmul(u.transpose()?)
}

/// Mean over all `M` anchors of
/// `−log( exp(s(i,pos(i))/τ) / Σ_{k≠i} exp(s(i,k)/τ) )`.
pub fn nt_xent<'t, T: Scalar>(sim: Var<'t, T>, pairs: &PairIndex, tau: T) -> Result<Var<'t, T>> {
    if !(tau > T::zero()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    let shape = sim.shape();
    if shape.len() != 2 || shape[0] != pairs.total() || shape[1] != pairs.total() {
        return Err(Error::dim("nt_xent", &shape, &[pairs.total(), pairs.total()]));
    }
    nt_xent_op(sim, &pairs.positives(), tau)
}

/// Mean normalized binary entropy of each row of `[R, N]`, in `[0, 1]`.
pub fn normalized_entropy<'t, T: Scalar>(y_rows: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = y_rows.shape();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::dim("normalized_entropy", &shape, &[]));
    }
    if let Some(v) = y_rows
        .data()
        .iter()
        .find(|&&v| !(v >= T::zero() && v <= T::one()))
    {
        return Err(Error::Domain {
            op: "normalized_entropy",
            msg: format!("prediction {v} outside [0, 1]"),
        });
    }
    let n = shape[1];
    let eps = T::of(ENTROPY_CLAMP);
    let p = y_rows.clamp(eps, T::one() - eps);
    let q = p.neg().shift(T::one());
    let terms = p.mul(p.log()?)?.add(q.mul(q.log()?)?)?;
    let scale = -T::one() / (T::of_usize(n) * T::of(2.0).ln());
    terms.sum(Some(1))?.scale(scale).mean(None)
}

/// Full objective `L_inst + (L_feat − α·L_entropy)` with every term on.
pub fn total_loss<'t, T: Scalar>(
    z1: Var<'t, T>,
    z2: Var<'t, T>,
    y1: Var<'t, T>,
    y2: Var<'t, T>,
    temps: Temperatures<T>,
    alpha: T,
) -> Result<(Var<'t, T>, LossBreakdown<T>)> {
    combined_loss(z1, z2, Some((y1, y2)), temps, alpha, LossTerms::default())
}

/// Objective with ablation switches. Without the feature head only the
/// instance term is used. With the entropy term switched off its value is
/// still reported but the applied `alpha` is zero.
pub fn combined_loss<'t, T: Scalar>(
    z1: Var<'t, T>,
    z2: Var<'t, T>,
    preds: Option<(Var<'t, T>, Var<'t, T>)>,
    temps: Temperatures<T>,
    alpha: T,
    terms: LossTerms,
) -> Result<(Var<'t, T>, LossBreakdown<T>)> {
    let (z, zpairs) = concat_instance(z1, z2)?;
    let inst = nt_xent(cosine_similarity_matrix(z)?, &zpairs, temps.tau_inst)?;
    let l_inst = inst.item()?;
    let preds = match preds {
        Some(p) if terms.feature => p,
        _ => {
            return Ok((
                inst,
                LossBreakdown {
                    l_inst,
                    l_feat: T::zero(),
                    l_entropy: T::zero(),
                    alpha: T::zero(),
                    l_total: l_inst,
                },
            ))
        }
    };
    let (y, ypairs) = concat_feature(preds.0, preds.1)?;
    let feat = nt_xent(cosine_similarity_matrix(y)?, &ypairs, temps.tau_feat)?;
    let ent = normalized_entropy(y)?;
    let applied = if terms.entropy { alpha } else { T::zero() };
    let total = inst.add(feat.sub(ent.scale(applied))?)?;
    let breakdown = LossBreakdown {
        l_inst,
        l_feat: feat.item()?,
        l_entropy: ent.item()?,
        alpha: applied,
        l_total: total.item()?,
    };
    Ok((total, breakdown))
}
