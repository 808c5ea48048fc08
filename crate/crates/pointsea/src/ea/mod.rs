//! The five essential associations between a center node and a neighbor
//! node, their softmax-relaxed mixture, and the epsilon-greedy selector.
//!
//! Everything here operates on batched pair rows: tensors of shape `[P, d]`
//! where row `p` is one (center, neighbor) pair and the accompanying
//! [`SegmentOrder`] groups the `k` rows of each center.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{SegmentOrder, Tape, Tensor, TensorError};

/// The association primitives, in canonical order.
///
/// For pair inputs `a` (toward the center) and `b` (toward the neighbor):
/// e1 = a, e2 = b, e3 = a - b, e4 = ‖a - b‖ replicated across the feature
/// dimension, e5 = a minus the centroid of b over the center's k
/// neighborhood rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EAKind {
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl EAKind {
    pub const ALL: [EAKind; 5] = [EAKind::E1, EAKind::E2, EAKind::E3, EAKind::E4, EAKind::E5];

    pub fn name(self) -> &'static str {
        match self {
            EAKind::E1 => "e1",
            EAKind::E2 => "e2",
            EAKind::E3 => "e3",
            EAKind::E4 => "e4",
            EAKind::E5 => "e5",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EAKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EAKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EAKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown association {s:?}"))
    }
}

/// Parses a comma-separated subset like "e1,e3", deduplicated and kept in
/// canonical order.
pub fn parse_subset(s: &str) -> Result<Vec<EAKind>, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let k: EAKind = part.trim().parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err("empty association subset".into());
    }
    Ok(out)
}

/// One association on batched pair rows.  e1/e2 return the input handle
/// unchanged, so selecting them adds no tape work.
pub fn eval_ea<'t>(
    kind: EAKind,
    a: Tensor<'t>,
    b: Tensor<'t>,
    order: &Rc<SegmentOrder>,
) -> Result<Tensor<'t>, TensorError> {
    match kind {
        EAKind::E1 => Ok(a),
        EAKind::E2 => Ok(b),
        EAKind::E3 => a.sub(b),
        EAKind::E4 => a.sub(b)?.row_norm_bcast(),
        EAKind::E5 => a.sub(b.seg_mean_rows(order)?),
    }
}

/// How a mixture slot is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotSelect {
    /// Softmax-weighted sum over the allowed candidates; differentiable in
    /// the slot's logits.
    Relaxed,
    /// A single candidate, evaluated directly.  Sampled and discretized
    /// forwards share this path, so they agree bitwise by construction.
    Fixed(EAKind),
}

/// The mixture edge over `subset`.  `beta` is one logit per subset entry
/// (ignored when `select` is fixed).
pub fn mixed_edge<'t>(
    tape: &'t Tape,
    beta: Tensor<'t>,
    subset: &[EAKind],
    select: SlotSelect,
    a: Tensor<'t>,
    b: Tensor<'t>,
    order: &Rc<SegmentOrder>,
) -> Result<Tensor<'t>, TensorError> {
    debug_assert!(!subset.is_empty());
    match select {
        SlotSelect::Fixed(kind) => {
            debug_assert!(subset.contains(&kind), "selected {kind} outside subset");
            eval_ea(kind, a, b, order)
        }
        SlotSelect::Relaxed => {
            let weights = beta.softmax()?;
            // e3 and e4 share one subtraction when both are candidates.
            let need_diff = subset.iter().any(|k| matches!(k, EAKind::E3 | EAKind::E4));
            let diff = if need_diff { Some(a.sub(b)?) } else { None };
            let mut outs = Vec::with_capacity(subset.len());
            for &kind in subset {
                outs.push(match kind {
                    EAKind::E3 => diff.unwrap(),
                    EAKind::E4 => diff.unwrap().row_norm_bcast()?,
                    other => eval_ea(other, a, b, order)?,
                });
            }
            tape.weighted_sum(weights, &outs)
        }
    }
}

/// First maximum, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Epsilon-greedy draw over `beta.len()` candidates: explore uniformly with
/// probability ε, otherwise exploit the argmax.  Never mutates `beta`.
pub fn sample_epsilon_greedy(beta: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..beta.len())
    } else {
        argmax(beta)
    }
}
