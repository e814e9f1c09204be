//! Budget constraints on soft masks and the barrier-augmented objective.
//!
//! Each constraint is `f = (Σ soft-mask − budget) / n ≤ 0`, where `n` is the
//! largest possible violation. Normalizing this way maps a fully saturated
//! mask to `f = 1`, so `b(f) = exp(10·(f − 0.5)) + α·f` stays below `e^5`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dilation::{MaskKind, MaskParams, MaskVars};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Row vector of a separable mask.
    Rows,
    /// Column vector of a separable mask.
    Cols,
    /// Whole matrix of a general mask.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRef {
    pub layer: usize,
    pub channel: usize,
    pub axis: Axis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub target: MaskRef,
    pub budget: f64,
    pub normalizer: f64,
    /// Barrier slope, in `[-0.1, 0.1]`.
    pub alpha: f64,
}

pub const ALPHA_RANGE: (f64, f64) = (-0.1, 0.1);

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&alpha) {
        return Err(Error::invalid(format!(
            "barrier slope alpha must lie in [-0.1, 0.1], got {alpha}"
        )));
    }
    Ok(())
}

impl ConstraintSpec {
    pub fn new(target: MaskRef, budget: f64, normalizer: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(normalizer > 0.0) {
            return Err(Error::invalid("constraint normalizer must be positive"));
        }
        Ok(ConstraintSpec {
            target,
            budget,
            normalizer,
            alpha,
        })
    }
}

/// Builds one constraint per trainable mask axis.
///
/// Axes whose budget equals the field size cannot be violated; they are
/// dropped and described in the returned notices. With `normalize` off the
/// raw violation is used (`n = 1`).
pub fn constraints_for(
    masks: &[Vec<MaskParams>],
    alpha: f64,
    normalize: bool,
) -> Result<(Vec<ConstraintSpec>, Vec<String>)> {
    check_alpha(alpha)?;
    let mut specs = Vec::new();
    let mut notices = Vec::new();
    for (layer, channels) in masks.iter().enumerate() {
        for (channel, mask) in channels.iter().enumerate() {
            let axes: Vec<(Axis, usize, usize)> = match mask.kind {
                MaskKind::Fixed { .. } => vec![],
                MaskKind::Separable { .. } => vec![
                    (Axis::Rows, mask.field[0], mask.budget[0]),
                    (Axis::Cols, mask.field[1], mask.budget[1]),
                ],
                MaskKind::General { .. } => vec![(
                    Axis::Full,
                    mask.field[0] * mask.field[1],
                    mask.budget[0] * mask.budget[1],
                )],
            };
            for (axis, size, budget) in axes {
                let target = MaskRef {
                    layer,
                    channel,
                    axis,
                };
                if size == budget {
                    notices.push(format!(
                        "layer {layer} channel {channel} {axis:?}: budget equals field size {size}, constraint dropped"
                    ));
                    continue;
                }
                let n = if normalize {
                    (size - budget) as f64
                } else {
                    1.0
                };
                specs.push(ConstraintSpec::new(target, budget as f64, n, alpha)?);
            }
        }
    }
    Ok((specs, notices))
}

fn lookup<'a, T>(table: &'a [Vec<T>], target: &MaskRef) -> Result<&'a T> {
    table
        .get(target.layer)
        .and_then(|l| l.get(target.channel))
        .ok_or_else(|| {
            Error::invalid(format!(
                "constraint references missing mask layer {} channel {}",
                target.layer, target.channel
            ))
        })
}

fn axis_mismatch(target: &MaskRef) -> Error {
    Error::invalid(format!(
        "constraint axis {:?} does not exist on mask layer {} channel {}",
        target.axis, target.layer, target.channel
    ))
}

/// Normalized constraint value `f` of one mask, recorded on the tape.
pub fn constraint_value(tape: &mut Tape, mask: &MaskVars, spec: &ConstraintSpec) -> Result<Var> {
    let logits = match (mask, spec.target.axis) {
        (MaskVars::Separable { rows, .. }, Axis::Rows) => *rows,
        (MaskVars::Separable { cols, .. }, Axis::Cols) => *cols,
        (MaskVars::General(m), Axis::Full) => *m,
        _ => return Err(axis_mismatch(&spec.target)),
    };
    let s = tape.sigmoid(logits);
    let mass = tape.sum(s);
    let excess = tape.add_scalar(mass, -spec.budget);
    Ok(tape.scalar_mul(excess, 1.0 / spec.normalizer))
}

/// Plain evaluation of [`constraint_value`] for reporting.
pub fn constraint_value_of(mask: &MaskParams, spec: &ConstraintSpec) -> Result<f64> {
    let logits = match (&mask.kind, spec.target.axis) {
        (MaskKind::Separable { rows, .. }, Axis::Rows) => rows,
        (MaskKind::Separable { cols, .. }, Axis::Cols) => cols,
        (MaskKind::General { logits }, Axis::Full) => logits,
        _ => return Err(axis_mismatch(&spec.target)),
    };
    Ok((logits.sigmoid().sum() - spec.budget) / spec.normalizer)
}

/// `exp(10·(x − 0.5)) + α·x`.
pub fn barrier(x: f64, alpha: f64) -> f64 {
    (10.0 * (x - 0.5)).exp() + alpha * x
}

pub fn barrier_derivative(x: f64, alpha: f64) -> f64 {
    10.0 * (10.0 * (x - 0.5)).exp() + alpha
}

/// [`barrier`] on a scalar tape value.
pub fn barrier_var(tape: &mut Tape, x: Var, alpha: f64) -> Var {
    let shifted = tape.add_scalar(x, -0.5);
    let scaled = tape.scalar_mul(shifted, 10.0);
    let e = tape.exp(scaled);
    let slope = tape.scalar_mul(x, alpha);
    tape.add(e, slope).expect("scalar shapes")
}

/// `Σ_i b(f_i)` over every constraint.
pub fn barrier_loss(
    tape: &mut Tape,
    constraints: &[ConstraintSpec],
    masks: &[Vec<MaskVars>],
) -> Result<Var> {
    if constraints.is_empty() {
        return Err(Error::invalid(
            "barrier loss over an empty constraint set; omit the term instead",
        ));
    }
    let mut total: Option<Var> = None;
    for spec in constraints {
        let mask = lookup(masks, &spec.target)?;
        let f = constraint_value(tape, mask, spec)?;
        let b = barrier_var(tape, f, spec.alpha);
        total = Some(match total {
            None => b,
            Some(t) => tape.add(t, b)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Plain evaluation of [`barrier_loss`], returning `(L_c, f values)`.
pub fn barrier_loss_of(
    constraints: &[ConstraintSpec],
    masks: &[Vec<MaskParams>],
) -> Result<(f64, Vec<f64>)> {
    let mut total = 0.0;
    let mut values = Vec::with_capacity(constraints.len());
    for spec in constraints {
        let f = constraint_value_of(lookup(masks, &spec.target)?, spec)?;
        total += barrier(f, spec.alpha);
        values.push(f);
    }
    Ok((total, values))
}

pub fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid(format!(
            "barrier weight mu must be > 0 in L = L_s + mu * L_c, got {mu}"
        )));
    }
    Ok(())
}

/// `L = L_s + μ·L_c`.
pub fn total_loss(tape: &mut Tape, task: Var, barrier: Var, mu: f64) -> Result<Var> {
    check_mu(mu)?;
    let weighted = tape.scalar_mul(barrier, mu);
    tape.add(task, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sep(logit: f64) -> MaskParams {
        MaskParams::separable(
            [5, 5],
            [3, 3],
            Tensor::full(&[5], logit),
            Tensor::full(&[5], logit),
        )
        .unwrap()
    }

    fn spec(axis: Axis, budget: f64, n: f64, alpha: f64) -> ConstraintSpec {
        ConstraintSpec::new(
            MaskRef {
                layer: 0,
                channel: 0,
                axis,
            },
            budget,
            n,
            alpha,
        )
        .unwrap()
    }

    #[test]
    fn constraint_values() {
        let s = spec(Axis::Rows, 3.0, 2.0, 0.0);
        let off = constraint_value_of(&sep(-60.0), &s).unwrap();
        assert!((off - (-1.5)).abs() < 1e-12);
        assert_eq!(constraint_value_of(&sep(0.0), &s).unwrap(), -0.25);

        let g = MaskParams::general([3, 3], Tensor::full(&[5, 5], 60.0)).unwrap();
        let s = spec(Axis::Full, 9.0, 16.0, 0.0);
        assert!((constraint_value_of(&g, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn barrier_values() {
        assert_eq!(barrier(0.5, 0.0), 1.0);
        assert!((barrier(0.0, 0.1) - (-5f64).exp()).abs() < 1e-15);
        assert!((barrier(1.0, -0.1) - (5f64.exp() - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn barrier_loss_sums_terms() {
        let masks = vec![vec![sep(0.0)]];
        let mut tape = Tape::new();
        let mv: Vec<Vec<MaskVars>> = masks
            .iter()
            .map(|l| l.iter().map(|m| m.bind(&mut tape)).collect())
            .collect();
        let s = spec(Axis::Rows, 3.0, 2.0, 0.0);
        let one = barrier_loss(&mut tape, std::slice::from_ref(&s), &mv).unwrap();
        let two = barrier_loss(&mut tape, &[s.clone(), s.clone()], &mv).unwrap();
        let v1 = tape.value(one).item();
        assert!((tape.value(two).item() - 2.0 * v1).abs() < 1e-15);
        assert!((v1 - barrier(-0.25, 0.0)).abs() < 1e-15);
        assert_eq!(barrier_loss_of(&[s], &masks).unwrap().0, v1);
    }

    #[test]
    fn barrier_loss_errors() {
        let mut tape = Tape::new();
        assert!(barrier_loss(&mut tape, &[], &[]).is_err());
        let s = spec(Axis::Rows, 3.0, 2.0, 0.0);
        assert!(barrier_loss(&mut tape, &[s], &[]).is_err());
        let g = MaskParams::general([1, 1], Tensor::zeros(&[2, 2])).unwrap();
        let mv = vec![vec![g.bind(&mut tape)]];
        let s = spec(Axis::Rows, 1.0, 1.0, 0.0);
        assert!(barrier_loss(&mut tape, &[s], &mv).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let mut tape = Tape::new();
        let ls = tape.constant(Tensor::scalar(2.0));
        let lc = tape.constant(Tensor::scalar(1.0));
        let l = total_loss(&mut tape, ls, lc, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 2.5);
        let l = total_loss(&mut tape, ls, lc, 1e-9).unwrap();
        assert!((tape.value(l).item() - 2.0).abs() < 1e-8);
        assert!(total_loss(&mut tape, ls, lc, 0.0).is_err());
        assert!(total_loss(&mut tape, ls, lc, -1.0).is_err());
    }

    #[test]
    fn slope_range_enforced() {
        let r = MaskRef {
            layer: 0,
            channel: 0,
            axis: Axis::Full,
        };
        assert!(ConstraintSpec::new(r, 1.0, 1.0, 0.2).is_err());
        assert!(ConstraintSpec::new(r, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn vacuous_axes_are_dropped() {
        let m = MaskParams::separable([9, 4], [3, 4], Tensor::zeros(&[9]), Tensor::zeros(&[4]))
            .unwrap();
        let (specs, notes) = constraints_for(&[vec![m]], 0.0, true).unwrap();
        assert_eq!(specs.len(), 1);
        assert_eq!(specs[0].target.axis, Axis::Rows);
        assert_eq!(specs[0].normalizer, 6.0);
        assert_eq!(notes.len(), 1);
    }

    #[test]
    fn barrier_increasing_above_threshold() {
        for i in 0..=100 {
            let alpha = -0.1 + 0.002 * i as f64;
            let mut x = 0.04;
            while x <= 1.0 {
                assert!(barrier_derivative(x, alpha) > 0.0);
                assert!(barrier(x + 1e-3, alpha) > barrier(x, alpha));
                x += 0.01;
            }
        }
    }
}
