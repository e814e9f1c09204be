//! Masked-weight convolution layers.
//!
//! A layer holds an enlarged `rows × cols` receptive field of weights and one
//! mask per output channel that decides which of those weights are active.
//! Three mask kinds exist:
//!
//! - **fixed**: a constant binary pattern (classic dilation, or any pattern);
//! - **separable**: `outer(σ(row_logits), σ(col_logits))`, i.e. the weight
//!   matrix is `diag(ψ_rows) · W · diag(ψ_cols)`;
//! - **general**: `σ(logits)` elementwise over the whole field.
//!
//! The budget `(p_rows, p_cols)` bounds the active taps: at most `p_rows`
//! rows and `p_cols` columns for a separable mask, at most
//! `p_rows · p_cols` cells for a general one.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conv::{ConvSpec, Padding};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{format_sig17, logit, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Fixed,
    Separable,
    General,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Fixed => "fixed",
            MaskMode::Separable => "separable",
            MaskMode::General => "general",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskKind {
    Fixed { pattern: Tensor },
    Separable { rows: Tensor, cols: Tensor },
    General { logits: Tensor },
}

/// Mask of one output channel: logits (or a fixed pattern) plus geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskParams {
    /// Receptive field `[rows, cols]`.
    pub field: [usize; 2],
    /// Active-tap budget `[p_rows, p_cols]`.
    pub budget: [usize; 2],
    pub kind: MaskKind,
}

fn check_geometry(field: [usize; 2], budget: [usize; 2]) -> Result<()> {
    for axis in 0..2 {
        if budget[axis] == 0 || budget[axis] > field[axis] {
            return Err(Error::invalid(format!(
                "mask budget {budget:?} must satisfy 1 <= p <= y for field {field:?}"
            )));
        }
    }
    Ok(())
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

fn ones(t: &Tensor) -> usize {
    t.data().iter().filter(|&&v| v == 1.0).count()
}

/// Binary vector with `p` ones spaced `rate` apart, centred in length `y`.
pub fn dilation_vector(y: usize, p: usize, rate: usize) -> Result<Tensor> {
    if p == 0 || rate == 0 {
        return Err(Error::invalid("dilation needs p >= 1 and rate >= 1"));
    }
    let span = (p - 1) * rate + 1;
    if span > y {
        return Err(Error::invalid(format!(
            "{p} taps at rate {rate} span {span} cells, more than the field {y}"
        )));
    }
    let offset = (y - span) / 2;
    let mut v = Tensor::zeros(&[y]);
    for t in 0..p {
        v.data_mut()[offset + t * rate] = 1.0;
    }
    Ok(v)
}

impl MaskParams {
    /// A constant pattern. Its number of ones must equal `p_rows · p_cols`.
    pub fn fixed(pattern: Tensor, budget: [usize; 2]) -> Result<Self> {
        if pattern.ndim() != 2 || !is_binary(&pattern) {
            return Err(Error::invalid("fixed mask pattern must be a binary matrix"));
        }
        let field = [pattern.shape()[0], pattern.shape()[1]];
        check_geometry(field, budget)?;
        if ones(&pattern) != budget[0] * budget[1] {
            return Err(Error::invalid(format!(
                "fixed pattern has {} active cells, budget requires exactly {}",
                ones(&pattern),
                budget[0] * budget[1]
            )));
        }
        Ok(MaskParams {
            field,
            budget,
            kind: MaskKind::Fixed { pattern },
        })
    }

    /// A constant separable pattern `outer(rows, cols)` of binary vectors.
    pub fn fixed_separable(rows: &Tensor, cols: &Tensor) -> Result<Self> {
        if !is_binary(rows) || !is_binary(cols) {
            return Err(Error::invalid("fixed mask vectors must be binary"));
        }
        let pattern = Tensor::outer_product(rows, cols)?;
        MaskParams::fixed(pattern, [ones(rows), ones(cols)])
    }

    /// Classic dilation: `p × p` taps at `rate`, centred in a `y × y` field.
    pub fn fixed_dilation(y: usize, p: usize, rate: usize) -> Result<Self> {
        let v = dilation_vector(y, p, rate)?;
        MaskParams::fixed_separable(&v, &v)
    }

    pub fn separable(
        field: [usize; 2],
        budget: [usize; 2],
        rows: Tensor,
        cols: Tensor,
    ) -> Result<Self> {
        check_geometry(field, budget)?;
        if rows.shape() != [field[0]] || cols.shape() != [field[1]] {
            return Err(Error::ShapeMismatch {
                op: "separable mask",
                left: rows.shape().to_vec(),
                right: cols.shape().to_vec(),
            });
        }
        Ok(MaskParams {
            field,
            budget,
            kind: MaskKind::Separable { rows, cols },
        })
    }

    pub fn general(budget: [usize; 2], logits: Tensor) -> Result<Self> {
        if logits.ndim() != 2 {
            return Err(Error::invalid("general mask logits must be a matrix"));
        }
        let field = [logits.shape()[0], logits.shape()[1]];
        check_geometry(field, budget)?;
        Ok(MaskParams {
            field,
            budget,
            kind: MaskKind::General { logits },
        })
    }

    /// Logits start at `logit(p / y)` plus uniform noise in `±0.1`, so the
    /// expected soft mass sits on the budget.
    pub fn init_separable(field: [usize; 2], budget: [usize; 2], rng: &mut Rng) -> Result<Self> {
        check_geometry(field, budget)?;
        let axis = |y: usize, p: usize, rng: &mut Rng| {
            let base = init_logit(p as f64 / y as f64);
            Tensor::uniform(&[y], -0.1, 0.1, rng).map(|e| base + e)
        };
        let rows = axis(field[0], budget[0], rng);
        let cols = axis(field[1], budget[1], rng);
        MaskParams::separable(field, budget, rows, cols)
    }

    pub fn init_general(field: [usize; 2], budget: [usize; 2], rng: &mut Rng) -> Result<Self> {
        check_geometry(field, budget)?;
        let ratio = (budget[0] * budget[1]) as f64 / (field[0] * field[1]) as f64;
        let base = init_logit(ratio);
        let logits = Tensor::uniform(&field, -0.1, 0.1, rng).map(|e| base + e);
        MaskParams::general(budget, logits)
    }

    pub fn mode(&self) -> MaskMode {
        match self.kind {
            MaskKind::Fixed { .. } => MaskMode::Fixed,
            MaskKind::Separable { .. } => MaskMode::Separable,
            MaskKind::General { .. } => MaskMode::General,
        }
    }

    /// Mask values currently applied during training.
    pub fn soft(&self) -> Tensor {
        match &self.kind {
            MaskKind::Fixed { pattern } => pattern.clone(),
            MaskKind::Separable { rows, cols } => {
                Tensor::outer_product(&rows.sigmoid(), &cols.sigmoid()).expect("1-D logits")
            }
            MaskKind::General { logits } => logits.sigmoid(),
        }
    }

    /// Trainable logits, in parameter order.
    pub fn logits(&self) -> Vec<&Tensor> {
        match &self.kind {
            MaskKind::Fixed { .. } => vec![],
            MaskKind::Separable { rows, cols } => vec![rows, cols],
            MaskKind::General { logits } => vec![logits],
        }
    }

    pub fn logits_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.kind {
            MaskKind::Fixed { .. } => vec![],
            MaskKind::Separable { rows, cols } => vec![rows, cols],
            MaskKind::General { logits } => vec![logits],
        }
    }

    /// `(saturated, total)` over the trainable mask entries, where an entry
    /// is saturated when its σ value lies within 0.05 of 0 or 1.
    pub fn saturation(&self) -> (usize, usize) {
        self.logits()
            .into_iter()
            .flat_map(|t| t.data().iter())
            .fold((0, 0), |(s, n), &z| {
                let v = sigmoid(z);
                let sat = (v - v.round()).abs() < 0.05;
                (s + usize::from(sat), n + 1)
            })
    }

    /// Thresholds the soft mask into a binary pattern.
    ///
    /// When more entries pass the threshold than the budget allows, only the
    /// highest logits are kept and the result is flagged infeasible.
    pub fn binarize(&self, threshold: f64) -> Result<BinaryMask> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::invalid(format!(
                "binarization threshold must lie in (0, 1), got {threshold}"
            )));
        }
        Ok(match &self.kind {
            MaskKind::Fixed { pattern } => BinaryMask {
                pattern: pattern.clone(),
                feasible: true,
            },
            MaskKind::Separable { rows, cols } => {
                let (r, fr) = binarize_logits(rows, self.budget[0], threshold);
                let (c, fc) = binarize_logits(cols, self.budget[1], threshold);
                BinaryMask {
                    pattern: Tensor::outer_product(&r, &c)?,
                    feasible: fr && fc,
                }
            }
            MaskKind::General { logits } => {
                let (p, f) = binarize_logits(logits, self.budget[0] * self.budget[1], threshold);
                BinaryMask {
                    pattern: p,
                    feasible: f,
                }
            }
        })
    }

    /// Per-axis binary vectors of a separable mask.
    pub fn binarize_axes(&self, threshold: f64) -> Option<(Tensor, Tensor)> {
        match &self.kind {
            MaskKind::Separable { rows, cols } => Some((
                binarize_logits(rows, self.budget[0], threshold).0,
                binarize_logits(cols, self.budget[1], threshold).0,
            )),
            _ => None,
        }
    }

    /// Records the logits on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> MaskVars {
        match &self.kind {
            MaskKind::Fixed { pattern } => MaskVars::Fixed(tape.constant(pattern.clone())),
            MaskKind::Separable { rows, cols } => MaskVars::Separable {
                rows: tape.param(rows.clone()),
                cols: tape.param(cols.clone()),
            },
            MaskKind::General { logits } => MaskVars::General(tape.param(logits.clone())),
        }
    }

    /// Text dump: a `mode y p channel` header, the soft grid, then the
    /// binarized grid.
    pub fn dump(&self, channel: usize, threshold: f64) -> Result<String> {
        let dim = |v: [usize; 2]| {
            if v[0] == v[1] {
                v[0].to_string()
            } else {
                format!("{}x{}", v[0], v[1])
            }
        };
        let mut s = format!(
            "{} {} {} {}\n",
            self.mode().name(),
            dim(self.field),
            dim(self.budget),
            channel
        );
        let soft = self.soft();
        let cols = self.field[1];
        for row in soft.data().chunks(cols) {
            let cells: Vec<String> = row.iter().map(|v| format_sig17(*v)).collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        let bin = self.binarize(threshold)?;
        for row in bin.pattern.data().chunks(cols) {
            let cells: Vec<&str> = row
                .iter()
                .map(|&v| if v == 1.0 { "1" } else { "0" })
                .collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        Ok(s)
    }
}

fn init_logit(ratio: f64) -> f64 {
    // A budget equal to the field makes that axis unconstrained; logit(1)
    // is infinite, so the start is capped.
    logit(ratio.clamp(0.05, 0.95))
}

/// Thresholds `σ(logits)` and keeps at most `budget` entries, ranked by
/// descending logit and then ascending flat index. Returns the binary
/// tensor and whether no entry had to be dropped.
pub fn binarize_logits(logits: &Tensor, budget: usize, threshold: f64) -> (Tensor, bool) {
    let mut active: Vec<usize> = (0..logits.len())
        .filter(|&i| sigmoid(logits.data()[i]) >= threshold)
        .collect();
    let feasible = active.len() <= budget;
    if !feasible {
        active.sort_by(|&a, &b| {
            logits.data()[b]
                .total_cmp(&logits.data()[a])
                .then(a.cmp(&b))
        });
        active.truncate(budget);
    }
    let mut out = Tensor::zeros(logits.shape());
    for i in active {
        out.data_mut()[i] = 1.0;
    }
    (out, feasible)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub pattern: Tensor,
    pub feasible: bool,
}

/// `█` for active cells, `·` for inactive ones.
pub fn render_ascii(pattern: &Tensor) -> String {
    let cols = *pattern.shape().last().unwrap_or(&1);
    let mut s = String::new();
    for row in pattern.data().chunks(cols) {
        for &v in row {
            s.push(if v >= 0.5 { '█' } else { '·' });
        }
        s.push('\n');
    }
    s
}

/// Mask of one channel as recorded on a tape.
#[derive(Clone, Debug)]
pub enum MaskVars {
    Fixed(Var),
    Separable { rows: Var, cols: Var },
    General(Var),
}

impl MaskVars {
    /// Trainable leaves, in the same order as [`MaskParams::logits`].
    pub fn params(&self) -> Vec<Var> {
        match self {
            MaskVars::Fixed(_) => vec![],
            MaskVars::Separable { rows, cols } => vec![*rows, *cols],
            MaskVars::General(v) => vec![*v],
        }
    }
}

/// `ψ_l[i] · ψ_r[j]`: the elementwise mask equivalent of
/// `diag(ψ_l) · W · diag(ψ_r)`.
pub fn mask_from_vectors(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.ndim() != 1 || left.shape() != right.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_from_vectors",
            left: left.shape().to_vec(),
            right: right.shape().to_vec(),
        });
    }
    Tensor::outer_product(left, right)
}

/// Soft mask of one channel on the tape.
pub fn soft_mask(tape: &mut Tape, mask: &MaskVars) -> Result<Var> {
    match mask {
        MaskVars::Fixed(v) => Ok(*v),
        MaskVars::Separable { rows, cols } => {
            let r = tape.sigmoid(*rows);
            let c = tape.sigmoid(*cols);
            tape.outer(r, c)
        }
        MaskVars::General(v) => Ok(tape.sigmoid(*v)),
    }
}

/// `W ⊙ mask` for a single `rows × cols` weight matrix.
pub fn masked_weights(tape: &mut Tape, weights: Var, mask: &MaskVars) -> Result<Var> {
    let m = soft_mask(tape, mask)?;
    tape.mul(weights, m)
}

/// Configuration of a fixed mask pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FixedPattern {
    /// Every cell active; `budget` must equal `field`.
    Full,
    /// `budget` taps per axis, `rate` apart, centred in the field.
    Dilation { rate: usize },
    /// Explicit per-axis binary vectors.
    Vectors { rows: Vec<f64>, cols: Vec<f64> },
    /// Explicit binary matrix.
    Matrix { cells: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Receptive field `[rows, cols]`.
    pub field: [usize; 2],
    /// Active-tap budget `[p_rows, p_cols]`.
    pub budget: [usize; 2],
    pub mask: MaskMode,
    /// Pattern for [`MaskMode::Fixed`] layers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<FixedPattern>,
    #[serde(default)]
    pub padding: Padding,
    /// Half-width of the uniform weight init; defaults to
    /// `1 / sqrt(in_channels · p_rows · p_cols)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scale: Option<f64>,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.field.contains(&0) {
            return Err(Error::invalid("field extents must be positive"));
        }
        check_geometry(self.field, self.budget)?;
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid("init_scale must be positive"));
            }
        }
        match (self.mask, &self.pattern) {
            (MaskMode::Fixed, None) => Err(Error::invalid("fixed mask layers need a `pattern`")),
            (MaskMode::Fixed, Some(_)) => self.fixed_mask().map(|_| ()),
            (_, Some(_)) => Err(Error::invalid(
                "`pattern` applies to fixed mask layers only",
            )),
            _ => Ok(()),
        }
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            padding: self.padding,
            ..ConvSpec::default()
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.field[0],
            self.field[1],
        ]
    }

    fn fixed_mask(&self) -> Result<MaskParams> {
        let pattern = self
            .pattern
            .as_ref()
            .ok_or_else(|| Error::invalid("fixed mask layers need a `pattern`"))?;
        let mask = match pattern {
            FixedPattern::Full => MaskParams::fixed(Tensor::ones(&self.field), self.budget)?,
            FixedPattern::Dilation { rate } => {
                let r = dilation_vector(self.field[0], self.budget[0], *rate)?;
                let c = dilation_vector(self.field[1], self.budget[1], *rate)?;
                MaskParams::fixed_separable(&r, &c)?
            }
            FixedPattern::Vectors { rows, cols } => MaskParams::fixed_separable(
                &Tensor::from_vec(rows.clone()),
                &Tensor::from_vec(cols.clone()),
            )?,
            FixedPattern::Matrix { cells } => {
                MaskParams::fixed(Tensor::from_rows(cells)?, self.budget)?
            }
        };
        if mask.field != self.field || mask.budget != self.budget {
            return Err(Error::invalid(format!(
                "fixed pattern has field {:?} / budget {:?}, layer declares {:?} / {:?}",
                mask.field, mask.budget, self.field, self.budget
            )));
        }
        Ok(mask)
    }

    /// Fresh per-channel masks for this layer.
    pub fn init_masks(&self, rng: &mut Rng) -> Result<Vec<MaskParams>> {
        (0..self.out_channels)
            .map(|_| match self.mask {
                MaskMode::Fixed => self.fixed_mask(),
                MaskMode::Separable => MaskParams::init_separable(self.field, self.budget, rng),
                MaskMode::General => MaskParams::init_general(self.field, self.budget, rng),
            })
            .collect()
    }

    pub fn init_weights(&self, rng: &mut Rng) -> Tensor {
        let fan_in = (self.in_channels * self.budget[0] * self.budget[1]) as f64;
        let s = self.init_scale.unwrap_or(1.0 / fan_in.sqrt());
        Tensor::uniform(&self.weight_shape(), -s, s, rng)
    }
}

/// Convolution with per-output-channel masked weights.
///
/// `input` is `[N, C_in, H, W]` or `[C_in, H, W]`; the output has the same
/// rank. `masks[o]` multiplies every input-channel slice of output channel
/// `o`.
pub fn layer_forward(
    tape: &mut Tape,
    input: Var,
    layer: &LayerSpec,
    weights: Var,
    masks: &[MaskVars],
) -> Result<Var> {
    if masks.len() != layer.out_channels {
        return Err(Error::invalid(format!(
            "layer has {} output channels but {} masks were given",
            layer.out_channels,
            masks.len()
        )));
    }
    if tape.value(weights).shape() != layer.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "layer_forward",
            left: tape.value(weights).shape().to_vec(),
            right: layer.weight_shape().to_vec(),
        });
    }
    let per_channel = masks
        .iter()
        .map(|m| soft_mask(tape, m))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack(&per_channel)?;
    let w = tape.channel_mask_mul(weights, stacked)?;

    let in_shape = tape.value(input).shape().to_vec();
    let batched = match in_shape.len() {
        4 => input,
        3 => tape.reshape(input, &[1, in_shape[0], in_shape[1], in_shape[2]])?,
        _ => {
            return Err(Error::invalid(format!(
                "layer input must be [C, H, W] or [N, C, H, W], got {in_shape:?}"
            )))
        }
    };
    let out = tape.conv2d(batched, w, &layer.conv_spec())?;
    if in_shape.len() == 3 {
        let s = tape.value(out).shape().to_vec();
        tape.reshape(out, &s[1..])
    } else {
        Ok(out)
    }
}
