//! Seeded synthetic classification tasks with a known informative structure.
//!
//! Inputs are `[N, C, H, W]`. The time-series task uses a single input
//! plane with `H` = time and `W` = sensor channel. Each dataset carries a
//! [`GroundTruth`]: the binary mask of informative cells inside a window
//! whose top-left corner sits at `origin` in input coordinates.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Input position of the informative window's top-left cell.
    pub origin: [usize; 2],
    /// Binary mask of informative cells within the window.
    pub truth: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: GroundTruth,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let per: usize = self.sample_shape().iter().product();
        &self.inputs.data()[i * per..(i + 1) * per]
    }

    /// Inputs `[B, C, H, W]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent batch"),
            labels,
        )
    }

    /// Fraction of samples labelled 1.
    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().filter(|&&y| y == 1).count() as f64 / self.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LagTaskParams {
    pub n: usize,
    pub time_len: usize,
    pub channels: usize,
    /// Offsets `d` back from the anchor whose values decide the label.
    pub lags: Vec<usize>,
    /// Standard deviation of the label noise added to the lag sum.
    pub noise: f64,
    #[serde(default)]
    pub signal_channel: usize,
    /// Anchor time step; defaults to the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<usize>,
    /// Height of the reported ground-truth window (the model's field rows).
    pub window: usize,
    pub seed: u64,
}

impl Default for LagTaskParams {
    fn default() -> Self {
        LagTaskParams {
            n: 2000,
            time_len: 32,
            channels: 4,
            lags: vec![0, 4, 8],
            noise: 0.0,
            signal_channel: 0,
            anchor: None,
            window: 9,
            seed: 0,
        }
    }
}

impl LagTaskParams {
    pub fn anchor(&self) -> usize {
        self.anchor.unwrap_or(self.time_len.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if self.time_len == 0 || self.channels == 0 {
            return Err(Error::invalid("time_len and channels must be positive"));
        }
        if self.lags.is_empty() {
            return Err(Error::invalid("lag set must not be empty"));
        }
        let max_lag = *self.lags.iter().max().expect("non-empty");
        if max_lag >= self.time_len {
            return Err(Error::invalid(format!(
                "lag {max_lag} out of range for time length {}",
                self.time_len
            )));
        }
        if max_lag >= self.window {
            return Err(Error::invalid(format!(
                "lag {max_lag} does not fit the {}-row window",
                self.window
            )));
        }
        let t0 = self.anchor();
        if t0 >= self.time_len || t0 + 1 < self.window {
            return Err(Error::invalid(format!(
                "anchor {t0} leaves no room for a {}-row window in {} steps",
                self.window, self.time_len
            )));
        }
        if self.signal_channel >= self.channels {
            return Err(Error::invalid("signal_channel out of range"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a non-negative number"));
        }
        Ok(())
    }

    /// Ground-truth mask over `[window, channels]`: row `window − 1 − d` of
    /// the signal channel for every lag `d`.
    pub fn ground_truth(&self) -> GroundTruth {
        let mut truth = Tensor::zeros(&[self.window, self.channels]);
        for &d in &self.lags {
            truth.set(&[self.window - 1 - d, self.signal_channel], 1.0);
        }
        GroundTruth {
            origin: [self.anchor() + 1 - self.window, 0],
            truth,
        }
    }
}

/// Time-series task: standard normal samples, label 1 iff the sum of the
/// signal channel at `anchor − d` over all lags (plus label noise) is
/// positive.
pub fn gen_lag_task(params: &LagTaskParams) -> Result<DataSet> {
    params.validate()?;
    let mut rng = rng::derive(params.seed, 0x1A6);
    let (t, c) = (params.time_len, params.channels);
    let t0 = params.anchor();
    let inputs = Tensor::randn(&[params.n, 1, t, c], &mut rng);
    let labels = (0..params.n)
        .map(|i| {
            let x = &inputs.data()[i * t * c..(i + 1) * t * c];
            let s: f64 = params
                .lags
                .iter()
                .map(|&d| x[(t0 - d) * c + params.signal_channel])
                .sum();
            let e: f64 = rng.sample(StandardNormal);
            usize::from(s + params.noise * e > 0.0)
        })
        .collect();
    Ok(DataSet {
        inputs,
        labels,
        classes: 2,
        meta: params.ground_truth(),
    })
}

/// The noise-free decision rule of the lag task.
pub fn lag_bayes_rule(params: &LagTaskParams, sample: &[f64]) -> usize {
    let t0 = params.anchor();
    let c = params.channels;
    let s: f64 = params
        .lags
        .iter()
        .map(|&d| sample[(t0 - d) * c + params.signal_channel])
        .sum();
    usize::from(s > 0.0)
}

/// Binary matrix with nine active cells spread over a 5×5 field.
pub fn scattered_pattern() -> Tensor {
    Tensor::from_rows(&[
        [1.0, 0.0, 0.0, 1.0, 1.0],
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 1.0, 1.0],
    ])
    .expect("constant")
}

/// Centred 3×3 block in a 5×5 field.
pub fn centred_block() -> Tensor {
    let mut t = Tensor::zeros(&[5, 5]);
    for i in 1..4 {
        for j in 1..4 {
            t.set(&[i, j], 1.0);
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternTaskParams {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    /// Binary pattern; defaults to [`scattered_pattern`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<Vec<f64>>>,
    /// Top-left input position of the pattern.
    pub origin: [usize; 2],
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PatternTaskParams {
    fn default() -> Self {
        PatternTaskParams {
            n: 2000,
            height: 12,
            width: 12,
            pattern: None,
            origin: [3, 3],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl PatternTaskParams {
    pub fn pattern_tensor(&self) -> Result<Tensor> {
        match &self.pattern {
            None => Ok(scattered_pattern()),
            Some(rows) => Tensor::from_rows(rows),
        }
    }

    pub fn validate(&self) -> Result<Tensor> {
        if self.n == 0 {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        let p = self.pattern_tensor()?;
        if p.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("pattern must be binary"));
        }
        let active = p.sum() as usize;
        if active == 0 || active == p.len() {
            return Err(Error::invalid(
                "pattern needs both active and inactive cells to admit a decoy",
            ));
        }
        let (ph, pw) = (p.shape()[0], p.shape()[1]);
        if self.origin[0] + ph > self.height || self.origin[1] + pw > self.width {
            return Err(Error::invalid(format!(
                "{ph}x{pw} pattern at {:?} does not fit a {}x{} image",
                self.origin, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a non-negative number"));
        }
        Ok(p)
    }
}

/// Flat image positions of the pattern's active cells.
fn pattern_cells(pattern: &Tensor, origin: [usize; 2], width: usize) -> Vec<usize> {
    let pw = pattern.shape()[1];
    let mut cells: Vec<usize> = (0..pattern.len())
        .filter(|&k| pattern.data()[k] == 1.0)
        .map(|k| (origin[0] + k / pw) * width + origin[1] + k % pw)
        .collect();
    cells.sort_unstable();
    cells
}

/// Same number of unit cells as the pattern, at distinct positions drawn
/// uniformly over the whole image; never the pattern's own placement.
fn shuffled_decoy(pattern_cells: &[usize], image: usize, rng: &mut Rng) -> Vec<usize> {
    loop {
        let mut cells = rand::seq::index::sample(rng, image, pattern_cells.len()).into_vec();
        cells.sort_unstable();
        if cells != pattern_cells {
            return cells;
        }
    }
}

/// 2-D task: class 1 holds the pattern at `origin`; class 0 holds the same
/// number of unit cells scattered at random positions over the image.
pub fn gen_pattern2d_task(params: &PatternTaskParams) -> Result<DataSet> {
    let pattern = params.validate()?;
    let mut rng = rng::derive(params.seed, 0x2D);
    let (h, w) = (params.height, params.width);
    let target = pattern_cells(&pattern, params.origin, w);
    let mut inputs = Tensor::randn(&[params.n, 1, h, w], &mut rng).scalar_mul(params.noise);
    let mut labels = Vec::with_capacity(params.n);
    for i in 0..params.n {
        let label = usize::from(rng.gen_bool(0.5));
        let cells = if label == 1 {
            target.clone()
        } else {
            shuffled_decoy(&target, h * w, &mut rng)
        };
        let base = i * h * w;
        for c in cells {
            inputs.data_mut()[base + c] += 1.0;
        }
        labels.push(label);
    }
    Ok(DataSet {
        inputs,
        labels,
        classes: 2,
        meta: GroundTruth {
            origin: params.origin,
            truth: pattern,
        },
    })
}

/// `(precision, recall)` of a learned binary mask against the truth.
///
/// An empty learned mask has precision 1; an empty truth has recall 1.
pub fn mask_recovery_score(learned: &Tensor, truth: &Tensor) -> Result<(f64, f64)> {
    if learned.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_recovery_score",
            left: learned.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let on = |v: f64| v >= 0.5;
    let hits = learned
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&l, &t)| on(l) && on(t))
        .count() as f64;
    let n_learned = learned.data().iter().filter(|&&v| on(v)).count() as f64;
    let n_truth = truth.data().iter().filter(|&&v| on(v)).count() as f64;
    let precision = if n_learned == 0.0 {
        1.0
    } else {
        hits / n_learned
    };
    let recall = if n_truth == 0.0 { 1.0 } else { hits / n_truth };
    Ok((precision, recall))
}

/// Collapses a binary mask to the rows that contain any active cell.
pub fn active_rows(mask: &Tensor) -> Tensor {
    let cols = mask.shape()[1];
    let rows: Vec<f64> = mask
        .data()
        .chunks(cols)
        .map(|r| {
            if r.iter().any(|&v| v >= 0.5) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::from_vec(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lag_task_is_deterministic() {
        let p = LagTaskParams {
            n: 50,
            seed: 5,
            ..LagTaskParams::default()
        };
        assert_eq!(gen_lag_task(&p).unwrap(), gen_lag_task(&p).unwrap());
        let q = LagTaskParams {
            seed: 6,
            ..p.clone()
        };
        assert_ne!(
            gen_lag_task(&p).unwrap().inputs,
            gen_lag_task(&q).unwrap().inputs
        );
    }

    #[test]
    fn lag_task_rejects_bad_params() {
        let base = LagTaskParams::default();
        assert!(gen_lag_task(&LagTaskParams {
            n: 0,
            ..base.clone()
        })
        .is_err());
        assert!(gen_lag_task(&LagTaskParams {
            lags: vec![0, 40],
            ..base.clone()
        })
        .is_err());
        assert!(gen_lag_task(&LagTaskParams {
            lags: vec![9],
            ..base.clone()
        })
        .is_err());
        assert!(gen_lag_task(&LagTaskParams {
            signal_channel: 4,
            ..base
        })
        .is_err());
    }

    #[test]
    fn lag_ground_truth_layout() {
        let p = LagTaskParams::default();
        let g = p.ground_truth();
        assert_eq!(g.origin, [23, 0]);
        assert_eq!(g.truth.shape(), &[9, 4]);
        assert_eq!(
            active_rows(&g.truth).data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(g.truth.sum(), 3.0);
    }

    #[test]
    fn noise_free_lag_labels_follow_the_rule() {
        let p = LagTaskParams {
            n: 1000,
            seed: 3,
            ..LagTaskParams::default()
        };
        let d = gen_lag_task(&p).unwrap();
        for i in 0..d.len() {
            assert_eq!(lag_bayes_rule(&p, d.sample(i)), d.labels[i]);
        }
        let rate = d.positive_rate();
        assert!((0.45..=0.55).contains(&rate), "{rate}");
    }

    #[test]
    fn pattern_task_examples() {
        let p = PatternTaskParams {
            n: 200,
            noise: 0.0,
            seed: 1,
            ..PatternTaskParams::default()
        };
        let d = gen_pattern2d_task(&p).unwrap();
        assert_eq!(d.meta.truth, scattered_pattern());
        assert_eq!(d.meta.truth.sum(), 9.0);
        // Equal energy in both classes.
        for i in 0..d.len() {
            let e: f64 = d.sample(i).iter().map(|v| v * v).sum();
            assert_eq!(e, 9.0);
        }
    }

    #[test]
    fn pattern_task_rejects_oversized_pattern() {
        let p = PatternTaskParams {
            height: 4,
            ..PatternTaskParams::default()
        };
        assert!(gen_pattern2d_task(&p).is_err());
        let p = PatternTaskParams {
            pattern: Some(vec![vec![1.0; 3]; 3]),
            ..PatternTaskParams::default()
        };
        assert!(gen_pattern2d_task(&p).is_err());
    }

    #[test]
    fn recovery_score_examples() {
        let truth = scattered_pattern();
        assert_eq!(mask_recovery_score(&truth, &truth).unwrap(), (1.0, 1.0));
        assert_eq!(
            mask_recovery_score(&Tensor::zeros(&[5, 5]), &truth).unwrap(),
            (1.0, 0.0)
        );
        let mut extra = truth.clone();
        extra.set(&[2, 2], 1.0);
        let (p, r) = mask_recovery_score(&extra, &truth).unwrap();
        assert!((p - 0.9).abs() < 1e-15);
        assert_eq!(r, 1.0);
        assert!(mask_recovery_score(&Tensor::zeros(&[3, 3]), &truth).is_err());
    }
}
