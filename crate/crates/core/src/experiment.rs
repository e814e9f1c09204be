//! Config-driven experiments: data generation, training and the files they
//! write (`metrics.csv`, `summary.json`, mask dumps).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conv::Padding;
use crate::dilation::{FixedPattern, LayerSpec, MaskMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Readout};
use crate::rng;
use crate::synth::{
    active_rows, gen_lag_task, gen_pattern2d_task, lag_bayes_rule, mask_recovery_score, DataSet,
    LagTaskParams, PatternTaskParams,
};
use crate::tensor::Tensor;
use crate::train::{train, EpochRecord, TrainConfig, TrainReport};

pub const SUMMARY_FORMAT: &str = "gendilate-summary/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Lag {
        n_train: usize,
        n_test: usize,
        time_len: usize,
        channels: usize,
        lags: Vec<usize>,
        noise: f64,
        #[serde(default)]
        signal_channel: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        anchor: Option<usize>,
        window: usize,
    },
    Pattern2d {
        n_train: usize,
        n_test: usize,
        height: usize,
        width: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pattern: Option<Vec<Vec<f64>>>,
        origin: [usize; 2],
        noise: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl TaskConfig {
    pub fn lag_params(&self, seed: u64, split: Split) -> Option<LagTaskParams> {
        match self {
            TaskConfig::Lag {
                n_train,
                n_test,
                time_len,
                channels,
                lags,
                noise,
                signal_channel,
                anchor,
                window,
            } => Some(LagTaskParams {
                n: if split == Split::Train {
                    *n_train
                } else {
                    *n_test
                },
                time_len: *time_len,
                channels: *channels,
                lags: lags.clone(),
                noise: *noise,
                signal_channel: *signal_channel,
                anchor: *anchor,
                window: *window,
                seed: split_seed(seed, split),
            }),
            _ => None,
        }
    }

    pub fn pattern_params(&self, seed: u64, split: Split) -> Option<PatternTaskParams> {
        match self {
            TaskConfig::Pattern2d {
                n_train,
                n_test,
                height,
                width,
                pattern,
                origin,
                noise,
            } => Some(PatternTaskParams {
                n: if split == Split::Train {
                    *n_train
                } else {
                    *n_test
                },
                height: *height,
                width: *width,
                pattern: pattern.clone(),
                origin: *origin,
                noise: *noise,
                seed: split_seed(seed, split),
            }),
            _ => None,
        }
    }

    pub fn generate(&self, seed: u64, split: Split) -> Result<DataSet> {
        match self {
            TaskConfig::Lag { .. } => gen_lag_task(&self.lag_params(seed, split).expect("lag")),
            TaskConfig::Pattern2d { .. } => {
                gen_pattern2d_task(&self.pattern_params(seed, split).expect("pattern"))
            }
        }
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        match self {
            TaskConfig::Lag {
                time_len, channels, ..
            } => [1, *time_len, *channels],
            TaskConfig::Pattern2d { height, width, .. } => [1, *height, *width],
        }
    }

    /// Accuracy of the generator's own decision rule on `data`.
    pub fn oracle_accuracy(&self, seed: u64, data: &DataSet) -> f64 {
        let correct = match self {
            TaskConfig::Lag { .. } => {
                let p = self.lag_params(seed, Split::Test).expect("lag");
                (0..data.len())
                    .filter(|&i| lag_bayes_rule(&p, data.sample(i)) == data.labels[i])
                    .count()
            }
            TaskConfig::Pattern2d { .. } => (0..data.len())
                .filter(|&i| template_match(data, i) == data.labels[i])
                .count(),
        };
        correct as f64 / data.len() as f64
    }

    fn check(&self) -> Result<()> {
        let (n_train, n_test) = match self {
            TaskConfig::Lag {
                n_train, n_test, ..
            } => (*n_train, *n_test),
            TaskConfig::Pattern2d {
                n_train, n_test, ..
            } => (*n_train, *n_test),
        };
        if n_train == 0 {
            return Err(Error::config("task.n_train", "must be at least 1"));
        }
        if n_test == 0 {
            return Err(Error::config("task.n_test", "must be at least 1"));
        }
        let checked = match self {
            TaskConfig::Lag { .. } => self.lag_params(0, Split::Train).expect("lag").validate(),
            TaskConfig::Pattern2d { .. } => self
                .pattern_params(0, Split::Train)
                .expect("pattern")
                .validate()
                .map(|_| ()),
        };
        checked.map_err(|e| Error::config("task", e.to_string()))
    }
}

fn split_seed(seed: u64, split: Split) -> u64 {
    rng::split_seed(
        seed,
        if split == Split::Train {
            0xDA7A
        } else {
            0x7E57
        },
    )
}

/// Inner product of the sample's pattern window with the true pattern,
/// thresholded halfway below a full match.
fn template_match(data: &DataSet, i: usize) -> usize {
    let truth = &data.meta.truth;
    let [_, _, w] = data.sample_shape();
    let [r0, c0] = data.meta.origin;
    let x = data.sample(i);
    let (ph, pw) = (truth.shape()[0], truth.shape()[1]);
    let mut score = 0.0;
    for a in 0..ph {
        for b in 0..pw {
            score += truth.at(&[a, b]) * x[(r0 + a) * w + c0 + b];
        }
    }
    usize::from(score > truth.sum() - 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Lag-recovery defaults: 2000/500 samples, T = 32, 4 sensor channels,
    /// lags {0, 4, 8}, one separable layer with a 9-step field and a budget
    /// of 3 time steps and 1 sensor channel.
    pub fn lag_default(seed: u64) -> Self {
        ExperimentConfig {
            task: TaskConfig::Lag {
                n_train: 2000,
                n_test: 500,
                time_len: 32,
                channels: 4,
                lags: vec![0, 4, 8],
                noise: 0.0,
                signal_channel: 0,
                anchor: None,
                window: 9,
            },
            model: ModelSpec {
                layers: vec![LayerSpec {
                    in_channels: 1,
                    out_channels: 1,
                    field: [9, 4],
                    budget: [3, 1],
                    mask: MaskMode::Separable,
                    pattern: None,
                    padding: Padding::Valid,
                    init_scale: None,
                }],
                readout: Readout::Anchor,
                classes: 2,
            },
            train: TrainConfig {
                epochs: 30,
                batch_size: 32,
                learning_rate: 0.05,
                momentum: 0.9,
                mu: 1.0,
                alpha: 0.0,
                seed,
                ..TrainConfig::default()
            },
            out_dir: None,
        }
    }

    /// Scattered 5×5 pattern task with one general-mask layer.
    pub fn pattern_default(seed: u64) -> Self {
        ExperimentConfig {
            task: TaskConfig::Pattern2d {
                n_train: 2000,
                n_test: 500,
                height: 12,
                width: 12,
                pattern: None,
                origin: [3, 3],
                noise: 1.0,
            },
            model: ModelSpec {
                layers: vec![LayerSpec {
                    in_channels: 1,
                    out_channels: 1,
                    field: [5, 5],
                    budget: [3, 3],
                    mask: MaskMode::General,
                    pattern: None,
                    padding: Padding::Valid,
                    init_scale: None,
                }],
                readout: Readout::Anchor,
                classes: 2,
            },
            train: TrainConfig {
                epochs: 30,
                seed,
                ..TrainConfig::default()
            },
            out_dir: None,
        }
    }

    /// Parses JSON, reporting the field path of any structural error.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Cross-field checks; errors carry the offending field path.
    pub fn validate(&self) -> Result<()> {
        self.task.check()?;
        self.train.validate()?;
        for (i, l) in self.model.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::config(format!("model.layers[{i}]"), e.to_string()))?;
            if let Some(FixedPattern::Matrix { .. }) = &l.pattern {
                if l.mask != MaskMode::Fixed {
                    return Err(Error::config(
                        format!("model.layers[{i}].pattern"),
                        "fixed layers only",
                    ));
                }
            }
        }
        self.model
            .trace(self.task.sample_shape())
            .map_err(|e| Error::config("model", e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub layer: usize,
    pub channel: usize,
    pub mode: MaskMode,
    pub field: [usize; 2],
    pub budget: [usize; 2],
    pub soft: Tensor,
    pub binary: Tensor,
    pub feasible: bool,
    /// Binary row selection (the temporal mask for time-series inputs).
    pub rows: Tensor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_recall: Option<f64>,
    /// Fraction of true cells among the `k` largest soft values, `k` being
    /// the number of true cells. Does not depend on the threshold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k_recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format: String,
    pub config: ExperimentConfig,
    pub model: Model,
    pub epochs: usize,
    #[serde(rename = "final")]
    pub final_record: EpochRecord,
    pub feasible: bool,
    pub masks: Vec<MaskSummary>,
    /// Accuracy of the generator's decision rule on the test split.
    pub oracle_accuracy: f64,
    pub notices: Vec<String>,
}

impl Summary {
    pub fn load(path: &Path) -> Result<Self> {
        let s: Summary = serde_json::from_str(&fs::read_to_string(path)?)?;
        if s.format != SUMMARY_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported summary format `{}`",
                s.format
            )));
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn mask(&self, layer: usize, channel: usize) -> Option<&MaskSummary> {
        self.masks
            .iter()
            .find(|m| m.layer == layer && m.channel == channel)
    }
}

/// Binary masks of every layer with recovery scores against `truth` where
/// the field matches the ground-truth window.
pub fn summarize_masks(model: &Model, truth: &Tensor, threshold: f64) -> Result<Vec<MaskSummary>> {
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (ci, mask) in layer.masks.iter().enumerate() {
            let bin = mask.binarize(threshold)?;
            let rows = match mask.binarize_axes(threshold) {
                Some((r, _)) => r,
                None => active_rows(&bin.pattern),
            };
            let scored = li == 0 && bin.pattern.shape() == truth.shape();
            let soft = mask.soft();
            let (precision, recall, row_recall, top_k_recall) = if scored {
                let (p, r) = mask_recovery_score(&bin.pattern, truth)?;
                let (_, rr) = mask_recovery_score(&rows, &active_rows(truth))?;
                (Some(p), Some(r), Some(rr), Some(top_k_recall(&soft, truth)))
            } else {
                (None, None, None, None)
            };
            out.push(MaskSummary {
                layer: li,
                channel: ci,
                mode: mask.mode(),
                field: mask.field,
                budget: mask.budget,
                soft,
                binary: bin.pattern,
                feasible: bin.feasible,
                rows,
                precision,
                recall,
                row_recall,
                top_k_recall,
            });
        }
    }
    Ok(out)
}

pub fn top_k_recall(soft: &Tensor, truth: &Tensor) -> f64 {
    let k = truth.data().iter().filter(|&&v| v == 1.0).count();
    if k == 0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..soft.len()).collect();
    order.sort_by(|&a, &b| soft.data()[b].total_cmp(&soft.data()[a]).then(a.cmp(&b)));
    let hits = order[..k]
        .iter()
        .filter(|&&i| truth.data()[i] == 1.0)
        .count();
    hits as f64 / k as f64
}

/// Everything one training run produces.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: TrainReport,
    pub summary: Summary,
}

/// Generates data, builds the model and trains it.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate()?;
    let seed = cfg.seed();
    let train_set = cfg.task.generate(seed, Split::Train)?;
    let test_set = cfg.task.generate(seed, Split::Test)?;
    let mut model = Model::new(
        cfg.model.clone(),
        train_set.sample_shape(),
        train_set.meta.origin,
        &mut rng::derive(seed, 0x1D1),
    )?;
    let report = train(&mut model, &train_set, Some(&test_set), &cfg.train)?;
    let final_record = report.last().cloned().expect("at least one epoch");
    let masks = summarize_masks(&model, &train_set.meta.truth, cfg.train.threshold)?;
    let summary = Summary {
        format: SUMMARY_FORMAT.into(),
        config: cfg.clone(),
        epochs: report.records.len(),
        final_record,
        feasible: report.all_feasible(),
        masks,
        oracle_accuracy: cfg.task.oracle_accuracy(seed, &test_set),
        notices: report.notices.clone(),
        model,
    };
    Ok(Outcome { report, summary })
}

/// Writes `metrics.csv`, `summary.json` and `masks/` snapshots into `dir`.
pub fn write_outputs(dir: &Path, outcome: &Outcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), outcome.report.metrics_csv())?;
    fs::write(dir.join("summary.json"), outcome.summary.to_json())?;
    write_snapshots(dir, &outcome.report)
}

pub fn write_snapshots(dir: &Path, report: &TrainReport) -> Result<()> {
    if report.snapshots.is_empty() {
        return Ok(());
    }
    let masks = dir.join("masks");
    fs::create_dir_all(&masks)?;
    for s in &report.snapshots {
        let name = format!("epoch{:04}_layer{}_ch{}.txt", s.epoch, s.layer, s.channel);
        fs::write(masks.join(name), &s.dump)?;
    }
    Ok(())
}

/// Re-generates the test split of a summary's experiment and scores the
/// stored model with binarized masks.
pub fn evaluate_summary(summary: &Summary) -> Result<f64> {
    let cfg = &summary.config;
    let test_set = cfg.task.generate(cfg.seed(), Split::Test)?;
    summary.model.accuracy(&test_set, Some(cfg.train.threshold))
}

/// Dataset files: `<split>_inputs.txt` and `<split>_labels.txt` in the
/// tensor text format, plus `metadata.json`.
pub fn write_dataset(dir: &Path, task: &TaskConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
        let d = task.generate(seed, split)?;
        fs::write(dir.join(format!("{name}_inputs.txt")), d.inputs.to_text())?;
        let labels = Tensor::from_vec(d.labels.iter().map(|&y| y as f64).collect());
        fs::write(dir.join(format!("{name}_labels.txt")), labels.to_text())?;
        splits.push(serde_json::json!({
            "split": name,
            "samples": d.len(),
            "positive_rate": d.positive_rate(),
            "seed": split_seed(seed, split),
            "origin": d.meta.origin,
            "truth": d.meta.truth,
        }));
    }
    let meta = serde_json::json!({
        "seed": seed,
        "task": task,
        "splits": splits,
    });
    fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

/// Resolves the output directory: explicit argument, then config, then
/// `runs/seed<N>`.
pub fn output_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed{}", cfg.seed())))
}
