//! Small classifier: masked conv layers, a readout, and a dense head.
//!
//! Conv layers are chained with ReLU between them (none after the last).
//! The readout turns the final `[N, C, H, W]` map into `[N, C]` features,
//! either by picking the anchor position that lines up with the dataset's
//! informative window or by global averaging.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dilation::{layer_forward, LayerSpec, MaskParams, MaskVars};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synth::DataSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Feature map value at the position whose field starts at the
    /// dataset's ground-truth origin.
    Anchor,
    GlobalAverage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    #[default]
    CrossEntropy,
    /// Squared error between logits and one-hot targets.
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub readout: Readout,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weights: Tensor,
    pub masks: Vec<MaskParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<ConvLayer>,
    /// Readout position in the final feature map (anchor readout only).
    pub anchor: Option<[usize; 2]>,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
}

/// A model's parameters recorded on a tape.
pub struct Bound {
    pub weights: Vec<Var>,
    pub masks: Vec<Vec<MaskVars>>,
    pub head_weights: Var,
    pub head_bias: Var,
    /// Every trainable leaf, in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl ModelSpec {
    /// Checks layer chaining against a `[C, H, W]` input and returns the
    /// final feature map extents together with the accumulated zero padding.
    pub fn trace(&self, input: [usize; 3]) -> Result<([usize; 3], [usize; 2])> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one conv layer"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        let [mut c, mut h, mut w] = input;
        let mut pad = [0, 0];
        for (i, layer) in self.layers.iter().enumerate() {
            layer
                .validate()
                .map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
            if layer.in_channels != c {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} input channels, gets {c}",
                    layer.in_channels
                )));
            }
            let conv = layer.conv_spec();
            h = conv
                .output_extent(h, layer.field[0])
                .map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
            w = conv
                .output_extent(w, layer.field[1])
                .map_err(|e| Error::invalid(format!("layer {i}: {e}")))?;
            pad[0] += conv.pad_before(layer.field[0]);
            pad[1] += conv.pad_before(layer.field[1]);
            c = layer.out_channels;
        }
        Ok(([c, h, w], pad))
    }
}

impl Model {
    /// Initializes weights and masks for inputs of shape `[C, H, W]`.
    /// `origin` is the dataset's informative-window origin, used by the
    /// anchor readout.
    pub fn new(
        spec: ModelSpec,
        input: [usize; 3],
        origin: [usize; 2],
        rng: &mut Rng,
    ) -> Result<Self> {
        let ([c, h, w], pad) = spec.trace(input)?;
        let anchor = match spec.readout {
            Readout::GlobalAverage => None,
            Readout::Anchor => {
                let a = [origin[0] + pad[0], origin[1] + pad[1]];
                if a[0] >= h || a[1] >= w {
                    return Err(Error::invalid(format!(
                        "anchor {a:?} falls outside the {h}x{w} feature map"
                    )));
                }
                Some(a)
            }
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for ls in &spec.layers {
            let weights = ls.init_weights(rng);
            let masks = ls.init_masks(rng)?;
            layers.push(ConvLayer {
                spec: ls.clone(),
                weights,
                masks,
            });
        }
        let s = 1.0 / (c as f64).sqrt();
        let head_weights = Tensor::uniform(&[c, spec.classes], -s, s, rng);
        let head_bias = Tensor::zeros(&[spec.classes]);
        Ok(Model {
            spec,
            layers,
            anchor,
            head_weights,
            head_bias,
        })
    }

    pub fn masks(&self) -> Vec<Vec<MaskParams>> {
        self.layers.iter().map(|l| l.masks.clone()).collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weights);
            for m in &l.masks {
                out.extend(m.logits());
            }
        }
        out.push(&self.head_weights);
        out.push(&self.head_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weights);
            for m in &mut l.masks {
                out.extend(m.logits_mut());
            }
        }
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(format!("layer{i}.weights"));
            for (c, m) in l.masks.iter().enumerate() {
                match m.logits().len() {
                    2 => {
                        out.push(format!("layer{i}.mask{c}.rows"));
                        out.push(format!("layer{i}.mask{c}.cols"));
                    }
                    1 => out.push(format!("layer{i}.mask{c}.logits")),
                    _ => {}
                }
            }
        }
        out.push("head.weights".into());
        out.push("head.bias".into());
        out
    }

    /// Records all parameters on `tape`. With `binarized`, masks become
    /// constant binary patterns and their logits are not trainable.
    pub fn bind(&self, tape: &mut Tape, binarized: Option<f64>) -> Result<Bound> {
        let mut params = Vec::new();
        let mut weights = Vec::new();
        let mut masks = Vec::new();
        for l in &self.layers {
            let w = tape.param(l.weights.clone());
            params.push(w);
            weights.push(w);
            let mut layer_masks = Vec::new();
            for m in &l.masks {
                let mv = match binarized {
                    Some(threshold) => {
                        MaskVars::Fixed(tape.constant(m.binarize(threshold)?.pattern))
                    }
                    None => m.bind(tape),
                };
                params.extend(mv.params());
                layer_masks.push(mv);
            }
            masks.push(layer_masks);
        }
        let head_weights = tape.param(self.head_weights.clone());
        let head_bias = tape.param(self.head_bias.clone());
        params.push(head_weights);
        params.push(head_bias);
        Ok(Bound {
            weights,
            masks,
            head_weights,
            head_bias,
            params,
        })
    }

    /// Logits `[N, classes]` for inputs `[N, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let mut x = input;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x);
            }
            x = layer_forward(tape, x, &l.spec, bound.weights[i], &bound.masks[i])?;
        }
        let features = match self.anchor {
            Some([r, c]) => tape.crop(x, r, c)?,
            None => tape.global_avg_pool(x)?,
        };
        let z = tape.matmul(features, bound.head_weights)?;
        tape.add_bias(z, bound.head_bias)
    }

    /// Task loss of `logits` against `labels`.
    pub fn task_loss(
        &self,
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        loss: TaskLoss,
    ) -> Result<Var> {
        match loss {
            TaskLoss::CrossEntropy => tape.cross_entropy(logits, labels),
            TaskLoss::Mse => {
                let k = self.spec.classes;
                let mut target = Tensor::zeros(&[labels.len(), k]);
                for (i, &y) in labels.iter().enumerate() {
                    target.set(&[i, y], 1.0);
                }
                tape.mse(logits, &target)
            }
        }
    }

    /// Class predictions; `binarized` selects hard-mask inference.
    pub fn predict(&self, inputs: &Tensor, binarized: Option<f64>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, binarized)?;
        let x = tape.constant(inputs.clone());
        let logits = self.forward(&mut tape, &bound, x)?;
        let k = self.spec.classes;
        Ok(tape
            .value(logits)
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, data: &DataSet, binarized: Option<f64>) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in chunks(data.len()) {
            let (x, y) = data.batch(&chunk);
            let pred = self.predict(&x, binarized)?;
            correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Mean task loss over the whole dataset with soft masks.
    pub fn dataset_loss(&self, data: &DataSet, loss: TaskLoss) -> Result<f64> {
        let mut total = 0.0;
        for chunk in chunks(data.len()) {
            let (x, y) = data.batch(&chunk);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, None)?;
            let xv = tape.constant(x);
            let logits = self.forward(&mut tape, &bound, xv)?;
            let l = self.task_loss(&mut tape, logits, &y, loss)?;
            total += tape.value(l).item() * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// `(saturated, total)` over all trainable mask entries.
    pub fn saturation(&self) -> (usize, usize) {
        self.layers
            .iter()
            .flat_map(|l| l.masks.iter())
            .map(MaskParams::saturation)
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d))
    }
}

const EVAL_CHUNK: usize = 256;

fn chunks(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(EVAL_CHUNK)
        .map(|c| c.to_vec())
        .collect()
}
