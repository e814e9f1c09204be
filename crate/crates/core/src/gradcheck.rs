//! Finite-difference verification of every differentiable operation.
//!
//! Each [`GradCase`] draws its inputs from a seed and runs
//! [`grad_check`]. The suite runs every case over seeds `0..10` and fails on
//! the first maximum relative error at or above [`TOLERANCE`].

use std::fmt;

use crate::autograd::{grad_check, GradCheck, Tape, Var, DEFAULT_EPS};
use crate::constraint::{
    barrier_loss, barrier_var, constraint_value, total_loss, Axis, ConstraintSpec, MaskRef,
};
use crate::conv::{ConvSpec, Padding};
use crate::dilation::{layer_forward, masked_weights, LayerSpec, MaskMode, MaskVars};
use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;
pub const SEEDS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Ops,
    Conv,
    Barrier,
    Separable,
    General,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    All,
    Ops,
    Conv,
    Barrier,
    Separable,
    General,
}

impl Scope {
    pub fn includes(self, g: Group) -> bool {
        matches!(
            (self, g),
            (Scope::All, _)
                | (Scope::Ops, Group::Ops)
                | (Scope::Conv, Group::Conv)
                | (Scope::Barrier, Group::Barrier)
                | (Scope::Separable, Group::Separable)
                | (Scope::General, Group::General)
        )
    }
}

type CaseFn = Box<dyn Fn(u64) -> Result<GradCheck> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    pub group: Group,
    run: CaseFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        group: Group,
        run: impl Fn(u64) -> Result<GradCheck> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            group,
            run: Box::new(run),
        }
    }

    pub fn run(&self, seed: u64) -> Result<GradCheck> {
        (self.run)(seed)
    }
}

impl fmt::Debug for GradCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradCase")
            .field("name", &self.name)
            .finish()
    }
}

fn rng_for(seed: u64) -> Rng {
    rng::derive(seed, 0x6C)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Shorthand for a case whose inputs are random normals of fixed shapes.
fn simple<F>(name: &str, group: Group, shapes: Vec<Vec<usize>>, f: F) -> GradCase
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Copy + Send + Sync + 'static,
{
    GradCase::new(name, group, move |seed| {
        let mut rng = rng_for(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
        grad_check(f, &inputs, DEFAULT_EPS)
    })
}

/// Weighted sum `Σ c_i x_i` with fixed pseudo-random `c`, so that every
/// output coordinate contributes a distinct adjoint.
fn probe(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let c: Vec<f64> = (0..n)
        .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
        .collect();
    let c = tape.constant(Tensor::new(shape, c)?);
    let p = tape.mul(x, c)?;
    Ok(tape.sum(p))
}

fn layer(c_in: usize, c_out: usize, y: usize, p: usize, mode: MaskMode) -> LayerSpec {
    LayerSpec {
        in_channels: c_in,
        out_channels: c_out,
        field: [y, y],
        budget: [p, p],
        mask: mode,
        pattern: None,
        padding: Padding::Valid,
        init_scale: None,
    }
}

/// Masks for `c_out` channels taken from `vars` starting at `start`.
fn mask_vars(vars: &[Var], start: usize, c_out: usize, mode: MaskMode) -> Vec<MaskVars> {
    (0..c_out)
        .map(|c| match mode {
            MaskMode::Separable => MaskVars::Separable {
                rows: vars[start + c],
                cols: vars[start + c_out + c],
            },
            _ => MaskVars::General(vars[start + c]),
        })
        .collect()
}

fn mask_shapes(c_out: usize, y: usize, mode: MaskMode) -> Vec<Vec<usize>> {
    match mode {
        MaskMode::Separable => vec![vec![y]; 2 * c_out],
        _ => vec![vec![y, y]; c_out],
    }
}

fn constraint_set(
    c_out: usize,
    y: usize,
    p: usize,
    mode: MaskMode,
    alpha: f64,
) -> Vec<ConstraintSpec> {
    let mut out = Vec::new();
    for channel in 0..c_out {
        let axes: &[Axis] = match mode {
            MaskMode::Separable => &[Axis::Rows, Axis::Cols],
            _ => &[Axis::Full],
        };
        for &axis in axes {
            let (size, budget) = match axis {
                Axis::Full => (y * y, p * p),
                _ => (y, p),
            };
            let target = MaskRef {
                layer: 0,
                channel,
                axis,
            };
            out.push(
                ConstraintSpec::new(target, budget as f64, (size - budget) as f64, alpha)
                    .expect("valid constraint"),
            );
        }
    }
    out
}

/// Layer-level case: probe of `layer_forward` with respect to input,
/// weights and every mask logit.
fn layer_case(mode: MaskMode, group: Group) -> GradCase {
    let name = format!("layer_forward_{}", mode.name());
    GradCase::new(name, group, move |seed| {
        let (c_in, c_out, y, p) = (3, 4, 7, 3);
        let spec = layer(c_in, c_out, y, p, mode);
        let mut rng = rng_for(seed);
        let mut inputs = vec![
            randn(&[2, c_in, 9, 9], &mut rng),
            randn(&spec.weight_shape(), &mut rng),
        ];
        inputs.extend(
            mask_shapes(c_out, y, mode)
                .iter()
                .map(|s| randn(s, &mut rng)),
        );
        grad_check(
            |tape, v| {
                let masks = mask_vars(v, 2, c_out, mode);
                let out = layer_forward(tape, v[0], &spec, v[1], &masks)?;
                probe(tape, out)
            },
            &inputs,
            DEFAULT_EPS,
        )
    })
}

/// Full training objective `CE + μ·Σ b(f)` through one masked layer,
/// global pooling and a dense head.
fn objective_case(mode: MaskMode, group: Group) -> GradCase {
    let name = format!("objective_{}", mode.name());
    GradCase::new(name, group, move |seed| {
        let (c_in, c_out, y, p, classes) = (3, 4, 7, 3, 2);
        let spec = layer(c_in, c_out, y, p, mode);
        let mut rng = rng_for(seed);
        let alpha = [-0.1, 0.0, 0.05, 0.1][(seed % 4) as usize];
        let mu = 0.5 + seed as f64 * 0.25;
        let constraints = constraint_set(c_out, y, p, mode, alpha);
        let labels = vec![0, 1, 1];
        let mut inputs = vec![
            randn(&[3, c_in, 9, 9], &mut rng),
            randn(&spec.weight_shape(), &mut rng).scalar_mul(0.3),
        ];
        inputs.extend(
            mask_shapes(c_out, y, mode)
                .iter()
                .map(|s| randn(s, &mut rng)),
        );
        inputs.push(randn(&[c_out, classes], &mut rng));
        inputs.push(randn(&[classes], &mut rng));
        let head = inputs.len() - 2;
        grad_check(
            |tape, v| {
                let masks = mask_vars(v, 2, c_out, mode);
                let fmap = layer_forward(tape, v[0], &spec, v[1], &masks)?;
                let feats = tape.global_avg_pool(fmap)?;
                let z = tape.matmul(feats, v[head])?;
                let logits = tape.add_bias(z, v[head + 1])?;
                let task = tape.cross_entropy(logits, &labels)?;
                let lc = barrier_loss(tape, &constraints, &[masks])?;
                total_loss(tape, task, lc, mu)
            },
            &inputs,
            DEFAULT_EPS,
        )
    })
}

/// Every case in the suite.
pub fn standard_cases() -> Vec<GradCase> {
    use Group::*;
    let mut cases = vec![
        simple("add", Ops, vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y)
        }),
        simple("sub", Ops, vec![vec![3, 4], vec![3, 4]], |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y)
        }),
        simple(
            "elementwise_mul",
            Ops,
            vec![vec![4, 3], vec![4, 3]],
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y)
            },
        ),
        simple("scalar_mul", Ops, vec![vec![5]], |t, v| {
            let y = t.scalar_mul(v[0], -1.7);
            probe(t, y)
        }),
        simple("add_scalar", Ops, vec![vec![5]], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        }),
        simple("mean", Ops, vec![vec![2, 3]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
        simple("sigmoid", Ops, vec![vec![6, 6]], |t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y)
        }),
        simple("exp", Ops, vec![vec![6]], |t, v| {
            let y = t.exp(v[0]);
            probe(t, y)
        }),
        GradCase::new("relu", Ops, |seed| {
            let mut rng = rng_for(seed);
            // Keep inputs away from the kink at zero.
            let x = randn(&[4, 5], &mut rng).map(|v| if v.abs() < 1e-3 { v + 0.01 } else { v });
            grad_check(
                |t, v| {
                    let y = t.relu(v[0]);
                    probe(t, y)
                },
                &[x],
                DEFAULT_EPS,
            )
        }),
        simple("matmul", Ops, vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y)
        }),
        simple("outer", Ops, vec![vec![5], vec![4]], |t, v| {
            let y = t.outer(v[0], v[1])?;
            probe(t, y)
        }),
        simple("diag_embed", Ops, vec![vec![5]], |t, v| {
            let y = t.diag_embed(v[0])?;
            probe(t, y)
        }),
        simple(
            "stack",
            Ops,
            vec![vec![2, 3], vec![2, 3], vec![2, 3]],
            |t, v| {
                let y = t.stack(v)?;
                probe(t, y)
            },
        ),
        simple("reshape", Ops, vec![vec![2, 6]], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            probe(t, y)
        }),
        simple("add_bias", Ops, vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y)
        }),
        simple("cross_entropy", Ops, vec![vec![4, 3]], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        simple("mse", Ops, vec![vec![3, 2]], |t, v| {
            let target = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, -0.5]])?;
            t.mse(v[0], &target)
        }),
        simple(
            "diag_product",
            Ops,
            vec![vec![6], vec![6, 6], vec![6]],
            |t, v| {
                let l = t.diag_embed(v[0])?;
                let r = t.diag_embed(v[2])?;
                let lw = t.matmul(l, v[1])?;
                let y = t.matmul(lw, r)?;
                probe(t, y)
            },
        ),
        simple(
            "conv2d",
            Conv,
            vec![vec![2, 3, 8, 7], vec![4, 3, 3, 2]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], &ConvSpec::default())?;
                probe(t, y)
            },
        ),
        simple(
            "conv2d_dilated_same",
            Conv,
            vec![vec![1, 2, 9, 9], vec![3, 2, 3, 3]],
            |t, v| {
                let spec = ConvSpec {
                    padding: Padding::Same,
                    ..ConvSpec::dilated(2)
                };
                let y = t.conv2d(v[0], v[1], &spec)?;
                probe(t, y)
            },
        ),
        simple(
            "channel_mask_mul",
            Conv,
            vec![vec![4, 3, 7, 7], vec![4, 7, 7]],
            |t, v| {
                let y = t.channel_mask_mul(v[0], v[1])?;
                probe(t, y)
            },
        ),
        simple("crop", Conv, vec![vec![2, 3, 5, 4]], |t, v| {
            let y = t.crop(v[0], 3, 1)?;
            probe(t, y)
        }),
        simple("global_avg_pool", Conv, vec![vec![2, 3, 5, 4]], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            probe(t, y)
        }),
        GradCase::new("barrier", Barrier, |seed| {
            let mut rng = rng_for(seed);
            let x = randn(&[1], &mut rng).scalar_mul(0.5);
            let alpha = [-0.1, 0.0, 0.1][(seed % 3) as usize];
            grad_check(|t, v| Ok(barrier_var(t, v[0], alpha)), &[x], DEFAULT_EPS)
        }),
        GradCase::new("constraint_value", Barrier, |seed| {
            let mut rng = rng_for(seed);
            let logits = randn(&[7, 7], &mut rng);
            let spec = constraint_set(1, 7, 3, MaskMode::General, 0.0).remove(0);
            grad_check(
                |t, v| constraint_value(t, &MaskVars::General(v[0]), &spec),
                &[logits],
                DEFAULT_EPS,
            )
        }),
        GradCase::new("barrier_loss", Barrier, |seed| {
            let mut rng = rng_for(seed);
            let inputs: Vec<Tensor> = (0..4).map(|_| randn(&[7], &mut rng)).collect();
            let constraints = constraint_set(2, 7, 3, MaskMode::Separable, 0.1);
            grad_check(
                |t, v| {
                    let masks = mask_vars(v, 0, 2, MaskMode::Separable);
                    barrier_loss(t, &constraints, &[masks])
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        simple("total_loss", Barrier, vec![vec![1], vec![1]], |t, v| {
            total_loss(t, v[0], v[1], 2.5)
        }),
        GradCase::new("masked_weights_separable", Separable, |seed| {
            let mut rng = rng_for(seed);
            let inputs = vec![
                randn(&[7, 7], &mut rng),
                randn(&[7], &mut rng),
                randn(&[7], &mut rng),
            ];
            grad_check(
                |t, v| {
                    let m = MaskVars::Separable {
                        rows: v[1],
                        cols: v[2],
                    };
                    let y = masked_weights(t, v[0], &m)?;
                    probe(t, y)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
        GradCase::new("masked_weights_general", General, |seed| {
            let mut rng = rng_for(seed);
            let inputs = vec![randn(&[7, 7], &mut rng), randn(&[7, 7], &mut rng)];
            grad_check(
                |t, v| {
                    let y = masked_weights(t, v[0], &MaskVars::General(v[1]))?;
                    probe(t, y)
                },
                &inputs,
                DEFAULT_EPS,
            )
        }),
    ];
    cases.push(layer_case(MaskMode::Separable, Group::Separable));
    cases.push(layer_case(MaskMode::General, Group::General));
    cases.push(objective_case(MaskMode::Separable, Group::Separable));
    cases.push(objective_case(MaskMode::General, Group::General));
    cases
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub name: String,
    pub max_error: f64,
    pub worst_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub name: String,
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub outcomes: Vec<CaseOutcome>,
    pub failures: Vec<Failure>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `cases` selected by `scope` over seeds `0..seeds`.
pub fn run_suite(cases: &[GradCase], scope: Scope, seeds: u64) -> SuiteReport {
    let mut report = SuiteReport::default();
    for case in cases.iter().filter(|c| scope.includes(c.group)) {
        let mut outcome = CaseOutcome {
            name: case.name.clone(),
            max_error: 0.0,
            worst_seed: 0,
        };
        for seed in 0..seeds {
            match case.run(seed) {
                Ok(r) => {
                    if r.max_error > outcome.max_error {
                        outcome.max_error = r.max_error;
                        outcome.worst_seed = seed;
                    }
                    if !(r.max_error < TOLERANCE) {
                        report.failures.push(Failure {
                            name: case.name.clone(),
                            seed,
                            detail: format!(
                                "max relative error {:.3e} at input {} coordinate {}",
                                r.max_error, r.worst.0, r.worst.1
                            ),
                        });
                    }
                }
                Err(e) => {
                    outcome.max_error = f64::INFINITY;
                    report.failures.push(Failure {
                        name: case.name.clone(),
                        seed,
                        detail: e.to_string(),
                    });
                }
            }
        }
        report.outcomes.push(outcome);
    }
    report
}
