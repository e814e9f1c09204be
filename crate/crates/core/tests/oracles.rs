use gendilate::autograd::{grad_check, Tape, DEFAULT_EPS};
use gendilate::conv::{conv2d_channels, conv_direct, ConvSpec, Padding};
use gendilate::experiment::{self, ExperimentConfig, Split};
use gendilate::rng::seeded;
use gendilate::synth::{gen_lag_task, lag_bayes_rule, LagTaskParams};
use gendilate::Tensor;

/// Multi-channel conv is the per-(out, in) single-channel conv, summed over
/// input channels.
#[test]
fn channel_conv_decomposes() {
    let mut rng = seeded(11);
    for padding in [Padding::Valid, Padding::Same] {
        for dilation in 1..=3 {
            let spec = ConvSpec {
                dilation,
                padding,
                correlation: true,
            };
            let x = Tensor::randn(&[3, 11, 10], &mut rng);
            let w = Tensor::randn(&[2, 3, 3, 3], &mut rng);
            let got = conv2d_channels(&x, &w, &spec).unwrap();
            for o in 0..2 {
                let mut acc: Option<Tensor> = None;
                for i in 0..3 {
                    let xi = Tensor::new(vec![11, 10], x.data()[i * 110..(i + 1) * 110].to_vec())
                        .unwrap();
                    let wi = Tensor::new(
                        vec![3, 3],
                        w.data()[(o * 3 + i) * 9..(o * 3 + i + 1) * 9].to_vec(),
                    )
                    .unwrap();
                    let y = conv_direct(&xi, &wi, &spec).unwrap();
                    acc = Some(match acc {
                        None => y,
                        Some(a) => a.add(&y).unwrap(),
                    });
                }
                let acc = acc.unwrap();
                let n = acc.len();
                for (a, b) in got.data()[o * n..(o + 1) * n].iter().zip(acc.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}

/// Convolution mode on a symmetric kernel agrees with correlation mode.
#[test]
fn symmetric_kernel_mode_invariance() {
    let mut rng = seeded(5);
    let x = Tensor::randn(&[9, 9], &mut rng);
    let k = Tensor::from_rows(&[[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]).unwrap();
    let corr = conv_direct(&x, &k, &ConvSpec::dilated(2)).unwrap();
    let conv = conv_direct(
        &x,
        &k,
        &ConvSpec {
            correlation: false,
            ..ConvSpec::dilated(2)
        },
    )
    .unwrap();
    assert_eq!(corr, conv);
}

/// Logistic regression on the lag features, trained with the tape, reaches
/// the accuracy the generator's rule implies.
#[test]
fn logistic_sanity_on_lag_features() {
    let params = LagTaskParams {
        n: 400,
        seed: 9,
        ..LagTaskParams::default()
    };
    let data = gen_lag_task(&params).unwrap();
    let [_, h, w] = data.sample_shape();
    let x = data.inputs.reshape(&[data.len(), h * w]).unwrap();
    let mut weights = Tensor::zeros(&[h * w, 2]);
    let mut bias = Tensor::zeros(&[2]);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let wv = tape.param(weights.clone());
        let bv = tape.param(bias.clone());
        let xv = tape.constant(x.clone());
        let z = tape.matmul(xv, wv).unwrap();
        let z = tape.add_bias(z, bv).unwrap();
        let loss = tape.cross_entropy(z, &data.labels).unwrap();
        tape.backward(loss).unwrap();
        weights = weights
            .sub(&tape.grad(wv).unwrap().scalar_mul(0.5))
            .unwrap();
        bias = bias.sub(&tape.grad(bv).unwrap().scalar_mul(0.5)).unwrap();
    }
    let logits = x.matmul(&weights).unwrap();
    let correct = (0..data.len())
        .filter(|&i| {
            let pred = usize::from(
                logits.at(&[i, 1]) + bias.data()[1] > logits.at(&[i, 0]) + bias.data()[0],
            );
            pred == data.labels[i]
        })
        .count();
    let acc = correct as f64 / data.len() as f64;
    assert!(acc >= 0.95, "train accuracy {acc}");
    let bayes = (0..data.len())
        .filter(|&i| lag_bayes_rule(&params, data.sample(i)) == data.labels[i])
        .count();
    assert_eq!(bayes, data.len());
}

#[test]
fn cross_entropy_matches_closed_form() {
    let logits = Tensor::from_rows(&[[0.3, -1.2], [2.0, 0.5]]).unwrap();
    let labels = [1usize, 0];
    let mut tape = Tape::new();
    let v = tape.param(logits.clone());
    let l = tape.cross_entropy(v, &labels).unwrap();
    let want = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = [logits.at(&[i, 0]), logits.at(&[i, 1])];
            (row[0].exp() + row[1].exp()).ln() - row[y]
        })
        .sum::<f64>()
        / 2.0;
    assert!((tape.value(l).item() - want).abs() < 1e-14);
    let r = grad_check(
        |t, v| t.cross_entropy(v[0], &labels),
        &[logits],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(r.max_error < 1e-8);
}

#[test]
fn training_is_deterministic_and_eval_reproduces() {
    let mut cfg = ExperimentConfig::lag_default(4);
    if let experiment::TaskConfig::Lag {
        n_train, n_test, ..
    } = &mut cfg.task
    {
        *n_train = 300;
        *n_test = 100;
    }
    cfg.train.epochs = 4;
    let a = experiment::run(&cfg).unwrap();
    let b = experiment::run(&cfg).unwrap();
    assert_eq!(a.report.metrics_csv(), b.report.metrics_csv());
    assert_eq!(a.summary.to_json(), b.summary.to_json());
    let acc = experiment::evaluate_summary(&a.summary).unwrap();
    assert_eq!(acc, a.summary.final_record.val_accuracy);
    let other = cfg.task.generate(5, Split::Train).unwrap();
    let same = cfg.task.generate(4, Split::Train).unwrap();
    assert_ne!(other.inputs, same.inputs);
}
