//! Direct-loop dilated convolution.
//!
//! Everything here is the naive summation, which keeps it usable as a
//! reference for the masked layers. Stride is always 1.
//!
//! In correlation mode `out(p) = Σ_t F(p + l·t)·k(t)`. In convolution mode
//! the kernel is index-reversed first, which reproduces
//! `Σ_{s + l·t = p} F(s)·k(t)` with the output indexed from the first
//! position where the whole kernel overlaps the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding so every output extent equals the input extent.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub padding: Padding,
    pub correlation: bool,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            dilation: 1,
            padding: Padding::Valid,
            correlation: true,
        }
    }
}

impl ConvSpec {
    pub fn dilated(dilation: usize) -> Self {
        ConvSpec {
            dilation,
            ..ConvSpec::default()
        }
    }

    /// Zero padding before the first input element along one axis.
    pub fn pad_before(&self, kernel: usize) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) * self.dilation / 2,
        }
    }

    /// Output extent along one axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.dilation == 0 {
            return Err(Error::invalid("dilation factor must be at least 1"));
        }
        if kernel == 0 {
            return Err(Error::invalid("kernel extent must be positive"));
        }
        let span = (kernel - 1) * self.dilation;
        match self.padding {
            Padding::Same => Ok(input),
            Padding::Valid if input > span => Ok(input - span),
            Padding::Valid => Err(Error::invalid(format!(
                "input extent {input} is smaller than the dilated kernel span {}",
                span + 1
            ))),
        }
    }
}

/// Geometry of one batched 2-D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    /// `input` is `[N, C_in, H, W]`, `weights` is `[C_out, C_in, kh, kw]`.
    pub fn new(input: &[usize], weights: &[usize], spec: &ConvSpec) -> Result<Self> {
        if input.len() != 4 || weights.len() != 4 || input[1] != weights[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: weights.to_vec(),
            });
        }
        let (kh, kw) = (weights[2], weights[3]);
        Ok(Geometry {
            batch: input[0],
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: weights[0],
            kh,
            kw,
            dilation: spec.dilation,
            pad_top: spec.pad_before(kh),
            pad_left: spec.pad_before(kw),
            oh: spec.output_extent(input[2], kh)?,
            ow: spec.output_extent(input[3], kw)?,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.oh, self.ow]
    }

    /// Calls `f(x_index, w_index, y_index)` for every multiply-accumulate term.
    #[inline]
    fn for_each_term(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for ci in 0..g.c_in {
                    let x_base = (n * g.c_in + ci) * g.h * g.w;
                    let w_base = (co * g.c_in + ci) * g.kh * g.kw;
                    let y_base = (n * g.c_out + co) * g.oh * g.ow;
                    for a in 0..g.kh {
                        for b in 0..g.kw {
                            let wi = w_base + a * g.kw + b;
                            for oy in 0..g.oh {
                                let iy = oy + a * g.dilation;
                                if iy < g.pad_top || iy - g.pad_top >= g.h {
                                    continue;
                                }
                                let iy = iy - g.pad_top;
                                for ox in 0..g.ow {
                                    let ix = ox + b * g.dilation;
                                    if ix < g.pad_left || ix - g.pad_left >= g.w {
                                        continue;
                                    }
                                    let ix = ix - g.pad_left;
                                    f(x_base + iy * g.w + ix, wi, y_base + oy * g.ow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.batch * self.c_out * self.oh * self.ow];
        self.for_each_term(|xi, wi, yi| y[yi] += x[xi] * w[wi]);
        y
    }

    pub fn grad_input(&self, dy: &[f64], w: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.batch * self.c_in * self.h * self.w];
        self.for_each_term(|xi, wi, yi| dx[xi] += dy[yi] * w[wi]);
        dx
    }

    pub fn grad_weights(&self, dy: &[f64], x: &[f64]) -> Vec<f64> {
        let mut dw = vec![0.0; self.c_out * self.c_in * self.kh * self.kw];
        self.for_each_term(|xi, wi, yi| dw[wi] += dy[yi] * x[xi]);
        dw
    }
}

/// Reverses every kernel along both spatial axes (last two dimensions).
fn flip_spatial(k: &Tensor) -> Tensor {
    let shape = k.shape();
    let (kh, kw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = k.clone();
    for (dst, src) in out
        .data_mut()
        .chunks_mut(kh * kw)
        .zip(k.data().chunks(kh * kw))
    {
        for a in 0..kh {
            for b in 0..kw {
                dst[a * kw + b] = src[(kh - 1 - a) * kw + (kw - 1 - b)];
            }
        }
    }
    out
}

/// Single-channel 1-D or 2-D dilated convolution.
pub fn conv_direct(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if input.ndim() != kernel.ndim() || !(1..=2).contains(&input.ndim()) {
        return Err(Error::ShapeMismatch {
            op: "conv_direct",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let one_d = input.ndim() == 1;
    let as_4d = |t: &Tensor| {
        let s = t.shape();
        if one_d {
            vec![1, 1, s[0], 1]
        } else {
            vec![1, 1, s[0], s[1]]
        }
    };
    let x = input.reshape(&as_4d(input))?;
    let k = kernel.reshape(&as_4d(kernel))?;
    let k = if spec.correlation {
        k
    } else {
        flip_spatial(&k)
    };
    let geo = Geometry::new(x.shape(), k.shape(), spec)?;
    let y = geo.forward(x.data(), k.data());
    let shape = if one_d {
        vec![geo.oh]
    } else {
        vec![geo.oh, geo.ow]
    };
    Tensor::new(shape, y)
}

/// Multi-channel convolution of `[C_in, H, W]` by `[C_out, C_in, kh, kw]`.
pub fn conv2d_channels(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if input.ndim() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv2d_channels",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let s = input.shape();
    let x = input.reshape(&[1, s[0], s[1], s[2]])?;
    let out = conv2d_batch(&x, weights, spec)?;
    let o = out.shape();
    out.reshape(&[o[1], o[2], o[3]])
}

/// Batched convolution of `[N, C_in, H, W]` by `[C_out, C_in, kh, kw]`.
pub fn conv2d_batch(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let w = if spec.correlation {
        weights.clone()
    } else {
        flip_spatial(weights)
    };
    let geo = Geometry::new(input.shape(), w.shape(), spec)?;
    Tensor::new(geo.output_shape(), geo.forward(input.data(), w.data()))
}

/// Spreads kernel taps `dilation` apart with zeros between them.
pub fn upsample_kernel(kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    if dilation == 0 || !(1..=2).contains(&kernel.ndim()) {
        return Err(Error::invalid(
            "upsample_kernel needs a 1-D/2-D kernel and l >= 1",
        ));
    }
    let grow = |k: usize| (k - 1) * dilation + 1;
    if kernel.ndim() == 1 {
        let mut out = Tensor::zeros(&[grow(kernel.len())]);
        for (t, &v) in kernel.data().iter().enumerate() {
            out.set(&[t * dilation], v);
        }
        return Ok(out);
    }
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let mut out = Tensor::zeros(&[grow(kh), grow(kw)]);
    for a in 0..kh {
        for b in 0..kw {
            out.set(&[a * dilation, b * dilation], kernel.at(&[a, b]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    /// Literal evaluation of `Σ_{s + l·t = p} F(s)·k(t)` over every pair,
    /// shifted so index 0 is the first fully-overlapping position.
    fn literal_1d(f: &[f64], k: &[f64], l: usize) -> Vec<f64> {
        let span = (k.len() - 1) * l;
        let mut out = vec![0.0; f.len() - span];
        for (s, &fs) in f.iter().enumerate() {
            for (t, &kt) in k.iter().enumerate() {
                let p = s + l * t;
                if p >= span && p - span < out.len() {
                    out[p - span] += fs * kt;
                }
            }
        }
        out
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::from_vec(x.to_vec())
    }

    #[test]
    fn standard_pair_sums() {
        let f = v(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let k = v(&[1.0, 1.0]);
        let out = conv_direct(&f, &k, &ConvSpec::default()).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn dilation_two_pair_sums() {
        let f = v(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let k = v(&[1.0, 1.0]);
        let expected = literal_1d(f.data(), k.data(), 2);
        assert_eq!(expected, vec![4.0, 6.0, 8.0]);
        let out = conv_direct(&f, &k, &ConvSpec::dilated(2)).unwrap();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = seeded(1);
        let f = Tensor::randn(&[5, 6], &mut rng);
        for l in 1..4 {
            let out = conv_direct(&f, &Tensor::ones(&[1, 1]), &ConvSpec::dilated(l)).unwrap();
            assert_eq!(out, f);
        }
    }

    #[test]
    fn convolution_mode_matches_literal_sum() {
        let mut rng = seeded(2);
        for l in 1..4 {
            let f = Tensor::randn(&[17], &mut rng);
            let k = Tensor::randn(&[4], &mut rng);
            let spec = ConvSpec {
                correlation: false,
                ..ConvSpec::dilated(l)
            };
            let out = conv_direct(&f, &k, &spec).unwrap();
            let lit = literal_1d(f.data(), k.data(), l);
            for (a, b) in out.data().iter().zip(&lit) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_small_input_is_rejected() {
        let f = v(&[1.0, 2.0, 3.0]);
        let k = v(&[1.0, 1.0]);
        assert!(conv_direct(&f, &k, &ConvSpec::dilated(3)).is_err());
        assert!(conv_direct(&f, &Tensor::ones(&[1, 1]), &ConvSpec::default()).is_err());
        assert!(conv_direct(&f, &k, &ConvSpec::dilated(0)).is_err());
    }

    #[test]
    fn same_padding_keeps_extent() {
        let mut rng = seeded(4);
        let f = Tensor::randn(&[7, 9], &mut rng);
        let k = Tensor::randn(&[3, 3], &mut rng);
        let spec = ConvSpec {
            padding: Padding::Same,
            ..ConvSpec::dilated(2)
        };
        let out = conv_direct(&f, &k, &spec).unwrap();
        assert_eq!(out.shape(), &[7, 9]);
        // Interior positions agree with the valid result shifted by the pad.
        let valid = conv_direct(&f, &k, &ConvSpec::dilated(2)).unwrap();
        for i in 0..valid.shape()[0] {
            for j in 0..valid.shape()[1] {
                assert!((out.at(&[i + 2, j + 2]) - valid.at(&[i, j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = seeded(5);
        let x = Tensor::randn(&[2, 6, 6], &mut rng);
        let out = conv2d_channels(&x, &Tensor::zeros(&[3, 2, 3, 3]), &ConvSpec::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampled_kernel_layout() {
        let k = v(&[1.0, 2.0, 3.0]);
        assert_eq!(
            upsample_kernel(&k, 2).unwrap().data(),
            &[1.0, 0.0, 2.0, 0.0, 3.0]
        );
    }
}
