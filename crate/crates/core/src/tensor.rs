//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is an immutable value: every operation returns a new tensor.
//! There is no broadcasting and no strided view; shapes must match exactly
//! where an operation says so.

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {} values but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![value; numel(shape)]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.gen_range(lo..=hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| {
            assert!(i < n, "index {i} out of bounds for extent {n}");
            acc * n + i
        })
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn elementwise_mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "elementwise_mul", |a, b| a * b)
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map(sigmoid)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.ndim() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs a 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Square matrix with `self` (1-D) on the diagonal.
    pub fn diag_embed(&self) -> Result<Tensor> {
        if self.ndim() != 1 {
            return Err(Error::invalid(format!(
                "diag_embed needs a 1-D tensor, got {:?}",
                self.shape
            )));
        }
        let y = self.len();
        let mut out = Tensor::zeros(&[y, y]);
        for (i, &v) in self.data.iter().enumerate() {
            out.data[i * y + i] = v;
        }
        Ok(out)
    }

    /// `out[i][j] = u[i] * v[j]` for 1-D `u` and `v`.
    pub fn outer_product(u: &Tensor, v: &Tensor) -> Result<Tensor> {
        if u.ndim() != 1 || v.ndim() != 1 {
            return Err(Error::ShapeMismatch {
                op: "outer_product",
                left: u.shape.clone(),
                right: v.shape.clone(),
            });
        }
        let data = u
            .data
            .iter()
            .flat_map(|&a| v.data.iter().map(move |&b| a * b))
            .collect();
        Tensor::new(vec![u.len(), v.len()], data)
    }

    /// Writes the tensor in the text interchange format: the shape on the
    /// first line, then one line per innermost row, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dims: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        s.push_str(&dims.join(" "));
        s.push('\n');
        let row = *self.shape.last().expect("non-empty shape");
        for chunk in self.data.chunks(row) {
            let mut first = true;
            for v in chunk {
                if !first {
                    s.push(' ');
                }
                first = false;
                write!(s, "{}", format_sig17(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Tensor> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("missing shape line".into()))?;
        let shape = header
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("bad extent `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = lines
            .flat_map(|l| l.split_whitespace())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad value `{t}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Formats with exactly 17 significant digits in scientific notation.
pub fn format_sig17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Logistic sigmoid, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn elementwise_mul_examples() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(
            a.elementwise_mul(&eye).unwrap(),
            t2(&[&[1.0, 0.0], &[0.0, 4.0]])
        );
        assert_eq!(a.elementwise_mul(&Tensor::ones(&[2, 2])).unwrap(), a);
        let b = t2(&[&[0.5, 2.0]]);
        let c = t2(&[&[4.0, 0.25]]);
        assert_eq!(b.elementwise_mul(&c).unwrap(), t2(&[&[2.0, 0.5]]));
    }

    #[test]
    fn elementwise_mul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        let msg = a.elementwise_mul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_examples() {
        let w = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let eye = Tensor::ones(&[2]).diag_embed().unwrap();
        assert_eq!(eye.matmul(&w).unwrap(), w);
        let d = Tensor::from_vec(vec![1.0, 0.0]).diag_embed().unwrap();
        assert_eq!(d.matmul(&w).unwrap(), t2(&[&[5.0, 6.0], &[0.0, 0.0]]));
        let r = t2(&[&[1.0, 2.0]]).matmul(&t2(&[&[3.0], &[4.0]])).unwrap();
        assert_eq!(r, t2(&[&[11.0]]));
        assert!(w.matmul(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        let big = sigmoid(500.0);
        assert!((big - 1.0).abs() <= f64::EPSILON && big.is_finite());
        assert!(sigmoid(-500.0) >= 0.0 && sigmoid(-500.0).is_finite());
        for x in [-3.0, -0.2, 0.7, 12.0] {
            assert!((sigmoid(-x) - (1.0 - sigmoid(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn diag_embed_examples() {
        let d = Tensor::from_vec(vec![1.0, 0.0, 1.0]).diag_embed().unwrap();
        assert_eq!(
            d,
            t2(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]])
        );
        let eye = Tensor::ones(&[4]).diag_embed().unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(eye.at(&[i, j]), if i == j { 1.0 } else { 0.0 });
            }
        }
        let d = Tensor::from_vec(vec![0.3, 0.7]).diag_embed().unwrap();
        assert_eq!(d, t2(&[&[0.3, 0.0], &[0.0, 0.7]]));
    }

    #[test]
    fn outer_product_entries() {
        let mut rng = seeded(3);
        let u = Tensor::randn(&[4], &mut rng);
        let v = Tensor::randn(&[6], &mut rng);
        let o = Tensor::outer_product(&u, &v).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(o.at(&[i, j]), u.data()[i] * v.data()[j]);
            }
        }
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn text_format_layout() {
        let t = t2(&[&[1.0, 0.5], &[-2.0, 0.1]]);
        let s = t.to_text();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("2 2"));
        assert_eq!(
            lines.next(),
            Some("1.0000000000000000e0 5.0000000000000000e-1")
        );
        assert_eq!(Tensor::from_text(&s).unwrap(), t);
    }

    #[test]
    fn text_parse_errors() {
        assert!(Tensor::from_text("").is_err());
        assert!(Tensor::from_text("2 2\n1 2 3\n").is_err());
        assert!(Tensor::from_text("2\nx y\n").is_err());
    }
}
