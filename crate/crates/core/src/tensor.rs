//! Dense row-major tensors.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor", "rank must be at least 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("zero-extent dimension in {shape:?}"),
        ));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let numel = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let numel = check_shape(shape)?;
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("normal std {std}: {e}")))?;
        let data = (0..numel).map(|_| T::of(normal.sample(rng))).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = (0..numel).map(|_| T::of(rng.random_range(lo..hi))).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Accumulate `other` into `self` elementwise.
    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Text dump: a `shape d0 d1 ...` header line followed by one line of
    /// space-separated row-major values.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut line = String::from("shape");
        for d in &self.shape {
            write!(line, " {d}").unwrap();
        }
        writeln!(w, "{line}")?;
        line.clear();
        for (i, v) in self.data.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            write!(line, "{v}").unwrap();
        }
        writeln!(w, "{line}")
    }

    /// Inverse of [`Tensor::write_text`].
    pub fn read_text<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::Data(format!("tensor header: {e}")))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("shape") {
            return Err(Error::Data(format!(
                "expected tensor shape header, found {:?}",
                header.trim()
            )));
        }
        let shape = parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Data(format!("bad extent {p:?} in tensor header")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut body = String::new();
        r.read_line(&mut body)
            .map_err(|e| Error::Data(format!("tensor body: {e}")))?;
        let data = body
            .split_whitespace()
            .map(|p| {
                p.parse::<T>()
                    .map_err(|_| Error::Data(format!("bad tensor value {p:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }
}
