use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Scalar;
use crate::error::{Error, Result};

/// Extent of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::shape(format!("every dimension must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense 4-D array in row-major (b, c, h, w) order with an optional
/// accumulated gradient of the same shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::NAME)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Builds a tensor by evaluating `f(b, c, y, x)` at every site.
    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Zero-mean Gaussian entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Shape>, std: f64, rng: &mut R) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor {}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.c + c) * s.h + y) * s.w + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::from_f64(v.as_f64())).collect()),
        }
    }

    /// Sequential row-major sum, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v.as_f64())
    }

    /// Sequential row-major inner product, accumulated in `f64`.
    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("dot of {} and {}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a.as_f64() * b.as_f64()))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Copy of batch item `b` as a 1-item tensor.
    pub fn batch_item(&self, b: usize) -> Tensor<T> {
        let s = self.shape;
        let per = s.c * s.h * s.w;
        Tensor::from_parts(Shape::new(1, s.c, s.h, s.w), self.data[b * per..(b + 1) * per].to_vec())
    }

    /// Copy of channel `c` across the batch.
    pub fn channel(&self, c: usize) -> Tensor<T> {
        let s = self.shape;
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * plane);
        for b in 0..s.n {
            let start = (b * s.c + c) * plane;
            data.extend_from_slice(&self.data[start..start + plane]);
        }
        Tensor::from_parts(Shape::new(s.n, 1, s.h, s.w), data)
    }

    /// Stacks single-channel tensors of equal shape along the channel axis.
    pub fn stack_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::shape("no channels to stack"))?;
        let s = first.shape;
        if s.c != 1 || parts.iter().any(|p| p.shape != s) {
            return Err(Error::shape("channel stacking needs equal single-channel tensors"));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.numel() * parts.len());
        for b in 0..s.n {
            for p in parts {
                data.extend_from_slice(&p.data[b * plane..(b + 1) * plane]);
            }
        }
        Ok(Tensor::from_parts(Shape::new(s.n, parts.len(), s.h, s.w), data))
    }

    /// Concatenates tensors of equal (c, h, w) along the batch axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::shape("no tensors to concatenate"))?;
        let s = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let ps = p.shape;
            if (ps.c, ps.h, ps.w) != (s.c, s.h, s.w) {
                return Err(Error::shape(format!("cannot concatenate {ps} with {s}")));
            }
            n += ps.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_parts(Shape::new(n, s.c, s.h, s.w), data))
    }
}
