//! Dense row-major tensors over f32/f64 and the handful of matrix kernels
//! the rest of the crate is built on.
//!
//! The pipeline trains in f32; oracles and gradient checks run the same
//! code instantiated at f64. Kernels accumulate in a fixed order so results
//! are bit-identical across runs and across worker counts.

use crate::error::{PipelineError, Result};
use crate::util::NormalSource;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Element type of every tensor in the crate.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(PipelineError::Shape(format!(
                "from_vec: dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Standard-normal entries from the given source.
    pub fn randn(dims: &[usize], src: &mut NormalSource) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| T::from_f64(src.next_f64())).collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    /// i.i.d. normal with the given std (used for weight init).
    pub fn randn_scaled(dims: &[usize], std: f64, src: &mut NormalSource) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(src.next_f64() * std))
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen::<f64>() * (hi - lo) + lo))
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn reshaped(&self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(PipelineError::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.dims, dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(PipelineError::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(PipelineError::Shape(format!(
                "sub: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    /// self += other * s, in place.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.dims != other.dims {
            return Err(PipelineError::Shape(format!(
                "add_scaled: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = b.mul_add(s, *a);
        }
        Ok(())
    }

    pub fn norm2(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| {
                let v = x.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// out[m,n] (+)= sum_k a[m,k] * b[k,n]
pub fn gemm_nn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        if !acc {
            for o in out_row.iter_mut() {
                *o = T::zero();
            }
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = aip.mul_add(bv, *o);
            }
        }
    }
}

/// out[m,n] (+)= sum_k a[m,k] * b[n,k]   (i.e. A * B^T with B stored n-by-k)
pub fn gemm_nt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut dot = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                dot = av.mul_add(bv, dot);
            }
            *o = if acc { *o + dot } else { dot };
        }
    }
}

/// out[m,n] (+)= sum_k a[k,m] * b[k,n]   (i.e. A^T * B with A stored k-by-m)
pub fn gemm_tn<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    if !acc {
        for o in out.iter_mut() {
            *o = T::zero();
        }
    }
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &apm) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = apm.mul_add(bv, *o);
            }
        }
    }
}
