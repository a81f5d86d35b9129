//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// Dense N-dimensional array stored row-major.
///
/// Every dimension is positive and `shape.iter().product() == data.len()`.
/// A tensor with an empty shape holds a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "zero-sized dimension in {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, x) in t.data.iter_mut().enumerate() {
            *x = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Unpacks a rank-4 `[B, C, H, W]` shape.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {:?}", self.shape))),
        }
    }

    /// Unpacks a rank-5 `[B, T, C, H, W]` shape.
    pub fn dims5(&self, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, t, c, h, w] => Ok((b, t, c, h, w)),
            _ => Err(Error::shape(op, format!("expected [B,T,C,H,W], got {:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Frame `t` of a `[B, T, C, H, W]` tensor as `[B, C, H, W]`.
    pub fn frame(&self, t: usize) -> Result<Tensor> {
        let (b, tt, c, h, w) = self.dims5("frame")?;
        if t >= tt {
            return Err(Error::invalid("frame", format!("index {t} out of {tt} frames")));
        }
        let per = c * h * w;
        let mut data = Vec::with_capacity(b * per);
        for bi in 0..b {
            let off = (bi * tt + t) * per;
            data.extend_from_slice(&self.data[off..off + per]);
        }
        Tensor::new(vec![b, c, h, w], data)
    }

    /// Stacks `[B, C, H, W]` frames into `[B, T, C, H, W]`.
    pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("stack_frames", "no frames"))?;
        let (b, c, h, w) = first.dims4("stack_frames")?;
        let per = c * h * w;
        let t = frames.len();
        let mut data = vec![0.0; b * t * per];
        for (ti, f) in frames.iter().enumerate() {
            first.expect_same_shape(f, "stack_frames")?;
            for bi in 0..b {
                let dst = (bi * t + ti) * per;
                data[dst..dst + per].copy_from_slice(&f.data[bi * per..(bi + 1) * per]);
            }
        }
        Tensor::new(vec![b, t, c, h, w], data)
    }

    /// Sequences `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&1);
        if start >= end || end > n {
            return Err(Error::invalid("slice_batch", format!("{start}..{end} out of {n}")));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * per..end * per].to_vec())
    }

    /// Gathers sequences by index along the leading axis.
    pub fn gather_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let n = *self.shape.first().unwrap_or(&1);
        let per = self.data.len() / n;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid("gather_batch", format!("index {i} out of {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn frame_and_stack_are_inverse() {
        let x = Tensor::from_fn(&[2, 3, 1, 2, 2], |i| i as f64);
        let frames: Vec<_> = (0..3).map(|t| x.frame(t).unwrap()).collect();
        assert_eq!(Tensor::stack_frames(&frames).unwrap(), x);
    }

    #[test]
    fn gather_picks_sequences() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = x.gather_batch(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
    }
}
