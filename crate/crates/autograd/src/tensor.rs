use crate::{shape_err, Result, Scalar};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("expected rank-4 NCHW tensor, got {:?}", self.shape)),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(shape_err!("expected rank-2 tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.to_f64_lossy())).collect(),
        }
    }

    /// Item `index` along the batch axis, keeping a leading axis of 1.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        self.batch_range(index, index + 1)
    }

    pub fn batch_range(&self, start: usize, end: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| shape_err!("rank-0 tensor"))?;
        if start > end || end > n {
            return Err(shape_err!("batch range {start}..{end} out of bounds for {n}"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * inner..end * inner].to_vec() })
    }

    /// Channels `start..end` of an NCHW tensor.
    pub fn channel_range(&self, start: usize, end: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if start > end || end > c {
            return Err(shape_err!("channel range {start}..{end} out of bounds for {c}"));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * hw);
        for b in 0..n {
            data.extend_from_slice(&self.data[(b * c + start) * hw..(b * c + end) * hw]);
        }
        Ok(Self { shape: vec![n, end - start, h, w], data })
    }

    /// Concatenates rank-4 tensors along `axis` (0 = batch, 1 = channel).
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let (n, _, h, w) = first.dims4()?;
        match axis {
            0 => {
                let mut total = 0;
                for p in parts {
                    let (pn, pc, ph, pw) = p.dims4()?;
                    if (pc, ph, pw) != (first.shape[1], h, w) {
                        return Err(shape_err!("batch concat of {:?} and {:?}", first.shape, p.shape));
                    }
                    total += pn;
                }
                let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
                Ok(Self { shape: vec![total, first.shape[1], h, w], data })
            }
            1 => {
                let mut channels = 0;
                for p in parts {
                    let (pn, pc, ph, pw) = p.dims4()?;
                    if (pn, ph, pw) != (n, h, w) {
                        return Err(shape_err!("channel concat of {:?} and {:?}", first.shape, p.shape));
                    }
                    channels += pc;
                }
                let hw = h * w;
                let mut data = Vec::with_capacity(n * channels * hw);
                for b in 0..n {
                    for p in parts {
                        let pc = p.shape[1];
                        data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
                    }
                }
                Ok(Self { shape: vec![n, channels, h, w], data })
            }
            _ => Err(shape_err!("concat axis {axis} unsupported")),
        }
    }

    /// Maximum absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }
}
