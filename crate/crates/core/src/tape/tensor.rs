use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                reason: format!("shape {:?} needs {} elements, got {}", shape, numel(&shape), data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
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
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                reason: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element at a multi-index. Panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channel slice `[c, ..]` of a tensor with a leading channel axis.
    pub fn channel(&self, c: usize) -> Tensor {
        let plane = self.data.len() / self.shape[0];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        }
    }

    /// Concatenate along the leading axis. All trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    /// Reverse the row order of every `[.., H, W]` plane.
    /// Mirror the last axis.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = *self.shape.last().expect("flip_horizontal needs rank >= 1");
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            data.extend(row.iter().rev());
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn flip_vertical(&self) -> Tensor {
        let r = self.shape.len();
        assert!(r >= 2, "flip_vertical needs rank >= 2");
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let mut data = Vec::with_capacity(self.data.len());
        for plane in self.data.chunks(h * w) {
            for y in (0..h).rev() {
                data.extend_from_slice(&plane[y * w..(y + 1) * w]);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}
