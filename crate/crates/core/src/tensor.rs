//! Dense row-major tensors and spatial extents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous buffer with an explicit shape. For images the layout is `[batch, channels, spatial..]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per batch entry.
    pub fn sample_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!(
                    "stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Spatial extent of a 2D or 3D field. 2D fields have depth 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    dims: [usize; 3],
    ndim: usize,
}

impl Extent {
    pub fn d2(height: usize, width: usize) -> Self {
        Self {
            dims: [1, height, width],
            ndim: 2,
        }
    }

    pub fn d3(depth: usize, height: usize, width: usize) -> Self {
        Self {
            dims: [depth, height, width],
            ndim: 3,
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [h, w] if h > 0 && w > 0 => Ok(Self::d2(h, w)),
            [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Self::d3(d, h, w)),
            _ => Err(Error::Shape(format!("unsupported spatial extent {dims:?}"))),
        }
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    /// `[depth, height, width]`, depth 1 in 2D.
    pub fn dhw(&self) -> [usize; 3] {
        self.dims
    }

    /// The active spatial extents (2 or 3 of them).
    pub fn dims(&self) -> Vec<usize> {
        self.dims[3 - self.ndim..].to_vec()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let z = idx / (self.dims[1] * self.dims[2]);
        [z, y, x]
    }

    /// Neighbor offsets of the full neighborhood (8 in 2D, 26 in 3D).
    pub fn neighborhood(&self) -> Vec<[isize; 3]> {
        let zr: &[isize] = if self.ndim == 3 { &[-1, 0, 1] } else { &[0] };
        let mut out = Vec::new();
        for &dz in zr {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if (dz, dy, dx) != (0, 0, 0) {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }

    pub fn offset(&self, c: [usize; 3], d: [isize; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as isize + d[a];
            if v < 0 || v >= self.dims[a] as isize {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out[0], out[1], out[2]))
    }
}
