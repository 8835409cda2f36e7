//! Dense row-major arrays and flat parameter vectors with named segments.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Dense real array, row-major. Rank 0 (scalar), 1 (vector) or 2 (matrix).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(shape_err("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(r, c, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    /// Rows and columns of a matrix; vectors are treated as a single column.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!("rank > 2 tensors are never constructed"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        // x − x is NaN exactly for non-finite x; summing keeps the loop vectorized
        self.data.iter().fold(0.0, |acc, &x| acc + (x - x)) == 0.0
    }
}

/// A named slice of a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of segments laid out back to back.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a segment and return its index.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let seg = Segment {
            name: name.into(),
            offset: self.total,
            shape,
        };
        self.total += seg.len();
        self.segments.push(seg);
        self.segments.len() - 1
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }

    pub fn find(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// Disjoint, contiguous and covering `[0, total)`.
    pub fn is_valid(&self) -> bool {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        next == self.total
    }
}

/// One flat real vector partitioned into named segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    layout: Layout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if !layout.is_valid() || layout.total_len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "layout covers {} values, vector has {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.find(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }
}
