use std::sync::Arc;

use crate::{Error, Result};

/// Handle tying a tensor to the tape record that produced it.
///
/// The tape id guards against mixing tensors across tapes; node indices are
/// only meaningful within the tape that issued them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

/// Dense n-dimensional value, row-major, 64-bit floats.
///
/// Cloning is cheap (the value buffer is shared). A tensor is immutable once
/// built; tape-attached tensors additionally carry the [`NodeRef`] of the
/// operation that produced them.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::ShapeLenMismatch {
                shape: shape.to_vec(),
                values: values.len(),
                expected,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: Arc::new(vec![0.0; len]),
            node: None,
        }
    }

    /// 2-D tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::InvalidShape {
                    op: "from_rows",
                    shape: vec![rows.len(), row.len()],
                    detail: format!("ragged row (expected {cols} columns)"),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(&[rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True for tensors holding exactly one value (shape `[]` or `[1]`, ...).
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar shape {:?}", self.shape);
        self.values[0]
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Drop tape attachment, keeping the value.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    pub(crate) fn attached(shape: Vec<usize>, values: Vec<f64>, node: NodeRef) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values: Arc::new(values),
            node: Some(node),
        }
    }

    /// Number of rows for tensors treated as matrices (first dim; 1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidShape {
            op,
            shape: other.to_vec(),
            detail: "expected a 2-D tensor".into(),
        }),
    }
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        other => Err(Error::InvalidShape {
            op,
            shape: other.to_vec(),
            detail: "expected a 3-D tensor".into(),
        }),
    }
}
