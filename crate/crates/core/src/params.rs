//! Flat parameter vectors and the layouts that map them onto model layers.
//!
//! Every protocol quantity (global parameters, client updates, noise) is a
//! [`ParamVector`]: a finite `f64` sequence tagged with the [`LayoutId`] of the
//! model it belongs to. Layers are flattened in declaration order, each layer
//! row-major (last axis fastest). Reductions always sum left to right so that
//! results are bit-reproducible across runs.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("non-finite parameter at index {index}")]
    NonFinite { index: usize },
    #[error("layout mismatch: expected {expected}, found {found}")]
    LayoutMismatch { expected: LayoutId, found: LayoutId },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("layer {index} does not match layout: {reason}")]
    LayerMismatch { index: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ParamError>;

/// Opaque identifier of a [`LayoutSpec`]; equal layouts have equal ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayoutId(pub u64);

impl fmt::Display for LayoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerDesc {
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

/// Ordered, contiguous layer descriptors covering a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSpec {
    layers: Vec<LayerDesc>,
    len: usize,
    id: LayoutId,
}

impl LayoutSpec {
    /// Builds a layout from `(name, shape)` pairs; offsets are assigned
    /// contiguously in the given order.
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let layers: Vec<LayerDesc> = layers
            .into_iter()
            .map(|(name, shape)| {
                let desc = LayerDesc {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += desc.len();
                desc
            })
            .collect();
        let id = LayoutId(layout_digest(&layers));
        Self {
            layers,
            len: offset,
            id,
        }
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn id(&self) -> LayoutId {
        self.id
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.len].into(),
            layout_id: self.id,
        }
    }

    /// Wraps raw values, checking length and finiteness.
    pub fn vector(&self, values: Vec<f64>) -> Result<ParamVector> {
        if values.len() != self.len {
            return Err(ParamError::LengthMismatch {
                expected: self.len,
                found: values.len(),
            });
        }
        ParamVector::new(values, self.id)
    }

    /// Splits `v` back into named layers.
    pub fn unflatten(&self, v: &ParamVector) -> Result<Vec<Layer>> {
        self.check(v)?;
        Ok(self
            .layers
            .iter()
            .map(|d| Layer {
                name: d.name.clone(),
                shape: d.shape.clone(),
                values: v.values[d.range()].to_vec(),
            })
            .collect())
    }

    /// Flattens layers that must match this layout's names and shapes.
    pub fn flatten(&self, layers: &[Layer]) -> Result<ParamVector> {
        if layers.len() != self.layers.len() {
            return Err(ParamError::LengthMismatch {
                expected: self.layers.len(),
                found: layers.len(),
            });
        }
        for (index, (layer, desc)) in layers.iter().zip(&self.layers).enumerate() {
            if layer.name != desc.name || layer.shape != desc.shape {
                return Err(ParamError::LayerMismatch {
                    index,
                    reason: format!(
                        "expected {}{:?}, found {}{:?}",
                        desc.name, desc.shape, layer.name, layer.shape
                    ),
                });
            }
        }
        flatten(layers)
    }

    pub fn check(&self, v: &ParamVector) -> Result<()> {
        if v.layout_id != self.id {
            return Err(ParamError::LayoutMismatch {
                expected: self.id,
                found: v.layout_id,
            });
        }
        if v.len() != self.len {
            return Err(ParamError::LengthMismatch {
                expected: self.len,
                found: v.len(),
            });
        }
        Ok(())
    }
}

/// FNV-1a over layer names and shapes. Stable across platforms; used on the
/// wire as the layout digest.
fn layout_digest(layers: &[LayerDesc]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for layer in layers {
        eat(&(layer.name.len() as u64).to_le_bytes());
        eat(layer.name.as_bytes());
        eat(&(layer.shape.len() as u64).to_le_bytes());
        for &d in &layer.shape {
            eat(&(d as u64).to_le_bytes());
        }
    }
    h
}

/// A named, shaped block of parameters; values are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Concatenates layers in order. The layout is derived from the layers.
pub fn flatten(layers: &[Layer]) -> Result<ParamVector> {
    for (index, layer) in layers.iter().enumerate() {
        let expected: usize = layer.shape.iter().product();
        if expected != layer.values.len() {
            return Err(ParamError::LayerMismatch {
                index,
                reason: format!(
                    "shape {:?} needs {} values, found {}",
                    layer.shape,
                    expected,
                    layer.values.len()
                ),
            });
        }
    }
    let layout = LayoutSpec::new(layers.iter().map(|l| (l.name.clone(), l.shape.clone())));
    let values: Vec<f64> = layers.iter().flat_map(|l| l.values.iter().copied()).collect();
    ParamVector::new(values, layout.id())
}

pub fn unflatten(v: &ParamVector, layout: &LayoutSpec) -> Result<Vec<Layer>> {
    layout.unflatten(v)
}

/// Immutable, finite parameter vector. Cloning shares the buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Arc<[f64]>,
    layout_id: LayoutId,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout_id: LayoutId) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self {
            values: values.into(),
            layout_id,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.to_vec()
    }

    pub fn layout_id(&self) -> LayoutId {
        self.layout_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> Result<f64> {
        l2_norm(self)
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        scale(a, self)
    }

    fn same_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout_id != other.layout_id {
            return Err(ParamError::LayoutMismatch {
                expected: self.layout_id,
                found: other.layout_id,
            });
        }
        if self.len() != other.len() {
            return Err(ParamError::LengthMismatch {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    fn map2(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
        self.same_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        ParamVector::new(values, self.layout_id)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.map2(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.map2(other, |x, y| x - y)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        self.same_layout(other)?;
        let d = self
            .values
            .iter()
            .zip(other.values.iter())
            .fold(0.0, |acc, (&x, &y)| acc + x * y);
        if d.is_finite() {
            Ok(d)
        } else {
            Err(ParamError::NonFinite { index: 0 })
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ParamError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Euclidean norm of a raw slice, summed left to right.
pub fn l2_norm_slice(values: &[f64]) -> Result<f64> {
    check_finite(values)?;
    let sum_sq = values.iter().fold(0.0, |acc, &x| acc + x * x);
    if !sum_sq.is_finite() {
        // Squares overflowed; report the first entry that pushed it over.
        let mut acc = 0.0f64;
        let index = values
            .iter()
            .position(|&x| {
                acc += x * x;
                !acc.is_finite()
            })
            .unwrap_or(0);
        return Err(ParamError::NonFinite { index });
    }
    Ok(sum_sq.sqrt())
}

pub fn l2_norm(v: &ParamVector) -> Result<f64> {
    l2_norm_slice(&v.values)
}

/// `a * x + y`, element-wise.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    y.map2(x, |yi, xi| a * xi + yi)
}

pub fn scale(a: f64, v: &ParamVector) -> Result<ParamVector> {
    let values = v.values.iter().map(|&x| a * x).collect();
    ParamVector::new(values, v.layout_id)
}
