use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// A stack of `frames` latent vectors of dimension `dims`, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent(Array2<f64>);

impl VideoLatent {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (f, d) = values.dim();
        if f == 0 || d == 0 {
            return Err(Error::shape("at least 1x1", format!("{f}x{d}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("latent has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(frames: usize, dims: usize) -> Self {
        Self(Array2::zeros((frames, dims)))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let f = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("rows of equal length", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((f, d), flat).map_err(|e| Error::shape(format!("{f}x{d}"), e))?;
        Self::new(arr)
    }

    /// Wraps an array without the finiteness scan. Callers in this crate use it
    /// on arithmetic results whose inputs were already validated.
    pub(crate) fn from_array(values: Array2<f64>) -> Self {
        Self(values)
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn dims(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn frame(&self, k: usize) -> ArrayView1<'_, f64> {
        self.0.row(k)
    }

    /// A single-frame latent holding a copy of frame `k`.
    pub fn frame_latent(&self, k: usize) -> VideoLatent {
        Self(self.0.row(k).to_owned().insert_axis(Axis(0)))
    }

    /// Stacks single- or multi-frame latents along the frame axis.
    pub fn concat(parts: &[VideoLatent]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.0.view()).collect();
        let arr = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape("equal frame widths", e))?;
        Ok(Self(arr))
    }

    pub fn ensure_same_shape(&self, other: &VideoLatent) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &VideoLatent) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok((&self.0 - &other.0).iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
