//! Dense token-feature containers.
//!
//! Features are stored as `f32` in row-major order (one row per token).
//! All reductions over them are carried out in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame's token features: `n` tokens by `d` feature dims, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl TokenMatrix {
    /// Builds a matrix from row-major data, rejecting empty shapes and
    /// non-finite entries.
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "token matrix needs n >= 1 and d >= 1, got {n} x {d}"
            )));
        }
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "expected {} values for {n} x {d}, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / d,
                dim: pos % d,
            });
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::Shape(format!(
                    "row {i} has {} dims, expected {d}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(n, d, data)
    }

    /// Number of tokens.
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Feature dimension.
    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Rows `ids` in the given order.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.d);
        for &i in ids {
            if i >= self.n {
                return Err(Error::InvalidSelection(format!(
                    "token id {i} out of range for {} tokens",
                    self.n
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::new(ids.len(), self.d, data)
    }
}

/// Ordered frames of equal shape, with optional parallel key features used
/// only for scoring uniqueness.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    frames: Vec<TokenMatrix>,
    keys: Option<Vec<TokenMatrix>>,
}

impl VideoTensor {
    pub fn new(frames: Vec<TokenMatrix>, keys: Option<Vec<TokenMatrix>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("video needs at least one frame".into()))?;
        let (n, d) = (first.n(), first.d());
        for (t, f) in frames.iter().enumerate() {
            if f.n() != n || f.d() != d {
                return Err(Error::Shape(format!(
                    "frame {t} is {} x {}, expected {n} x {d}",
                    f.n(),
                    f.d()
                )));
            }
        }
        if let Some(keys) = &keys {
            if keys.len() != frames.len() {
                return Err(Error::Shape(format!(
                    "{} key frames for {} frames",
                    keys.len(),
                    frames.len()
                )));
            }
            let dk = keys[0].d();
            for (t, k) in keys.iter().enumerate() {
                if k.n() != n || k.d() != dk {
                    return Err(Error::Shape(format!(
                        "key frame {t} is {} x {}, expected {n} x {dk}",
                        k.n(),
                        k.d()
                    )));
                }
            }
        }
        Ok(Self { frames, keys })
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Tokens per frame `N`.
    pub fn tokens_per_frame(&self) -> usize {
        self.frames[0].n()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].d()
    }

    /// Key dimension, if keys are present.
    pub fn key_dim(&self) -> Option<usize> {
        self.keys.as_ref().map(|k| k[0].d())
    }

    pub fn frames(&self) -> &[TokenMatrix] {
        &self.frames
    }

    pub fn keys(&self) -> Option<&[TokenMatrix]> {
        self.keys.as_deref()
    }

    pub fn total_tokens(&self) -> usize {
        self.len() * self.tokens_per_frame()
    }
}
