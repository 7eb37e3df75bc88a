//! The video cube: a stack of `B` real frames of size `H x W`.
//!
//! Storage is frame-major (`[frames, height, width]`), which is also the
//! vectorization order used by the sensing operator: frame 0 occupies the
//! first `H*W` entries of the flattened signal, frame 1 the next, and so on.
//!
//! Every live cube is counted per thread (see [`tracking`]), which lets the
//! training code assert that memory use does not grow with iteration count.

use std::cell::Cell;

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::error::{Error, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn track_alloc() {
    LIVE.with(|live| {
        let n = live.get() + 1;
        live.set(n);
        PEAK.with(|peak| {
            if n > peak.get() {
                peak.set(n)
            }
        });
    });
}

fn track_free() {
    LIVE.with(|live| live.set(live.get().saturating_sub(1)));
}

/// Per-thread counters of live [`VideoCube`] instances.
pub mod tracking {
    use super::{LIVE, PEAK};

    /// Number of cubes currently alive on this thread.
    pub fn live() -> usize {
        LIVE.with(|l| l.get())
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.with(|p| p.get())
    }

    /// Resets the high-water mark to the current live count.
    pub fn reset_peak() {
        let now = live();
        PEAK.with(|p| p.set(now));
    }
}

#[derive(Debug, PartialEq)]
pub struct VideoCube {
    data: Array3<f64>,
}

impl Clone for VideoCube {
    fn clone(&self) -> Self {
        track_alloc();
        Self {
            data: self.data.clone(),
        }
    }
}

impl Drop for VideoCube {
    fn drop(&mut self) {
        track_free();
    }
}

impl VideoCube {
    fn wrap(data: Array3<f64>) -> Self {
        track_alloc();
        Self { data }
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self::wrap(Array3::zeros((frames, height, width)))
    }

    pub fn from_elem(frames: usize, height: usize, width: usize, value: f64) -> Self {
        Self::wrap(Array3::from_elem((frames, height, width), value))
    }

    pub fn zeros_like(other: &VideoCube) -> Self {
        Self::wrap(Array3::zeros(other.data.raw_dim()))
    }

    /// Wraps a `[frames, height, width]` array. All dimensions must be at
    /// least one. Finiteness is not checked here; see [`VideoCube::check_finite`].
    pub fn from_array(data: Array3<f64>) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::invalid(format!(
                "cube dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self::wrap(data))
    }

    pub fn from_vec(frames: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let found = values.len();
        let data = Array3::from_shape_vec((frames, height, width), values).map_err(|_| {
            Error::ShapeMismatch {
                expected: vec![frames * height * width],
                found: vec![found],
            }
        })?;
        Self::from_array(data)
    }

    /// Stacks equally sized frames.
    pub fn from_frames(frames: &[Array2<f64>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("at least one frame is required"))?;
        let (h, w) = first.dim();
        let mut data = Array3::zeros((frames.len(), h, w));
        for (b, f) in frames.iter().enumerate() {
            if f.dim() != (h, w) {
                return Err(Error::ShapeMismatch {
                    expected: vec![h, w],
                    found: f.shape().to_vec(),
                });
            }
            data.index_axis_mut(Axis(0), b).assign(f);
        }
        Self::from_array(data)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// `[frames, height, width]`.
    pub fn shape(&self) -> [usize; 3] {
        [self.frames(), self.height(), self.width()]
    }

    /// Flattened length `n * B`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("cube storage is contiguous")
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("cube storage is contiguous")
    }

    pub fn frame(&self, b: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), b)
    }

    pub fn frame_mut(&mut self, b: usize) -> ArrayViewMut2<'_, f64> {
        self.data.index_axis_mut(Axis(0), b)
    }

    pub fn into_array(mut self) -> Array3<f64> {
        std::mem::take(&mut self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_same_shape(&self, other: &VideoCube) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.shape().to_vec(),
                found: other.shape().to_vec(),
            })
        }
    }

    pub fn dot(&self, other: &VideoCube) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Euclidean distance `||self - other||`.
    pub fn distance(&self, other: &VideoCube) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &VideoCube) -> f64 {
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &VideoCube) {
        Zip::from(&mut self.data)
            .and(&other.data)
            .for_each(|s, &o| *s += alpha * o);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.mapv_inplace(|v| v * alpha);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn assign(&mut self, other: &VideoCube) {
        self.data.assign(&other.data);
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &VideoCube) -> VideoCube {
        Self::wrap(&self.data - &other.data)
    }

    /// Returns `self + other`.
    pub fn add(&self, other: &VideoCube) -> VideoCube {
        Self::wrap(&self.data + &other.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VideoCube {
        Self::wrap(self.data.mapv(f))
    }

    /// Copy with every entry clamped to `[0, 1]`.
    pub fn clamped_unit(&self) -> VideoCube {
        self.map(|v| v.clamp(0.0, 1.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_dimensions() {
        assert!(VideoCube::from_array(Array3::zeros((0, 2, 2))).is_err());
        assert!(VideoCube::from_vec(1, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn flattened_length_is_n_times_b() {
        let c = VideoCube::zeros(4, 3, 5);
        assert_eq!(c.len(), 3 * 5 * 4);
        assert_eq!(c.shape(), [4, 3, 5]);
    }

    #[test]
    fn live_count_follows_clones_and_drops() {
        let before = tracking::live();
        let a = VideoCube::zeros(1, 2, 2);
        let b = a.clone();
        assert_eq!(tracking::live(), before + 2);
        drop(a);
        drop(b);
        assert_eq!(tracking::live(), before);
    }

    #[test]
    fn into_array_releases_the_count() {
        let before = tracking::live();
        let a = VideoCube::from_elem(2, 2, 2, 1.5);
        let arr = a.into_array();
        assert_eq!(arr.len(), 8);
        assert_eq!(tracking::live(), before);
    }
}
