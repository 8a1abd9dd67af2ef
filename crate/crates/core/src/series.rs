//! Segmented time series of state-space points.
//!
//! The same container carries source trajectories, raw sensor streams and
//! reduced measurement streams; only the dimension changes along the
//! pipeline. Segments are statistically independent restarts, so consumers
//! never difference across a segment boundary.

use crate::error::{Error, Result};

/// One uniformly sampled run of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Time step between consecutive points.
    pub dt: f64,
    points: Vec<f64>,
    dim: usize,
}

impl Segment {
    pub fn new(dim: usize, dt: f64, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("segment dimension must be > 0".into()));
        }
        if points.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "segment data length {} not divisible by dim {}",
                points.len(),
                dim
            )));
        }
        Ok(Self { dt, points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.points
    }
}

/// A collection of independent segments with a common dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    dim: usize,
    segments: Vec<Segment>,
}

/// Source trajectories are series of source coordinates.
pub type Trajectory = Series;
/// Reduced measurement streams are series of measurement coordinates.
pub type MeasurementSeries = Series;

impl Series {
    pub fn new(dim: usize) -> Self {
        Self { dim, segments: Vec::new() }
    }

    pub fn from_segments(dim: usize, segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if s.dim != dim {
                return Err(Error::InvalidArgument(format!(
                    "segment dim {} does not match series dim {}",
                    s.dim, dim
                )));
            }
        }
        Ok(Self { dim, segments })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, segment: Segment) -> Result<()> {
        if segment.dim != self.dim {
            return Err(Error::InvalidArgument(format!(
                "segment dim {} does not match series dim {}",
                segment.dim, self.dim
            )));
        }
        self.segments.push(segment);
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn total_points(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.segments.iter().flat_map(Segment::iter_points)
    }

    /// Apply `f` to every point, preserving segment structure and dt.
    /// `f` must return vectors of length `out_dim`.
    pub fn map_points<F>(&self, out_dim: usize, mut f: F) -> Result<Series>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut out = Series::new(out_dim);
        for seg in &self.segments {
            let mut data = Vec::with_capacity(seg.len() * out_dim);
            for p in seg.iter_points() {
                let q = f(p)?;
                debug_assert_eq!(q.len(), out_dim);
                data.extend_from_slice(&q);
            }
            out.push(Segment::new(out_dim, seg.dt, data)?)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_indexing() {
        let s = Segment::new(2, 0.1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.point(1), &[2.0, 3.0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        let seg = Segment::new(2, 0.1, vec![0.0; 4]).unwrap();
        let mut series = Series::new(3);
        assert!(series.push(seg).is_err());
    }

    #[test]
    fn map_points_preserves_shape() {
        let seg = Segment::new(2, 0.5, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let series = Series::from_segments(2, vec![seg]).unwrap();
        let doubled = series
            .map_points(2, |p| Ok(p.iter().map(|x| 2.0 * x).collect()))
            .unwrap();
        assert_eq!(doubled.segments()[0].dt, 0.5);
        assert_eq!(doubled.segments()[0].point(1), &[6.0, 8.0]);
    }
}
