//! Uniform node-centered grids over state space.
//!
//! Fields (metric, connection, curvature) live on grid nodes; samples are
//! binned to the nearest node and path queries interpolate multilinearly
//! between the 2^n surrounding nodes.

use crate::error::{Error, Result};

/// Axis-aligned uniform grid: per-axis min, max and node count.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(mins: Vec<f64>, maxs: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if mins.len() != maxs.len() || mins.len() != counts.len() || mins.is_empty() {
            return Err(Error::InvalidArgument("grid axes must be consistent and nonempty".into()));
        }
        for a in 0..mins.len() {
            if !(maxs[a] > mins[a]) {
                return Err(Error::InvalidArgument(format!(
                    "grid axis {a}: max {} must exceed min {}",
                    maxs[a], mins[a]
                )));
            }
            if counts[a] < 5 {
                return Err(Error::InvalidArgument(format!(
                    "grid axis {a}: need at least 5 nodes for interior differences, got {}",
                    counts[a]
                )));
            }
        }
        Ok(Self { mins, maxs, counts })
    }

    /// Bounds from per-axis sample quantiles, robust to stray outliers.
    pub fn from_quantiles<'a, I>(points: I, dim: usize, counts: Vec<usize>, q_lo: f64, q_hi: f64) -> Result<Self>
    where
        I: Iterator<Item = &'a [f64]>,
    {
        if counts.len() != dim {
            return Err(Error::InvalidArgument("counts length must equal dim".into()));
        }
        let mut per_axis: Vec<Vec<f64>> = vec![Vec::new(); dim];
        for p in points {
            for a in 0..dim {
                per_axis[a].push(p[a]);
            }
        }
        if per_axis[0].is_empty() {
            return Err(Error::InvalidArgument("no points supplied for grid bounds".into()));
        }
        let mut mins = Vec::with_capacity(dim);
        let mut maxs = Vec::with_capacity(dim);
        for vals in per_axis.iter_mut() {
            vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let n = vals.len();
            let idx = |q: f64| ((q * (n - 1) as f64).round() as usize).min(n - 1);
            let lo = vals[idx(q_lo)];
            let hi = vals[idx(q_hi)];
            if !(hi > lo) {
                return Err(Error::InvalidArgument("degenerate axis: quantile bounds coincide".into()));
            }
            mins.push(lo);
            maxs.push(hi);
        }
        Self::new(mins, maxs, counts)
    }

    pub fn dim(&self) -> usize {
        self.mins.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.maxs[axis] - self.mins[axis]) / (self.counts[axis] - 1) as f64
    }

    /// Flat index from per-axis node coordinates (row-major, axis 0 slowest).
    pub fn flat(&self, coords: &[usize]) -> usize {
        let mut idx = 0;
        for a in 0..self.dim() {
            idx = idx * self.counts[a] + coords[a];
        }
        idx
    }

    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let d = self.dim();
        let mut out = vec![0; d];
        for a in (0..d).rev() {
            out[a] = flat % self.counts[a];
            flat /= self.counts[a];
        }
        out
    }

    pub fn node_position(&self, coords: &[usize]) -> Vec<f64> {
        (0..self.dim())
            .map(|a| self.mins[a] + self.spacing(a) * coords[a] as f64)
            .collect()
    }

    /// Nearest node to `x`, or None if `x` is outside the grid box
    /// (with half-cell slack so edge samples still bin to edge nodes).
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut coords = vec![0usize; self.dim()];
        for a in 0..self.dim() {
            let h = self.spacing(a);
            let t = (x[a] - self.mins[a]) / h;
            if t < -0.5 || t > (self.counts[a] - 1) as f64 + 0.5 {
                return None;
            }
            coords[a] = t.round().max(0.0) as usize;
            coords[a] = coords[a].min(self.counts[a] - 1);
        }
        Some(self.flat(&coords))
    }

    /// Lower corner and fractional offsets of the interpolation cell
    /// containing `x`; None when `x` is outside the grid box.
    pub fn cell_of(&self, x: &[f64]) -> Option<(Vec<usize>, Vec<f64>)> {
        let d = self.dim();
        let mut corner = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let h = self.spacing(a);
            let t = (x[a] - self.mins[a]) / h;
            if t < 0.0 || t > (self.counts[a] - 1) as f64 {
                return None;
            }
            let mut i = t.floor() as usize;
            if i >= self.counts[a] - 1 {
                i = self.counts[a] - 2;
            }
            corner[a] = i;
            frac[a] = t - i as f64;
        }
        Some((corner, frac))
    }

    /// Multilinear interpolation of a node field with `stride` values per
    /// node. Returns None if any corner of the cell is invalid.
    pub fn interpolate(
        &self,
        x: &[f64],
        values: &[f64],
        stride: usize,
        valid: &[bool],
        out: &mut [f64],
    ) -> Option<()> {
        let (corner, frac) = self.cell_of(x)?;
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut coords = vec![0usize; d];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for a in 0..d {
                if mask & (1 << a) != 0 {
                    coords[a] = corner[a] + 1;
                    w *= frac[a];
                } else {
                    coords[a] = corner[a];
                    w *= 1.0 - frac[a];
                }
            }
            let node = self.flat(&coords);
            if !valid[node] {
                return None;
            }
            let vals = &values[node * stride..(node + 1) * stride];
            for (o, v) in out.iter_mut().zip(vals) {
                *o += w * v;
            }
        }
        Some(())
    }
}
