//! Trajectory-derived geometry on a grid.
//!
//! The contravariant metric at a node is the covariance of trajectory
//! velocities binned to that node; the covariant metric is its inverse.
//! Connection and curvature come from finite differences of the node
//! fields, and parallel transport / geodesic shooting interpolate the
//! connection multilinearly along paths.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::series::Series;

/// Running sums for one grid cell: sample count, velocity sum and velocity
/// outer-product sum. Merging two accumulators equals accumulating the
/// union of their samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAccumulator {
    pub count: u64,
    pub vel_sum: Vec<f64>,
    pub outer_sum: Vec<f64>,
}

impl CellAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, vel_sum: vec![0.0; dim], outer_sum: vec![0.0; dim * dim] }
    }

    pub fn push(&mut self, v: &[f64]) {
        let d = self.vel_sum.len();
        self.count += 1;
        for i in 0..d {
            self.vel_sum[i] += v[i];
            for j in 0..d {
                self.outer_sum[i * d + j] += v[i] * v[j];
            }
        }
    }

    /// Mean-subtracted covariance, or None below `min_count`.
    pub fn covariance(&self, min_count: u64) -> Option<DMatrix<f64>> {
        if self.count < min_count.max(1) {
            return None;
        }
        let d = self.vel_sum.len();
        let c = self.count as f64;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = self.outer_sum[i * d + j] / c - (self.vel_sum[i] / c) * (self.vel_sum[j] / c);
            }
        }
        // enforce exact symmetry against rounding
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = s;
                cov[(j, i)] = s;
            }
        }
        Some(cov)
    }
}

/// Merge `b` into `a`; both must refer to the same cell of the same grid.
pub fn merge_accumulators(a: &CellAccumulator, b: &CellAccumulator) -> CellAccumulator {
    let mut out = a.clone();
    out.count += b.count;
    for (x, y) in out.vel_sum.iter_mut().zip(&b.vel_sum) {
        *x += y;
    }
    for (x, y) in out.outer_sum.iter_mut().zip(&b.outer_sum) {
        *x += y;
    }
    out
}

/// A full grid of accumulators, the mergeable unit of parallel estimation.
#[derive(Debug, Clone)]
pub struct AccumulatorGrid {
    pub grid: GridSpec,
    pub dim: usize,
    pub cells: Vec<CellAccumulator>,
}

impl AccumulatorGrid {
    pub fn new(grid: GridSpec, dim: usize) -> Self {
        let n = grid.n_nodes();
        Self { grid, dim, cells: vec![CellAccumulator::new(dim); n] }
    }

    /// Difference consecutive points of each segment, bin each velocity at
    /// the step midpoint's nearest node. No cross-segment differencing.
    pub fn accumulate(&mut self, series: &Series) {
        let d = self.dim;
        let mut mid = vec![0.0; d];
        let mut vel = vec![0.0; d];
        for seg in series.segments() {
            if seg.len() < 2 {
                continue;
            }
            let dt = seg.dt;
            for i in 0..seg.len() - 1 {
                let a = seg.point(i);
                let b = seg.point(i + 1);
                for k in 0..d {
                    vel[k] = (b[k] - a[k]) / dt;
                    mid[k] = 0.5 * (a[k] + b[k]);
                }
                if let Some(node) = self.grid.nearest_node(&mid) {
                    self.cells[node].push(&vel);
                }
            }
        }
    }

    pub fn merge(&mut self, other: &AccumulatorGrid) {
        assert_eq!(self.grid, other.grid);
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.count += b.count;
            for (x, y) in a.vel_sum.iter_mut().zip(&b.vel_sum) {
                *x += y;
            }
            for (x, y) in a.outer_sum.iter_mut().zip(&b.outer_sum) {
                *x += y;
            }
        }
    }
}

/// Estimation controls.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricOptions {
    /// Cells with fewer samples are flagged invalid.
    pub min_count: u64,
    /// Gaussian smoothing of the covariant metric before differentiation,
    /// in units of one cell. None disables smoothing.
    pub smooth_sigma: Option<f64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self { min_count: 20, smooth_sigma: Some(1.0) }
    }
}

/// Contravariant and covariant metric per grid node with validity flags.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricField {
    pub grid: GridSpec,
    pub dim: usize,
    /// g^{kl}, row-major per node.
    pub g_con: Vec<f64>,
    /// g_{kl}, row-major per node.
    pub g_cov: Vec<f64>,
    pub valid: Vec<bool>,
    pub counts: Vec<u64>,
}

impl MetricField {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn g_cov_at(&self, node: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.g_cov[node * s..(node + 1) * s]
    }

    pub fn g_con_at(&self, node: usize) -> &[f64] {
        let s = self.dim * self.dim;
        &self.g_con[node * s..(node + 1) * s]
    }

    /// Covariant metric interpolated at `x`; None outside the valid region.
    pub fn g_cov_interp(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let s = self.dim * self.dim;
        let mut out = vec![0.0; s];
        self.grid.interpolate(x, &self.g_cov, s, &self.valid, &mut out)?;
        Some(DMatrix::from_row_slice(self.dim, self.dim, &out))
    }

    /// Inner product of tangent vectors under the interpolated metric.
    pub fn inner(&self, x: &[f64], u: &[f64], v: &[f64]) -> Option<f64> {
        let g = self.g_cov_interp(x)?;
        let mut acc = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                acc += u[i] * g[(i, j)] * v[j];
            }
        }
        Some(acc)
    }

    /// Build a field by sampling an analytic covariant metric on the grid.
    pub fn from_fn<F>(grid: GridSpec, dim: usize, mut g_cov_fn: F) -> Result<Self>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = grid.n_nodes();
        let s = dim * dim;
        let mut g_cov = vec![0.0; n * s];
        let mut g_con = vec![0.0; n * s];
        let mut valid = vec![false; n];
        let mut buf = vec![0.0; s];
        for node in 0..n {
            let x = grid.node_position(&grid.coords(node));
            g_cov_fn(&x, &mut buf);
            let m = DMatrix::from_row_slice(dim, dim, &buf);
            if let Some(chol) = Cholesky::new(m.clone()) {
                let inv = chol.inverse();
                g_cov[node * s..(node + 1) * s].copy_from_slice(&buf);
                for i in 0..dim {
                    for j in 0..dim {
                        g_con[node * s + i * dim + j] = inv[(i, j)];
                    }
                }
                valid[node] = true;
            }
        }
        Ok(Self { grid, dim, g_con, g_cov, valid, counts: vec![0; n] })
    }
}

/// Estimate the metric field from a measurement series.
///
/// Accumulation is chunked over segments with a fixed chunk size and merged
/// in chunk order, so results do not depend on the worker count.
pub fn estimate_metric(series: &Series, grid: &GridSpec, opts: &MetricOptions) -> Result<MetricField> {
    if series.n_segments() == 0 {
        return Err(Error::InvalidArgument("empty series".into()));
    }
    if grid.dim() != series.dim() {
        return Err(Error::InvalidArgument("grid dim does not match series".into()));
    }
    let dim = series.dim();
    const CHUNK: usize = 4096;
    let seg_slices: Vec<&[crate::series::Segment]> = series.segments().chunks(CHUNK).collect();
    let partials: Vec<AccumulatorGrid> = seg_slices
        .par_iter()
        .map(|chunk| {
            let mut acc = AccumulatorGrid::new(grid.clone(), dim);
            let sub = Series::from_segments(dim, chunk.to_vec()).expect("chunk dims consistent");
            acc.accumulate(&sub);
            acc
        })
        .collect();
    let mut total = AccumulatorGrid::new(grid.clone(), dim);
    for p in &partials {
        total.merge(p);
    }
    finalize_metric(&total, opts)
}

/// Turn accumulated sums into a metric field: covariance -> g^{kl},
/// inverse -> g_{kl}, optional smoothing pass, inverse consistency.
pub fn finalize_metric(acc: &AccumulatorGrid, opts: &MetricOptions) -> Result<MetricField> {
    let grid = acc.grid.clone();
    let dim = acc.dim;
    let n = grid.n_nodes();
    let s = dim * dim;
    let mut g_con = vec![0.0; n * s];
    let mut g_cov = vec![0.0; n * s];
    let mut valid = vec![false; n];
    let mut counts = vec![0u64; n];
    for node in 0..n {
        counts[node] = acc.cells[node].count;
        let Some(cov) = acc.cells[node].covariance(opts.min_count) else {
            continue;
        };
        let Some(chol) = Cholesky::new(cov.clone()) else {
            continue; // velocities confined to a hyperplane: singular covariance
        };
        let inv = chol.inverse();
        for i in 0..dim {
            for j in 0..dim {
                g_con[node * s + i * dim + j] = cov[(i, j)];
                g_cov[node * s + i * dim + j] = inv[(i, j)];
            }
        }
        valid[node] = true;
    }

    if let Some(sigma) = opts.smooth_sigma {
        if sigma > 0.0 {
            g_cov = smooth_field(&grid, &g_cov, s, &valid, sigma);
            // keep the pair consistent: contravariant = inverse of smoothed covariant
            for node in 0..n {
                if !valid[node] {
                    continue;
                }
                let m = DMatrix::from_row_slice(dim, dim, &g_cov[node * s..(node + 1) * s]);
                match Cholesky::new(m) {
                    Some(chol) => {
                        let inv = chol.inverse();
                        for i in 0..dim {
                            for j in 0..dim {
                                g_con[node * s + i * dim + j] = inv[(i, j)];
                            }
                        }
                    }
                    None => valid[node] = false,
                }
            }
        }
    }

    Ok(MetricField { grid, dim, g_con, g_cov, valid, counts })
}

/// Gaussian smoothing over valid neighbors, sigma in cell units, kernel
/// truncated at 3 sigma. Invalid nodes stay invalid and contribute nothing.
fn smooth_field(grid: &GridSpec, field: &[f64], stride: usize, valid: &[bool], sigma: f64) -> Vec<f64> {
    let d = grid.dim();
    let radius = (3.0 * sigma).ceil() as isize;

    // enumerate kernel offsets within the truncation radius
    let mut offsets: Vec<(Vec<isize>, f64)> = Vec::new();
    let mut cur = vec![-radius; d];
    'enumerate: loop {
        let dist2: f64 = cur.iter().map(|&c| (c * c) as f64).sum();
        if dist2 <= (radius * radius) as f64 + 1e-9 {
            offsets.push((cur.clone(), (-dist2 / (2.0 * sigma * sigma)).exp()));
        }
        let mut a = 0;
        loop {
            cur[a] += 1;
            if cur[a] <= radius {
                break;
            }
            cur[a] = -radius;
            a += 1;
            if a == d {
                break 'enumerate;
            }
        }
    }

    let mut out = vec![0.0; field.len()];
    for node in 0..grid.n_nodes() {
        if !valid[node] {
            continue;
        }
        let coords = grid.coords(node);
        let mut wsum = 0.0;
        let mut acc = vec![0.0; stride];
        'offs: for (off, w) in &offsets {
            let mut nb = vec![0usize; d];
            for a in 0..d {
                let c = coords[a] as isize + off[a];
                if c < 0 || c >= grid.counts[a] as isize {
                    continue 'offs;
                }
                nb[a] = c as usize;
            }
            let nb_flat = grid.flat(&nb);
            if !valid[nb_flat] {
                continue;
            }
            wsum += w;
            for k in 0..stride {
                acc[k] += w * field[nb_flat * stride + k];
            }
        }
        for k in 0..stride {
            out[node * stride + k] = acc[k] / wsum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// finite differences on node fields
// ---------------------------------------------------------------------------

/// Derivative of a node field along `axis` at `node`: central where both
/// neighbors are valid, one-sided at the region boundary, None if isolated.
fn axis_derivative(
    grid: &GridSpec,
    field: &[f64],
    stride: usize,
    valid: &[bool],
    node: usize,
    axis: usize,
    out: &mut [f64],
) -> bool {
    let coords = grid.coords(node);
    let h = grid.spacing(axis);
    let mut up = coords.clone();
    let mut dn = coords.clone();
    let has_up = coords[axis] + 1 < grid.counts[axis] && {
        up[axis] = coords[axis] + 1;
        valid[grid.flat(&up)]
    };
    let has_dn = coords[axis] > 0 && {
        dn[axis] = coords[axis] - 1;
        valid[grid.flat(&dn)]
    };
    let (a, b, denom) = if has_up && has_dn {
        (grid.flat(&up), grid.flat(&dn), 2.0 * h)
    } else if has_up {
        (grid.flat(&up), node, h)
    } else if has_dn {
        (node, grid.flat(&dn), h)
    } else {
        return false;
    };
    for k in 0..stride {
        out[k] = (field[a * stride + k] - field[b * stride + k]) / denom;
    }
    true
}

/// Christoffel symbols per node, symmetric in the lower pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionField {
    pub grid: GridSpec,
    pub dim: usize,
    /// Gamma^k_{lm}, layout node * n^3 + k*n^2 + l*n + m.
    pub gamma: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ConnectionField {
    pub fn gamma_at(&self, node: usize) -> &[f64] {
        let s = self.dim.pow(3);
        &self.gamma[node * s..(node + 1) * s]
    }

    /// Gamma interpolated at x; None outside the valid region.
    pub fn gamma_interp(&self, x: &[f64], out: &mut [f64]) -> Option<()> {
        let s = self.dim.pow(3);
        self.grid.interpolate(x, &self.gamma, s, &self.valid, out)
    }

    /// Build from an analytic Gamma closure (for oracles and ground truth).
    pub fn from_fn<F>(grid: GridSpec, dim: usize, mut gamma_fn: F) -> Self
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = grid.n_nodes();
        let s = dim.pow(3);
        let mut gamma = vec![0.0; n * s];
        for node in 0..n {
            let x = grid.node_position(&grid.coords(node));
            gamma_fn(&x, &mut gamma[node * s..(node + 1) * s]);
        }
        Self { grid, dim, gamma, valid: vec![true; n] }
    }
}

/// Derive the connection from the metric by finite differences of g_{kl}
/// contracted with g^{kn} (one-sided differences at the valid-region
/// boundary; isolated nodes flagged invalid).
pub fn christoffel(metric: &MetricField) -> Result<ConnectionField> {
    let grid = metric.grid.clone();
    let d = metric.dim;
    let n = grid.n_nodes();
    let s2 = d * d;
    let s3 = d * d * d;
    let mut gamma = vec![0.0; n * s3];
    let mut valid = vec![false; n];

    let results: Vec<Option<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|node| {
            if !metric.valid[node] {
                return None;
            }
            // dg[m][l*d+k] = d g_{lk} / d x_m
            let mut dg = vec![vec![0.0; s2]; d];
            for m in 0..d {
                if !axis_derivative(&grid, &metric.g_cov, s2, &metric.valid, node, m, &mut dg[m]) {
                    return None;
                }
            }
            let gcon = metric.g_con_at(node);
            let mut out = vec![0.0; s3];
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        let mut acc = 0.0;
                        for nn in 0..d {
                            acc += gcon[k * d + nn]
                                * (dg[m][nn * d + l] + dg[l][nn * d + m] - dg[nn][l * d + m]);
                        }
                        out[k * s2 + l * d + m] = 0.5 * acc;
                    }
                }
            }
            Some(out)
        })
        .collect();

    for (node, r) in results.into_iter().enumerate() {
        if let Some(v) = r {
            gamma[node * s3..(node + 1) * s3].copy_from_slice(&v);
            valid[node] = true;
        }
    }
    Ok(ConnectionField { grid, dim: d, gamma, valid })
}

/// Riemann curvature per node, antisymmetric in the last index pair by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureField {
    pub grid: GridSpec,
    pub dim: usize,
    /// R^k_{lmn}, layout node * n^4 + k*n^3 + l*n^2 + m*n + n_idx.
    pub riemann: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CurvatureField {
    pub fn riemann_at(&self, node: usize) -> &[f64] {
        let s = self.dim.pow(4);
        &self.riemann[node * s..(node + 1) * s]
    }

    /// Build from an analytic closure filling R^k_{lmn} row-major.
    pub fn from_fn<F>(grid: GridSpec, dim: usize, mut r_fn: F) -> Self
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let n = grid.n_nodes();
        let s = dim.pow(4);
        let mut riemann = vec![0.0; n * s];
        for node in 0..n {
            let x = grid.node_position(&grid.coords(node));
            r_fn(&x, &mut riemann[node * s..(node + 1) * s]);
        }
        Self { grid, dim, riemann, valid: vec![true; n] }
    }

    /// Frobenius norm of the full tensor at a node.
    pub fn norm_at(&self, node: usize) -> f64 {
        self.riemann_at(node).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Curvature from the connection: difference the Gamma field and add the
/// quadratic terms. Only the m < n components are computed; the mirror is
/// filled with the exact negative so antisymmetry holds by construction.
pub fn riemann(conn: &ConnectionField) -> Result<CurvatureField> {
    let grid = conn.grid.clone();
    let d = conn.dim;
    let n = grid.n_nodes();
    let s2 = d * d;
    let s3 = d * d * d;
    let s4 = d * d * d * d;
    let mut field = vec![0.0; n * s4];
    let mut valid = vec![false; n];

    let results: Vec<Option<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|node| {
            if !conn.valid[node] {
                return None;
            }
            let mut dgamma = vec![vec![0.0; s3]; d];
            for a in 0..d {
                if !axis_derivative(&grid, &conn.gamma, s3, &conn.valid, node, a, &mut dgamma[a]) {
                    return None;
                }
            }
            let g = conn.gamma_at(node);
            let mut out = vec![0.0; s4];
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        for nn in (m + 1)..d {
                            let mut r = -dgamma[nn][k * s2 + l * d + m] + dgamma[m][k * s2 + l * d + nn];
                            for i in 0..d {
                                r += g[k * s2 + i * d + m] * g[i * s2 + l * d + nn]
                                    - g[k * s2 + i * d + nn] * g[i * s2 + l * d + m];
                            }
                            out[k * s3 + l * s2 + m * d + nn] = r;
                            out[k * s3 + l * s2 + nn * d + m] = -r;
                        }
                    }
                }
            }
            Some(out)
        })
        .collect();

    for (node, r) in results.into_iter().enumerate() {
        if let Some(v) = r {
            field[node * s4..(node + 1) * s4].copy_from_slice(&v);
            valid[node] = true;
        }
    }
    Ok(CurvatureField { grid, dim: d, riemann: field, valid })
}

// ---------------------------------------------------------------------------
// transport and geodesics
// ---------------------------------------------------------------------------

fn gamma_apply(gamma: &[f64], d: usize, v: &[f64], dx: &[f64], out: &mut [f64]) {
    let s2 = d * d;
    for k in 0..d {
        let mut acc = 0.0;
        for l in 0..d {
            for m in 0..d {
                acc += gamma[k * s2 + l * d + m] * v[l] * dx[m];
            }
        }
        out[k] = -acc;
    }
}

/// Parallel transport `v` along a polyline: per step the update
/// dv^k = -Gamma^k_{lm} v^l dx^m with Gamma interpolated at the step
/// midpoint and a midpoint (RK2) rule in v.
pub fn parallel_transport(conn: &ConnectionField, v: &[f64], path: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = conn.dim;
    if v.len() != d {
        return Err(Error::InvalidArgument("vector dim mismatch".into()));
    }
    let s3 = d * d * d;
    let mut cur = v.to_vec();
    let mut g_start = vec![0.0; s3];
    let mut g_mid = vec![0.0; s3];
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut vh = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut mid = vec![0.0; d];
    for step in 0..path.len().saturating_sub(1) {
        let a = &path[step];
        let b = &path[step + 1];
        for i in 0..d {
            dx[i] = b[i] - a[i];
            mid[i] = 0.5 * (a[i] + b[i]);
        }
        conn.gamma_interp(a, &mut g_start).ok_or(Error::TransportExit { step })?;
        conn.gamma_interp(&mid, &mut g_mid).ok_or(Error::TransportExit { step })?;
        gamma_apply(&g_start, d, &cur, &dx, &mut k1);
        for i in 0..d {
            vh[i] = cur[i] + 0.5 * k1[i];
        }
        gamma_apply(&g_mid, d, &vh, &dx, &mut k2);
        for i in 0..d {
            cur[i] += k2[i];
        }
    }
    Ok(cur)
}

/// Result of discrete geodesic shooting. `complete` is false when the path
/// left the valid region and was truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    pub points: Vec<Vec<f64>>,
    pub complete: bool,
}

/// Advance `steps` times: move by delta while parallel transporting delta
/// along itself. One transfer integrates the geodesic equation
/// x'' = -Gamma x' x' over unit parameter with a midpoint (RK2) rule, so
/// the endpoint converges at second order under step halving.
pub fn geodesic_step(conn: &ConnectionField, x: &[f64], delta: &[f64], steps: usize) -> GeodesicPath {
    let mut points = Vec::with_capacity(steps + 1);
    points.push(x.to_vec());
    let mut cur = x.to_vec();
    let mut del = delta.to_vec();
    for _ in 0..steps {
        match geodesic_transfer(conn, &mut cur, &mut del) {
            Some(()) => points.push(cur.clone()),
            None => return GeodesicPath { points, complete: false },
        }
    }
    GeodesicPath { points, complete: true }
}

/// One geodesic transfer: updates position and direction in place.
/// None when the step needs connection values outside the valid region.
pub(crate) fn geodesic_transfer(conn: &ConnectionField, x: &mut [f64], delta: &mut [f64]) -> Option<()> {
    let d = conn.dim;
    let s3 = d * d * d;
    let mut g = vec![0.0; s3];
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    conn.gamma_interp(x, &mut g)?;
    gamma_apply(&g, d, delta, delta, &mut k1);
    let xh: Vec<f64> = (0..d).map(|i| x[i] + 0.5 * delta[i]).collect();
    let vh: Vec<f64> = (0..d).map(|i| delta[i] + 0.5 * k1[i]).collect();
    conn.gamma_interp(&xh, &mut g)?;
    gamma_apply(&g, d, &vh, &vh, &mut k2);
    for i in 0..d {
        x[i] += vh[i];
        delta[i] += k2[i];
    }
    Some(())
}

/// Covariant metric of the analytic unit sphere in (longitude, latitude)
/// coordinates; the workhorse of the analytic test suite.
pub fn sphere_metric_cov(x: &[f64], out: &mut [f64]) {
    let c = x[1].cos();
    out[0] = c * c;
    out[1] = 0.0;
    out[2] = 0.0;
    out[3] = 1.0;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Segment;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(lo: f64, hi: f64, n: usize) -> GridSpec {
        GridSpec::new(vec![lo, lo], vec![hi, hi], vec![n, n]).unwrap()
    }

    fn sphere_field(n: usize) -> MetricField {
        MetricField::from_fn(sphere_grid(-0.8, 0.8, n), 2, sphere_metric_cov).unwrap()
    }

    #[test]
    fn isotropic_velocities_give_identity_metric() {
        let grid = GridSpec::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![5, 5]).unwrap();
        let mut acc = AccumulatorGrid::new(grid, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut segs = Vec::new();
        for _ in 0..20_000 {
            let x = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
            let v = [
                rng.sample::<f64, _>(rand_distr::StandardNormal),
                rng.sample::<f64, _>(rand_distr::StandardNormal),
            ];
            let dt = 1e-3;
            segs.push(
                Segment::new(2, dt, vec![x[0], x[1], x[0] + v[0] * dt, x[1] + v[1] * dt]).unwrap(),
            );
        }
        acc.accumulate(&Series::from_segments(2, segs).unwrap());
        let metric = finalize_metric(&acc, &MetricOptions { min_count: 50, smooth_sigma: None }).unwrap();
        assert!(metric.n_valid() > 15);
        for node in 0..metric.grid.n_nodes() {
            if metric.valid[node] {
                let g = metric.g_con_at(node);
                assert!((g[0] - 1.0).abs() < 0.25, "g00 {}", g[0]);
                assert!((g[3] - 1.0).abs() < 0.25, "g11 {}", g[3]);
                assert!(g[1].abs() < 0.2, "g01 {}", g[1]);
            }
        }
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut a = CellAccumulator::new(2);
        a.push(&[1.0, 2.0]);
        a.push(&[-0.5, 0.3]);
        let empty = CellAccumulator::new(2);
        assert_eq!(merge_accumulators(&a, &empty), a);
    }

    proptest! {
        #[test]
        fn chunked_merge_equals_single_pass(
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..200),
            split in 1usize..100,
        ) {
            let split = split.min(vals.len() - 1).max(1);
            let mut full = CellAccumulator::new(2);
            let mut p1 = CellAccumulator::new(2);
            let mut p2 = CellAccumulator::new(2);
            for (i, (x, y)) in vals.iter().enumerate() {
                full.push(&[*x, *y]);
                if i < split { p1.push(&[*x, *y]); } else { p2.push(&[*x, *y]); }
            }
            let merged = merge_accumulators(&p1, &p2);
            let swapped = merge_accumulators(&p2, &p1);
            let c_full = full.covariance(1).unwrap();
            let c_merged = merged.covariance(1).unwrap();
            let c_swapped = swapped.covariance(1).unwrap();
            let scale = c_full.amax().max(1e-30);
            prop_assert!((&c_full - &c_merged).amax() / scale < 1e-12);
            prop_assert!((&c_merged - &c_swapped).amax() / scale < 1e-12);
        }
    }

    #[test]
    fn constant_metric_has_zero_connection() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![8, 8]).unwrap();
        let metric = MetricField::from_fn(grid, 2, |_, out| {
            out.copy_from_slice(&[2.0, 0.3, 0.3, 1.5]);
        })
        .unwrap();
        let conn = christoffel(&metric).unwrap();
        assert!(conn.gamma.iter().all(|g| g.abs() <= 1e-10));
    }

    #[test]
    fn connection_invariant_under_constant_scaling() {
        let f1 = sphere_field(32);
        let f2 = MetricField::from_fn(sphere_grid(-0.8, 0.8, 32), 2, |x, out| {
            sphere_metric_cov(x, out);
            out.iter_mut().for_each(|v| *v *= 37.5);
        })
        .unwrap();
        let c1 = christoffel(&f1).unwrap();
        let c2 = christoffel(&f2).unwrap();
        for (a, b) in c1.gamma.iter().zip(&c2.gamma) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sphere_connection_matches_closed_form() {
        let field = sphere_field(64);
        let conn = christoffel(&field).unwrap();
        let g = &conn.grid;
        let d = 2;
        let s2 = d * d;
        for node in 0..g.n_nodes() {
            let coords = g.coords(node);
            // interior nodes only: central differences on both axes
            if coords.iter().zip(&g.counts).any(|(&c, &n)| c == 0 || c + 1 == n) {
                continue;
            }
            let x = g.node_position(&coords);
            let theta = x[1];
            let ga = conn.gamma_at(node);
            let gamma_phi_phitheta = ga[0 * s2 + 0 * d + 1];
            let gamma_theta_phiphi = ga[1 * s2 + 0 * d + 0];
            assert!(
                (gamma_phi_phitheta - (-theta.tan())).abs() < 1e-3,
                "Gamma^phi_pt {} vs {}",
                gamma_phi_phitheta,
                -theta.tan()
            );
            assert!(
                (gamma_theta_phiphi - theta.sin() * theta.cos()).abs() < 1e-3,
                "Gamma^theta_pp {} vs {}",
                gamma_theta_phiphi,
                theta.sin() * theta.cos()
            );
        }
    }

    #[test]
    fn flat_metric_has_zero_curvature() {
        let grid = GridSpec::new(vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0], vec![6, 6, 6]).unwrap();
        let metric = MetricField::from_fn(grid, 3, |_, out| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]);
        })
        .unwrap();
        let conn = christoffel(&metric).unwrap();
        let curv = riemann(&conn).unwrap();
        assert!(curv.riemann.iter().all(|v| v.abs() <= 1e-10));
    }

    #[test]
    fn sphere_gaussian_curvature_is_one() {
        let field = sphere_field(64);
        let conn = christoffel(&field).unwrap();
        let curv = riemann(&conn).unwrap();
        let g = &curv.grid;
        let d = 2;
        let (s2, s3) = (d * d, d * d * d);
        let mut checked = 0;
        for node in 0..g.n_nodes() {
            let coords = g.coords(node);
            if coords.iter().zip(&g.counts).any(|(&c, &n)| c < 2 || c + 2 >= n) {
                continue;
            }
            if !curv.valid[node] {
                continue;
            }
            let x = g.node_position(&coords);
            let r = curv.riemann_at(node);
            // R_{1212} = g_{1k} R^k_{212}; for the sphere only k=1 contributes
            let g11 = x[1].cos().powi(2);
            let r_lower = g11 * r[0 * s3 + 1 * s2 + 0 * d + 1];
            let det = g11;
            let k = r_lower / det;
            assert!((k - 1.0).abs() < 1e-2, "K = {k} at {:?}", x);
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn block_metric_has_block_curvature() {
        // sphere block x flat line: off-block curvature components vanish
        let grid =
            GridSpec::new(vec![-0.6, -0.6, -1.0], vec![0.6, 0.6, 1.0], vec![16, 16, 16]).unwrap();
        let metric = MetricField::from_fn(grid, 3, |x, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            let c = x[1].cos();
            out[0] = c * c;
            out[4] = 1.0;
            out[8] = 1.0;
        })
        .unwrap();
        let conn = christoffel(&metric).unwrap();
        let curv = riemann(&conn).unwrap();
        let d = 3;
        let (s2, s3, s4) = (d * d, d * d * d, d * d * d * d);
        for node in 0..curv.grid.n_nodes() {
            if !curv.valid[node] {
                continue;
            }
            let r = &curv.riemann[node * s4..(node + 1) * s4];
            for k in 0..d {
                for l in 0..d {
                    for m in 0..d {
                        for nn in 0..d {
                            let in_a =
                                |i: usize| i < 2;
                            let all_a = in_a(k) && in_a(l) && in_a(m) && in_a(nn);
                            let all_b = !in_a(k) && !in_a(l) && !in_a(m) && !in_a(nn);
                            if !all_a && !all_b {
                                assert!(
                                    r[k * s3 + l * s2 + m * d + nn].abs() < 1e-9,
                                    "off-block R[{k}{l}{m}{nn}]"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn transport_in_flat_space_is_identity() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![8, 8]).unwrap();
        let metric = MetricField::from_fn(grid, 2, |_, out| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        })
        .unwrap();
        let conn = christoffel(&metric).unwrap();
        let path: Vec<Vec<f64>> =
            (0..20).map(|i| vec![0.1 + 0.04 * i as f64, 0.5 + 0.01 * i as f64]).collect();
        let v = parallel_transport(&conn, &[0.3, -0.2], &path).unwrap();
        assert_relative_eq!(v[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(v[1], -0.2, epsilon = 1e-12);
    }

    #[test]
    fn latitude_loop_holonomy_matches_closed_form() {
        // transport around theta = 0.5 with the analytic connection sampled
        // on a grid; rotation angle must be 2 pi sin(0.5)
        let theta0 = 0.5;
        let grid = GridSpec::new(
            vec![-0.3, theta0 - 0.2],
            vec![std::f64::consts::TAU + 0.3, theta0 + 0.2],
            vec![512, 9],
        )
        .unwrap();
        let conn = ConnectionField::from_fn(grid, 2, |x, out| {
            let theta = x[1];
            out.iter_mut().for_each(|v| *v = 0.0);
            out[0 * 4 + 0 * 2 + 1] = -theta.tan();
            out[0 * 4 + 1 * 2 + 0] = -theta.tan();
            out[1 * 4 + 0 * 2 + 0] = theta.sin() * theta.cos();
        });
        let steps = 10_000;
        let path: Vec<Vec<f64>> = (0..=steps)
            .map(|i| vec![std::f64::consts::TAU * i as f64 / steps as f64, theta0])
            .collect();
        let v0 = [0.0, 1.0];
        let v1 = parallel_transport(&conn, &v0, &path).unwrap();
        // angle in the orthonormal frame (sqrt(g11) dphi, dtheta)
        let c = theta0.cos();
        let a0 = [v0[0] * c, v0[1]];
        let a1 = [v1[0] * c, v1[1]];
        let dot = a0[0] * a1[0] + a0[1] * a1[1];
        let n0 = (a0[0] * a0[0] + a0[1] * a0[1]).sqrt();
        let n1 = (a1[0] * a1[0] + a1[1] * a1[1]).sqrt();
        let angle = (dot / (n0 * n1)).clamp(-1.0, 1.0).acos();
        let expected = std::f64::consts::TAU * theta0.sin();
        assert!((angle - expected).abs() < 1e-3, "angle {angle} vs {expected}");
        // norm preserved under the metric
        assert_relative_eq!(n0, n1, max_relative = 1e-6);
    }

    #[test]
    fn transport_preserves_metric_inner_products() {
        let field = sphere_field(48);
        let conn = christoffel(&field).unwrap();
        let path: Vec<Vec<f64>> = (0..=100)
            .map(|i| {
                let t = i as f64 / 100.0;
                vec![-0.4 + 0.8 * t, 0.3 * (3.0 * t).sin()]
            })
            .collect();
        let u0 = [0.7, 0.1];
        let v0 = [-0.2, 0.5];
        let u1 = parallel_transport(&conn, &u0, &path).unwrap();
        let v1 = parallel_transport(&conn, &v0, &path).unwrap();
        let ip0 = field.inner(&path[0], &u0, &v0).unwrap();
        let ip1 = field.inner(path.last().unwrap(), &u1, &v1).unwrap();
        assert_relative_eq!(ip0, ip1, max_relative = 1e-3);
    }

    #[test]
    fn geodesic_in_flat_space_is_straight() {
        let grid = GridSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![8, 8]).unwrap();
        let metric = MetricField::from_fn(grid, 2, |_, out| {
            out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        })
        .unwrap();
        let conn = christoffel(&metric).unwrap();
        let path = geodesic_step(&conn, &[0.1, 0.1], &[0.05, 0.03], 10);
        assert!(path.complete);
        for (i, p) in path.points.iter().enumerate() {
            assert_relative_eq!(p[0], 0.1 + 0.05 * i as f64, epsilon = 1e-12);
            assert_relative_eq!(p[1], 0.1 + 0.03 * i as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn equator_is_a_geodesic() {
        let field = sphere_field(48);
        let conn = christoffel(&field).unwrap();
        let path = geodesic_step(&conn, &[-0.5, 0.0], &[0.02, 0.0], 50);
        assert!(path.complete);
        for p in &path.points {
            assert!(p[1].abs() < 1e-10, "left the equator: {:?}", p);
        }
    }

    #[test]
    fn geodesic_truncates_at_region_boundary() {
        let field = sphere_field(16);
        let conn = christoffel(&field).unwrap();
        let path = geodesic_step(&conn, &[0.0, 0.0], &[0.1, 0.0], 100);
        assert!(!path.complete);
        assert!(path.points.len() < 101);
    }

    #[test]
    fn geodesic_endpoint_converges_second_order() {
        // Richardson: halving the transfer size should shrink the endpoint
        // error by about 4x against a fine-step reference.
        let field = sphere_field(96);
        let conn = christoffel(&field).unwrap();
        let start = [-0.3, -0.3];
        let dir = [0.6, 0.45];
        let endpoint = |steps: usize| {
            let delta: Vec<f64> = dir.iter().map(|v| v / steps as f64).collect();
            let p = geodesic_step(&conn, &start, &delta, steps);
            assert!(p.complete);
            p.points.last().unwrap().clone()
        };
        let reference = endpoint(512);
        let e1 = endpoint(16);
        let e2 = endpoint(32);
        let d1: f64 = e1.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let d2: f64 = e2.iter().zip(&reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(d2 < d1 / 2.8, "halving gave {d1} -> {d2}");
    }

    #[test]
    fn empty_series_is_rejected() {
        let grid = GridSpec::new(vec![0.0], vec![1.0], vec![5]).unwrap();
        let e = estimate_metric(&Series::new(1), &grid, &MetricOptions::default());
        assert!(e.is_err());
    }
}
