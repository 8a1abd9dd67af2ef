//! Versioned binary artifact formats and the CSV mirror.
//!
//! All payloads are little-endian 64-bit floats. Every file starts with a
//! four-byte magic and a u32 version so stages can reject mismatched
//! inputs early. Trajectory files are the interchange format between
//! stages: magic "GBSS", version, dim, segment count, then per segment its
//! length, dt and row-major points.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::geometry::{ConnectionField, CurvatureField, MetricField};
use crate::grid::GridSpec;
use crate::separation::{GeodesicChart, Projector};
use crate::series::{Segment, Series};

const TRAJECTORY_MAGIC: &[u8; 4] = b"GBSS";
const METRIC_MAGIC: &[u8; 4] = b"GMTR";
const CONNECTION_MAGIC: &[u8; 4] = b"GCNN";
const CURVATURE_MAGIC: &[u8; 4] = b"GCRV";
const EMBEDDING_MAGIC: &[u8; 4] = b"GLLE";
const CHART_MAGIC: &[u8; 4] = b"GCHT";
const PROJECTOR_MAGIC: &[u8; 4] = b"GPRJ";
const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn bitmask(&mut self, flags: &[bool]) -> Result<()> {
        let mut byte = 0u8;
        for (i, &f) in flags.iter().enumerate() {
            if f {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                self.inner.write_all(&[byte])?;
                byte = 0;
            }
        }
        if flags.len() % 8 != 0 {
            self.inner.write_all(&[byte])?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        if &buf != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&buf),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }
    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
    fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.inner.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.inner.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.inner.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bitmask(&mut self, n: usize) -> Result<Vec<bool>> {
        let mut bytes = vec![0u8; n.div_ceil(8)];
        self.inner.read_exact(&mut bytes)?;
        Ok((0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
    }
}

fn open_writer(path: &Path) -> Result<Writer<BufWriter<File>>> {
    Ok(Writer { inner: BufWriter::new(File::create(path)?) })
}

fn open_reader(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader { inner: BufReader::new(File::open(path)?) })
}

// ---------------------------------------------------------------------------
// trajectory / series
// ---------------------------------------------------------------------------

pub fn write_series(path: &Path, series: &Series) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(TRAJECTORY_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(series.dim() as u32)?;
    w.u64(series.n_segments() as u64)?;
    for seg in series.segments() {
        w.u64(seg.len() as u64)?;
        w.f64(seg.dt)?;
        w.f64_slice(seg.raw())?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<Series> {
    let mut r = open_reader(path)?;
    r.magic(TRAJECTORY_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let n_seg = r.u64()? as usize;
    let mut segments = Vec::with_capacity(n_seg);
    for _ in 0..n_seg {
        let len = r.u64()? as usize;
        let dt = r.f64()?;
        let data = r.f64_vec(len * dim)?;
        segments.push(Segment::new(dim, dt, data)?);
    }
    Series::from_segments(dim, segments)
}

/// CSV mirror of the trajectory format: one row per point with segment
/// index, point index, dt and the coordinates. Floats print in shortest
/// round-trip form, so export followed by import is lossless.
pub fn write_series_csv(path: &Path, series: &Series) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "segment,point,dt")?;
    for c in 0..series.dim() {
        write!(f, ",c{c}")?;
    }
    writeln!(f)?;
    for (si, seg) in series.segments().iter().enumerate() {
        for (pi, p) in seg.iter_points().enumerate() {
            write!(f, "{si},{pi},{:?}", seg.dt)?;
            for v in p {
                write!(f, ",{v:?}")?;
            }
            writeln!(f)?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_series_csv(path: &Path) -> Result<Series> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "segment" || cols[1] != "point" || cols[2] != "dt" {
        return Err(Error::Format("unexpected csv header".into()));
    }
    let dim = cols.len() - 3;
    let mut segments: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut last_seg = usize::MAX;
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!("row {}: wrong field count", ln + 2)));
        }
        let seg_idx: usize =
            fields[0].parse().map_err(|_| Error::Format(format!("row {}: bad segment", ln + 2)))?;
        let dt: f64 =
            fields[2].parse().map_err(|_| Error::Format(format!("row {}: bad dt", ln + 2)))?;
        if seg_idx != last_seg {
            segments.push((dt, Vec::new()));
            last_seg = seg_idx;
        }
        let data = &mut segments.last_mut().unwrap().1;
        for f in &fields[3..] {
            data.push(f.parse().map_err(|_| Error::Format(format!("row {}: bad value", ln + 2)))?);
        }
    }
    let segs: Result<Vec<Segment>> =
        segments.into_iter().map(|(dt, data)| Segment::new(dim, dt, data)).collect();
    Series::from_segments(dim, segs?)
}

// ---------------------------------------------------------------------------
// grid-backed tensor fields
// ---------------------------------------------------------------------------

fn write_grid<W: Write>(w: &mut Writer<W>, grid: &GridSpec) -> Result<()> {
    w.u32(grid.dim() as u32)?;
    for a in 0..grid.dim() {
        w.f64(grid.mins[a])?;
        w.f64(grid.maxs[a])?;
        w.u64(grid.counts[a] as u64)?;
    }
    Ok(())
}

fn read_grid<R: Read>(r: &mut Reader<R>) -> Result<GridSpec> {
    let d = r.u32()? as usize;
    let mut mins = Vec::with_capacity(d);
    let mut maxs = Vec::with_capacity(d);
    let mut counts = Vec::with_capacity(d);
    for _ in 0..d {
        mins.push(r.f64()?);
        maxs.push(r.f64()?);
        counts.push(r.u64()? as usize);
    }
    GridSpec::new(mins, maxs, counts)
}

pub fn write_metric(path: &Path, field: &MetricField) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(METRIC_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_grid(&mut w, &field.grid)?;
    w.u32(field.dim as u32)?;
    w.f64_slice(&field.g_con)?;
    w.f64_slice(&field.g_cov)?;
    for &c in &field.counts {
        w.u64(c)?;
    }
    w.bitmask(&field.valid)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_metric(path: &Path) -> Result<MetricField> {
    let mut r = open_reader(path)?;
    r.magic(METRIC_MAGIC)?;
    r.version()?;
    let grid = read_grid(&mut r)?;
    let dim = r.u32()? as usize;
    let n = grid.n_nodes();
    let g_con = r.f64_vec(n * dim * dim)?;
    let g_cov = r.f64_vec(n * dim * dim)?;
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        counts.push(r.u64()?);
    }
    let valid = r.bitmask(n)?;
    Ok(MetricField { grid, dim, g_con, g_cov, valid, counts })
}

pub fn write_connection(path: &Path, field: &ConnectionField) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(CONNECTION_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_grid(&mut w, &field.grid)?;
    w.u32(field.dim as u32)?;
    w.f64_slice(&field.gamma)?;
    w.bitmask(&field.valid)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_connection(path: &Path) -> Result<ConnectionField> {
    let mut r = open_reader(path)?;
    r.magic(CONNECTION_MAGIC)?;
    r.version()?;
    let grid = read_grid(&mut r)?;
    let dim = r.u32()? as usize;
    let n = grid.n_nodes();
    let gamma = r.f64_vec(n * dim * dim * dim)?;
    let valid = r.bitmask(n)?;
    Ok(ConnectionField { grid, dim, gamma, valid })
}

pub fn write_curvature(path: &Path, field: &CurvatureField) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(CURVATURE_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    write_grid(&mut w, &field.grid)?;
    w.u32(field.dim as u32)?;
    w.f64_slice(&field.riemann)?;
    w.bitmask(&field.valid)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_curvature(path: &Path) -> Result<CurvatureField> {
    let mut r = open_reader(path)?;
    r.magic(CURVATURE_MAGIC)?;
    r.version()?;
    let grid = read_grid(&mut r)?;
    let dim = r.u32()? as usize;
    let n = grid.n_nodes();
    let riemann = r.f64_vec(n * dim * dim * dim * dim)?;
    let valid = r.bitmask(n)?;
    Ok(CurvatureField { grid, dim, riemann, valid })
}

// ---------------------------------------------------------------------------
// embedding model sidecar
// ---------------------------------------------------------------------------

pub fn write_embedding(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(EMBEDDING_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(model.input_dim as u32)?;
    w.u32(model.output_dim as u32)?;
    w.u32(model.k as u32)?;
    w.u64(model.n_landmarks() as u64)?;
    w.f64(model.regularization)?;
    w.f64(model.extrapolation_threshold)?;
    w.f64_slice(&model.landmarks)?;
    for &i in &model.neighbors {
        w.u32(i)?;
    }
    w.f64_slice(&model.weights)?;
    w.f64_slice(&model.embedded)?;
    w.f64_slice(&model.eigenvalues)?;
    w.f64_slice(&model.eigen_residuals)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingModel> {
    let mut r = open_reader(path)?;
    r.magic(EMBEDDING_MAGIC)?;
    r.version()?;
    let input_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let k = r.u32()? as usize;
    let count = r.u64()? as usize;
    let regularization = r.f64()?;
    let extrapolation_threshold = r.f64()?;
    let landmarks = r.f64_vec(count * input_dim)?;
    let mut neighbors = Vec::with_capacity(count * k);
    for _ in 0..count * k {
        neighbors.push(r.u32()?);
    }
    let weights = r.f64_vec(count * k)?;
    let embedded = r.f64_vec(count * output_dim)?;
    let eigenvalues = r.f64_vec(output_dim)?;
    let eigen_residuals = r.f64_vec(output_dim)?;
    Ok(EmbeddingModel {
        landmarks,
        input_dim,
        output_dim,
        k,
        neighbors,
        weights,
        embedded,
        eigenvalues,
        eigen_residuals,
        regularization,
        extrapolation_threshold,
    })
}

// ---------------------------------------------------------------------------
// geodesic chart and projectors
// ---------------------------------------------------------------------------

pub fn write_chart(path: &Path, chart: &GeodesicChart) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(CHART_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(chart.dim as u32)?;
    w.f64(chart.step)?;
    w.u32(chart.block_dims.len() as u32)?;
    for &b in &chart.block_dims {
        w.u32(b as u32)?;
    }
    for &e in &chart.extents {
        w.u64(e as u64)?;
    }
    w.f64_slice(&chart.base_point)?;
    w.f64_slice(&chart.xs)?;
    w.f64_slice(&chart.frames)?;
    w.bitmask(&chart.valid)?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_chart(path: &Path) -> Result<GeodesicChart> {
    let mut r = open_reader(path)?;
    r.magic(CHART_MAGIC)?;
    r.version()?;
    let dim = r.u32()? as usize;
    let step = r.f64()?;
    let n_blocks = r.u32()? as usize;
    let mut block_dims = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        block_dims.push(r.u32()? as usize);
    }
    let mut extents = Vec::with_capacity(dim);
    for _ in 0..dim {
        extents.push(r.u64()? as usize);
    }
    let base_point = r.f64_vec(dim)?;
    let n_nodes: usize = extents.iter().map(|e| 2 * e + 1).product();
    let xs = r.f64_vec(n_nodes * dim)?;
    let frames = r.f64_vec(n_nodes * dim * dim)?;
    let valid = r.bitmask(n_nodes)?;
    Ok(GeodesicChart { base_point, dim, extents, step, block_dims, xs, frames, valid })
}

pub fn write_projectors(path: &Path, projectors: &[Projector]) -> Result<()> {
    let mut w = open_writer(path)?;
    w.inner.write_all(PROJECTOR_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(projectors.len() as u32)?;
    if let Some(p) = projectors.first() {
        w.u32(p.matrix.nrows() as u32)?;
    } else {
        w.u32(0)?;
    }
    for p in projectors {
        w.u32(p.rank as u32)?;
        w.f64_slice(&p.base_point)?;
        let d = p.matrix.nrows();
        for i in 0..d {
            for j in 0..d {
                w.f64(p.matrix[(i, j)])?;
            }
        }
        w.f64(p.idempotency_residual)?;
        w.f64(p.commutation_residual)?;
        w.f64(p.self_adjoint_residual)?;
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_projectors(path: &Path) -> Result<Vec<Projector>> {
    let mut r = open_reader(path)?;
    r.magic(PROJECTOR_MAGIC)?;
    r.version()?;
    let count = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let base_point = r.f64_vec(d)?;
        let data = r.f64_vec(d * d)?;
        let matrix = DMatrix::from_row_slice(d, d, &data);
        let idempotency_residual = r.f64()?;
        let commutation_residual = r.f64()?;
        let self_adjoint_residual = r.f64()?;
        out.push(Projector {
            matrix,
            rank,
            base_point,
            idempotency_residual,
            commutation_residual,
            self_adjoint_residual,
        });
    }
    Ok(out)
}
