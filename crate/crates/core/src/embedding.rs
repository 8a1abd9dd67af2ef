//! Locally linear embedding with an out-of-sample extension.
//!
//! The model is fit on a landmark subset: per-landmark reconstruction
//! weights over its k nearest neighbors (sum-to-one, ridge-regularized
//! Gram), then the bottom eigenvectors of (I-W)^T (I-W) with the constant
//! vector discarded. Out-of-sample points are embedded by computing the
//! same reconstruction weights against their nearest landmarks and applying
//! them to the landmark embeddings.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::series::Series;

/// Controls for fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct LleConfig {
    pub k: usize,
    pub target_dim: usize,
    /// Ridge added to the local Gram as a fraction of its trace.
    pub regularization: f64,
    /// Out-of-sample guard: reject queries whose nearest landmark is
    /// farther than this factor times the median k-th neighbor distance.
    pub extrapolation_factor: f64,
    /// Landmark counts at or below this use the dense eigensolver.
    pub dense_eigen_threshold: usize,
    /// Seed for the iterative eigensolver start block.
    pub seed: u64,
}

impl Default for LleConfig {
    fn default() -> Self {
        Self {
            k: 12,
            target_dim: 3,
            regularization: 1e-3,
            extrapolation_factor: 3.0,
            dense_eigen_threshold: 2500,
            seed: 0,
        }
    }
}

/// Fitted landmark model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    /// Landmark points, row-major N x m.
    pub landmarks: Vec<f64>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub k: usize,
    /// k nearest landmark indices per landmark, row-major.
    pub neighbors: Vec<u32>,
    /// Reconstruction weights per landmark, rows sum to one.
    pub weights: Vec<f64>,
    /// Embedded landmark coordinates, row-major N x n; zero mean and unit
    /// covariance over landmarks.
    pub embedded: Vec<f64>,
    /// The n retained eigenvalues (constant mode already discarded).
    pub eigenvalues: Vec<f64>,
    /// Residual norms ||M y - lambda y|| of the retained eigenpairs.
    pub eigen_residuals: Vec<f64>,
    pub regularization: f64,
    pub extrapolation_threshold: f64,
}

impl EmbeddingModel {
    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len() / self.input_dim
    }

    pub fn landmark(&self, i: usize) -> &[f64] {
        &self.landmarks[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn embedded_point(&self, i: usize) -> &[f64] {
        &self.embedded[i * self.output_dim..(i + 1) * self.output_dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the k smallest entries (excluding `skip`), ascending by value.
fn k_smallest(dists: &[f64], k: usize, skip: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..dists.len() as u32).filter(|&i| i as usize != skip).collect();
    if idx.len() > k {
        idx.select_nth_unstable_by(k - 1, |&a, &b| {
            dists[a as usize].partial_cmp(&dists[b as usize]).unwrap()
        });
        idx.truncate(k);
    }
    idx.sort_by(|&a, &b| dists[a as usize].partial_cmp(&dists[b as usize]).unwrap());
    idx
}

/// Sum-to-one reconstruction weights of `p` against the given landmarks.
fn reconstruction_weights(
    p: &[f64],
    landmarks: &EmbeddingModelView,
    neighbors: &[u32],
    regularization: f64,
) -> Result<Vec<f64>> {
    let k = neighbors.len();
    let m = landmarks.input_dim;
    let mut diffs = vec![0.0; k * m];
    for (a, &j) in neighbors.iter().enumerate() {
        let lj = landmarks.landmark(j as usize);
        for c in 0..m {
            diffs[a * m + c] = p[c] - lj[c];
        }
    }
    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut acc = 0.0;
            for c in 0..m {
                acc += diffs[a * m + c] * diffs[b * m + c];
            }
            gram[(a, b)] = acc;
            gram[(b, a)] = acc;
        }
    }
    let trace = gram.trace();
    let ones = DVector::from_element(k, 1.0);
    let mut ridge = regularization * trace.max(1e-300) / k as f64;
    for _ in 0..6 {
        let mut reg = gram.clone();
        for a in 0..k {
            reg[(a, a)] += ridge;
        }
        if let Some(chol) = Cholesky::new(reg) {
            let mut w = chol.solve(&ones);
            let s: f64 = w.iter().sum();
            if s.abs() > 1e-300 {
                w /= s;
                return Ok(w.data.into());
            }
        }
        ridge = (ridge * 10.0).max(1e-12);
    }
    Err(Error::Eigen("local Gram solve failed despite regularization".into()))
}

/// Borrowed view used by weight computation for both fit and query paths.
struct EmbeddingModelView<'a> {
    landmarks: &'a [f64],
    input_dim: usize,
}

impl<'a> EmbeddingModelView<'a> {
    fn landmark(&self, i: usize) -> &[f64] {
        &self.landmarks[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

/// Fit the landmark model. `data` is row-major N x m.
pub fn fit_lle(data: &[f64], input_dim: usize, cfg: &LleConfig) -> Result<EmbeddingModel> {
    let m = input_dim;
    let n = cfg.target_dim;
    let k = cfg.k;
    if m == 0 || data.len() % m != 0 {
        return Err(Error::InvalidArgument("data length must be a multiple of input_dim".into()));
    }
    let count = data.len() / m;
    if !(k > n) {
        return Err(Error::InvalidArgument(format!(
            "need neighbor count k > target dim, got k={k}, n={n}"
        )));
    }
    if count < 4 * k {
        return Err(Error::InvalidArgument(format!(
            "need well over k={k} landmarks, got {count}"
        )));
    }
    if m < n {
        return Err(Error::InvalidArgument("input dim below target dim".into()));
    }

    let view = EmbeddingModelView { landmarks: data, input_dim: m };

    // k nearest neighbors per landmark (exact, blocked)
    let neighbors: Vec<u32> = (0..count)
        .into_par_iter()
        .flat_map_iter(|i| {
            let pi = view.landmark(i);
            let dists: Vec<f64> = (0..count).map(|j| sq_dist(pi, view.landmark(j))).collect();
            k_smallest(&dists, k, i)
        })
        .collect();

    // per-point reconstruction weights
    let weights: Result<Vec<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            reconstruction_weights(view.landmark(i), &view, &neighbors[i * k..(i + 1) * k], cfg.regularization)
        })
        .collect();
    let weights: Vec<f64> = weights?.into_iter().flatten().collect();

    // bottom n+2 eigenpairs of (I-W)^T (I-W): one extra for the constant
    // mode plus slack against degeneracy at the bottom of the spectrum
    let want = n + 2;
    let (eigvals, eigvecs) = if count <= cfg.dense_eigen_threshold {
        dense_bottom_eigen(count, k, &neighbors, &weights, want)?
    } else {
        iterative_bottom_eigen(count, k, &neighbors, &weights, want, cfg.seed)?
    };

    // deflate the constant direction from every candidate, orthonormalize in
    // eigenvalue order, keep the first n independent vectors
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for v0 in eigvecs.iter() {
        if kept.len() == n {
            break;
        }
        let mut v = v0.clone();
        let mean = v.iter().sum::<f64>() / count as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        for kv in &kept {
            let d: f64 = v.iter().zip(kv).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(kv).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // the constant mode or a duplicate direction
        }
        v.iter_mut().for_each(|x| *x /= norm);
        // deterministic sign: largest-magnitude entry positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        kept.push(v);
    }
    if kept.len() < n {
        return Err(Error::Eigen(format!(
            "only {} independent embedding directions among the bottom {} eigenvectors",
            kept.len(),
            want
        )));
    }
    drop(eigvals);

    let mut embedded = vec![0.0; count * n];
    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigen_residuals = Vec::with_capacity(n);
    let scale = (count as f64).sqrt();
    let mut mv = vec![0.0; count];
    for (c, v) in kept.iter().enumerate() {
        // Rayleigh quotient of the deflated vector and its residual
        apply_m(count, k, &neighbors, &weights, v, &mut mv);
        let lambda: f64 = mv.iter().zip(v).map(|(a, b)| a * b).sum();
        let res = mv.iter().zip(v).map(|(a, b)| (a - lambda * b) * (a - lambda * b)).sum::<f64>().sqrt();
        for i in 0..count {
            embedded[i * n + c] = v[i] * scale;
        }
        eigenvalues.push(lambda);
        eigen_residuals.push(res);
    }

    // extrapolation threshold from the median k-th neighbor distance
    let mut kth: Vec<f64> = (0..count)
        .map(|i| {
            let j = neighbors[i * k + k - 1] as usize;
            sq_dist(view.landmark(i), view.landmark(j)).sqrt()
        })
        .collect();
    kth.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = cfg.extrapolation_factor * kth[count / 2];

    Ok(EmbeddingModel {
        landmarks: data.to_vec(),
        input_dim: m,
        output_dim: n,
        k,
        neighbors,
        weights,
        embedded,
        eigenvalues,
        eigen_residuals,
        regularization: cfg.regularization,
        extrapolation_threshold: threshold,
    })
}

/// y -> (I-W)^T (I-W) y using the sparse weight rows.
fn apply_m(count: usize, k: usize, neighbors: &[u32], weights: &[f64], y: &[f64], out: &mut [f64]) {
    let mut ay = vec![0.0; count];
    for i in 0..count {
        let mut v = y[i];
        for a in 0..k {
            v -= weights[i * k + a] * y[neighbors[i * k + a] as usize];
        }
        ay[i] = v;
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..count {
        let v = ay[i];
        out[i] += v;
        for a in 0..k {
            out[neighbors[i * k + a] as usize] -= weights[i * k + a] * v;
        }
    }
}

fn eigen_residual(count: usize, k: usize, neighbors: &[u32], weights: &[f64], v: &[f64], lambda: f64) -> f64 {
    let mut mv = vec![0.0; count];
    apply_m(count, k, neighbors, weights, v, &mut mv);
    mv.iter().zip(v).map(|(a, b)| (a - lambda * b) * (a - lambda * b)).sum::<f64>().sqrt()
}

/// Dense symmetric eigendecomposition; returns the `want` smallest pairs.
fn dense_bottom_eigen(
    count: usize,
    k: usize,
    neighbors: &[u32],
    weights: &[f64],
    want: usize,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    // M = sum_r a_r a_r^T over sparse rows a_r of (I-W)
    let mut m = DMatrix::<f64>::zeros(count, count);
    let mut row_idx = Vec::with_capacity(k + 1);
    let mut row_val = Vec::with_capacity(k + 1);
    for r in 0..count {
        row_idx.clear();
        row_val.clear();
        row_idx.push(r);
        row_val.push(1.0);
        for a in 0..k {
            row_idx.push(neighbors[r * k + a] as usize);
            row_val.push(-weights[r * k + a]);
        }
        for p in 0..row_idx.len() {
            for q in 0..row_idx.len() {
                m[(row_idx[p], row_idx[q])] += row_val[p] * row_val[q];
            }
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut vals = Vec::with_capacity(want);
    let mut vecs = Vec::with_capacity(want);
    for &i in order.iter().take(want) {
        vals.push(eig.eigenvalues[i]);
        vecs.push(eig.eigenvectors.column(i).iter().cloned().collect());
    }
    Ok((vals, vecs))
}

/// Deflated inverse subspace iteration with conjugate-gradient solves, for
/// landmark counts where the dense path is too expensive. The constant
/// vector (the exact null mode) is projected out throughout; it is
/// reattached as the first returned pair with eigenvalue 0.
fn iterative_bottom_eigen(
    count: usize,
    k: usize,
    neighbors: &[u32],
    weights: &[f64],
    want: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n_vec = want - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj_const = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / count as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    // crude upper bound on the spectrum for tolerance scaling
    let mut probe: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
    proj_const(&mut probe);
    let mut tmp = vec![0.0; count];
    let mut lam_max = 1.0f64;
    for _ in 0..20 {
        apply_m(count, k, neighbors, weights, &probe, &mut tmp);
        let nrm = dot(&tmp, &tmp).sqrt();
        if nrm < 1e-300 {
            break;
        }
        lam_max = nrm;
        probe.iter_mut().zip(&tmp).for_each(|(p, t)| *p = t / nrm);
        proj_const(&mut probe);
    }

    // deflated CG for M y = b on the complement of the constant vector
    let cg = |b: &[f64], x0: &[f64]| -> Vec<f64> {
        let mut x = x0.to_vec();
        let mut mx = vec![0.0; count];
        apply_m(count, k, neighbors, weights, &x, &mut mx);
        let mut r: Vec<f64> = b.iter().zip(&mx).map(|(bb, mm)| bb - mm).collect();
        proj_const(&mut r);
        let mut p = r.clone();
        let mut rs = dot(&r, &r);
        let b_norm = dot(b, b).sqrt().max(1e-300);
        let mut mp = vec![0.0; count];
        for _ in 0..4000 {
            if rs.sqrt() < 1e-10 * b_norm {
                break;
            }
            apply_m(count, k, neighbors, weights, &p, &mut mp);
            proj_const(&mut mp);
            let alpha = rs / dot(&p, &mp).max(1e-300);
            for i in 0..count {
                x[i] += alpha * p[i];
                r[i] -= alpha * mp[i];
            }
            let rs_new = dot(&r, &r);
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..count {
                p[i] = r[i] + beta * p[i];
            }
        }
        proj_const(&mut x);
        x
    };

    // start block
    let mut basis: Vec<Vec<f64>> = (0..n_vec)
        .map(|_| {
            let mut v: Vec<f64> = (0..count).map(|_| rng.random_range(-1.0..1.0)).collect();
            proj_const(&mut v);
            v
        })
        .collect();
    orthonormalize(&mut basis);

    let mut vals = vec![0.0; n_vec];
    for _outer in 0..40 {
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
        for v in &basis {
            next.push(cg(v, v));
        }
        orthonormalize(&mut next);
        // Rayleigh-Ritz in the refined basis
        let mut mb: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
        for v in &next {
            let mut mv = vec![0.0; count];
            apply_m(count, k, neighbors, weights, v, &mut mv);
            mb.push(mv);
        }
        let mut small = DMatrix::<f64>::zeros(n_vec, n_vec);
        for i in 0..n_vec {
            for j in 0..n_vec {
                small[(i, j)] = dot(&next[i], &mb[j]);
            }
        }
        small = (small.clone() + small.transpose()) * 0.5;
        let eig = SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..n_vec).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let mut rotated: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
        for &c in &order {
            let mut v = vec![0.0; count];
            for i in 0..n_vec {
                let w = eig.eigenvectors[(i, c)];
                for (vv, nv) in v.iter_mut().zip(&next[i]) {
                    *vv += w * nv;
                }
            }
            rotated.push(v);
        }
        for (slot, &c) in vals.iter_mut().zip(&order) {
            *slot = eig.eigenvalues[c];
        }
        basis = rotated;

        let worst = basis
            .iter()
            .zip(&vals)
            .map(|(v, &l)| eigen_residual(count, k, neighbors, weights, v, l))
            .fold(0.0f64, f64::max);
        if worst < 1e-9 * lam_max.max(1.0) {
            break;
        }
    }

    let constant = vec![1.0 / (count as f64).sqrt(); count];
    let mut out_vals = vec![0.0];
    let mut out_vecs = vec![constant];
    out_vals.extend_from_slice(&vals);
    out_vecs.extend(basis);
    Ok((out_vals, out_vecs))
}

fn orthonormalize(vecs: &mut Vec<Vec<f64>>) {
    let n = vecs.len();
    for i in 0..n {
        for j in 0..i {
            let d: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
            let vj = vecs[j].clone();
            for (a, b) in vecs[i].iter_mut().zip(&vj) {
                *a -= d * b;
            }
        }
        let nrm: f64 = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        if nrm > 1e-300 {
            vecs[i].iter_mut().for_each(|a| *a /= nrm);
        }
    }
}

/// Embed one query point by Nystrom extension over its nearest landmarks.
pub fn embed(model: &EmbeddingModel, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != model.input_dim {
        return Err(Error::InvalidArgument("query dim mismatch".into()));
    }
    let count = model.n_landmarks();
    let dists: Vec<f64> = (0..count).map(|j| sq_dist(p, model.landmark(j))).collect();
    let nn = k_smallest(&dists, model.k, usize::MAX);
    let nearest = dists[nn[0] as usize].sqrt();
    if nearest > model.extrapolation_threshold {
        return Err(Error::Extrapolation { nearest, threshold: model.extrapolation_threshold });
    }
    if nearest <= 0.0 {
        // interpolation reproduces nodes exactly
        return Ok(model.embedded_point(nn[0] as usize).to_vec());
    }
    let view = EmbeddingModelView { landmarks: &model.landmarks, input_dim: model.input_dim };
    let w = reconstruction_weights(p, &view, &nn, model.regularization)?;
    let n = model.output_dim;
    let mut out = vec![0.0; n];
    for (a, &j) in nn.iter().enumerate() {
        let y = model.embedded_point(j as usize);
        for c in 0..n {
            out[c] += w[a] * y[c];
        }
    }
    Ok(out)
}

/// Pointwise embedding of a whole series, preserving segments and dt.
pub fn embed_series(model: &EmbeddingModel, series: &Series) -> Result<Series> {
    let n = model.output_dim;
    let segments: Result<Vec<_>> = series
        .segments()
        .par_iter()
        .map(|seg| {
            let mut data = Vec::with_capacity(seg.len() * n);
            for p in seg.iter_points() {
                data.extend_from_slice(&embed(model, p)?);
            }
            crate::series::Segment::new(n, seg.dt, data)
        })
        .collect();
    Series::from_segments(n, segments?)
}
