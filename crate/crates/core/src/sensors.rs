//! The mixing function: a rig of pinhole cameras with quadratic optical
//! distortion watching the scene particles.
//!
//! Each factor of the stimulus places one particle in the 3D laboratory
//! frame; every camera reports the two distorted image coordinates of every
//! particle. The rig is drawn once from a seeded RNG and frozen, with
//! distortion amplitudes capped so the image-plane map stays comfortably
//! invertible.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::series::Series;
use crate::stimulus::{self, ManifoldKind, Potential, StimulusConfig};

type Vec3 = [f64; 3];

fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize3(a: &Vec3) -> Vec3 {
    let n = dot3(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2 = dot3(&v, &v);
        if n2 > 1e-4 && n2 < 1.0 {
            return normalize3(&v);
        }
    }
}

/// One pinhole camera with a full second-order bivariate distortion of its
/// image plane: out = c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2 per output
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub position: Vec3,
    /// Rows are the camera right / up / forward axes.
    pub orientation: [Vec3; 3],
    pub focal_distance: f64,
    pub distortion: [[f64; 6]; 2],
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let r = &self.orientation;
        for i in 0..3 {
            for j in 0..3 {
                let d = dot3(&r[i], &r[j]) - if i == j { 1.0 } else { 0.0 };
                if d.abs() > 1e-9 {
                    return Err(Error::InvalidArgument("camera orientation not orthonormal".into()));
                }
            }
        }
        let det = dot3(&r[2], &cross3(&r[0], &r[1]));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("camera orientation must have det +1".into()));
        }
        if !(self.focal_distance > 0.0) {
            return Err(Error::InvalidArgument("focal distance must be positive".into()));
        }
        Ok(())
    }

    pub fn distort(&self, u: f64, v: f64) -> [f64; 2] {
        let mono = [1.0, u, v, u * u, u * v, v * v];
        let mut out = [0.0; 2];
        for (o, c) in out.iter_mut().zip(&self.distortion) {
            *o = c.iter().zip(&mono).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Jacobian of the distortion polynomial at (u, v), row-major 2x2.
    pub fn distortion_jacobian(&self, u: f64, v: f64) -> [f64; 4] {
        let du = [0.0, 1.0, 0.0, 2.0 * u, v, 0.0];
        let dv = [0.0, 0.0, 1.0, 0.0, u, 2.0 * v];
        let row = |c: &[f64; 6], m: &[f64; 6]| c.iter().zip(m).map(|(a, b)| a * b).sum::<f64>();
        [
            row(&self.distortion[0], &du),
            row(&self.distortion[0], &dv),
            row(&self.distortion[1], &du),
            row(&self.distortion[1], &dv),
        ]
    }

    /// Project a lab-frame point through the pinhole and distort the image.
    pub fn project(&self, p: &Vec3) -> Result<[f64; 2]> {
        let q = sub3(p, &self.position);
        let qc = [
            dot3(&self.orientation[0], &q),
            dot3(&self.orientation[1], &q),
            dot3(&self.orientation[2], &q),
        ];
        if qc[2] <= self.focal_distance {
            return Err(Error::Projection(format!(
                "point at camera depth {:.4} is behind the focal plane",
                qc[2]
            )));
        }
        let u = self.focal_distance * qc[0] / qc[2];
        let v = self.focal_distance * qc[1] / qc[2];
        Ok(self.distort(u, v))
    }
}

/// Placement of one stimulus factor's particle in the laboratory frame.
#[derive(Debug, Clone, PartialEq)]
pub enum ParticleMap {
    /// Sphere particle: center + radius * frame . u(longitude, latitude).
    /// Frame columns map the canonical patch frame into the lab frame.
    Sphere { center: Vec3, frame: [Vec3; 3], radius: f64 },
    /// Line particle: center + coordinate * direction.
    Line { center: Vec3, direction: Vec3 },
    /// Flat particle: center + frame . x (up to 3 coordinates).
    Euclid { center: Vec3, frame: [Vec3; 3], dim: usize },
}

impl ParticleMap {
    pub fn coord_dim(&self) -> usize {
        match self {
            ParticleMap::Sphere { .. } => 2,
            ParticleMap::Line { .. } => 1,
            ParticleMap::Euclid { dim, .. } => *dim,
        }
    }

    pub fn position(&self, x: &[f64]) -> Vec3 {
        match self {
            ParticleMap::Sphere { center, frame, radius } => {
                let u = stimulus::sphere_ambient(x[0], x[1]);
                let mut p = *center;
                for i in 0..3 {
                    for j in 0..3 {
                        p[i] += radius * frame[j][i] * u[j];
                    }
                }
                p
            }
            ParticleMap::Line { center, direction } => [
                center[0] + x[0] * direction[0],
                center[1] + x[0] * direction[1],
                center[2] + x[0] * direction[2],
            ],
            ParticleMap::Euclid { center, frame, dim } => {
                let mut p = *center;
                for j in 0..*dim {
                    for i in 0..3 {
                        p[i] += frame[j][i] * x[j];
                    }
                }
                p
            }
        }
    }
}

/// Scene map plus cameras: the full mixing function.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRig {
    pub particles: Vec<ParticleMap>,
    pub cameras: Vec<CameraModel>,
}

/// Seeded choices for rig generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub seed: u64,
    pub camera_count: usize,
    pub focal_distance: f64,
    /// Camera distance range as multiples of the scene radius.
    pub distance_range: (f64, f64),
    /// Amplitude of the linear perturbation away from the identity image map.
    pub linear_amplitude: f64,
    pub shift_amplitude: f64,
    pub quadratic_amplitude: f64,
    /// Singular values of the image-plane Jacobian must stay inside this
    /// range over the sampled image region.
    pub jacobian_bounds: (f64, f64),
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            camera_count: 5,
            focal_distance: 1.0,
            distance_range: (3.0, 5.0),
            linear_amplitude: 0.2,
            shift_amplitude: 0.1,
            quadratic_amplitude: 0.25,
            jacobian_bounds: (0.5, 2.0),
        }
    }
}

impl SensorRig {
    pub fn output_dim(&self) -> usize {
        2 * self.particles.len() * self.cameras.len()
    }

    pub fn state_dim(&self) -> usize {
        self.particles.iter().map(ParticleMap::coord_dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for cam in &self.cameras {
            cam.validate()?;
        }
        let n = self.state_dim();
        if self.output_dim() < 2 * n + 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least {} sensor outputs for a {}-dimensional stimulus, got {}",
                2 * n + 1,
                n,
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// The mixing function: distorted image coordinates of every particle in
    /// every camera, in fixed camera-major order.
    pub fn observe(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::InvalidArgument(format!(
                "state dim {} does not match rig dim {}",
                x.len(),
                self.state_dim()
            )));
        }
        let mut positions = Vec::with_capacity(self.particles.len());
        let mut off = 0;
        for p in &self.particles {
            let d = p.coord_dim();
            positions.push(p.position(&x[off..off + d]));
            off += d;
        }
        let mut out = Vec::with_capacity(self.output_dim());
        for cam in &self.cameras {
            for pos in &positions {
                let uv = cam.project(pos)?;
                out.push(uv[0]);
                out.push(uv[1]);
            }
        }
        Ok(out)
    }

    /// Pointwise observation of a whole series, preserving segments and dt.
    pub fn observe_series(&self, series: &Series) -> Result<Series> {
        let m = self.output_dim();
        let segments: Result<Vec<_>> = series
            .segments()
            .par_iter()
            .map(|seg| {
                let mut data = Vec::with_capacity(seg.len() * m);
                for p in seg.iter_points() {
                    data.extend_from_slice(&self.observe(p)?);
                }
                crate::series::Segment::new(m, seg.dt, data)
            })
            .collect();
        Series::from_segments(m, segments?)
    }

    /// Draw a rig watching the given stimulus: particles placed on seeded
    /// arbitrary orientations, cameras on a shell looking at the scene
    /// centroid, distortions drawn until the image Jacobian bound holds.
    pub fn generate(stim: &StimulusConfig, cfg: &RigConfig) -> Result<SensorRig> {
        stim.validate()?;
        if cfg.camera_count == 0 {
            return Err(Error::InvalidArgument("need at least one camera".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut particles = Vec::new();
        let mut extents = Vec::new();
        for (spec, pot) in stim.factors.iter().zip(&stim.potentials) {
            match &spec.kind {
                ManifoldKind::SpherePatch { radius, center, .. } => {
                    // frame: first column is the patch center direction
                    let a = normalize3(center);
                    let mut b = random_unit(&mut rng);
                    let proj = dot3(&a, &b);
                    b = normalize3(&[b[0] - proj * a[0], b[1] - proj * a[1], b[2] - proj * a[2]]);
                    let c = cross3(&a, &b);
                    let scene_center = [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ];
                    particles.push(ParticleMap::Sphere {
                        center: scene_center,
                        frame: [a, b, c],
                        radius: *radius,
                    });
                    extents.push(dot3(&scene_center, &scene_center).sqrt() + radius);
                }
                ManifoldKind::Line { half_length } => {
                    let dir = random_unit(&mut rng);
                    let center = [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ];
                    particles.push(ParticleMap::Line { center, direction: dir });
                    extents.push(dot3(&center, &center).sqrt() + half_length);
                }
                ManifoldKind::Euclidean { dim } => {
                    if *dim > 3 {
                        return Err(Error::InvalidArgument(
                            "euclidean factors beyond 3 coordinates cannot be placed in the scene".into(),
                        ));
                    }
                    let spread = match pot {
                        Potential::Harmonic { stiffness, .. } => 6.0 * (stim.kt / stiffness).sqrt(),
                        Potential::Zero => 1.0,
                    };
                    let mut frame = [[0.0; 3]; 3];
                    let f0 = random_unit(&mut rng);
                    let mut f1 = random_unit(&mut rng);
                    let proj = dot3(&f0, &f1);
                    f1 = normalize3(&[f1[0] - proj * f0[0], f1[1] - proj * f0[1], f1[2] - proj * f0[2]]);
                    let f2 = cross3(&f0, &f1);
                    frame[0] = f0;
                    frame[1] = f1;
                    frame[2] = f2;
                    let center = [
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                        rng.random_range(-0.5..0.5),
                    ];
                    particles.push(ParticleMap::Euclid { center, frame, dim: *dim });
                    extents.push(dot3(&center, &center).sqrt() + spread);
                }
            }
        }
        let scene_radius = extents.iter().cloned().fold(1.0f64, f64::max);
        let centroid = {
            let mut c = [0.0; 3];
            for p in &particles {
                let pc = match p {
                    ParticleMap::Sphere { center, .. } => center,
                    ParticleMap::Line { center, .. } => center,
                    ParticleMap::Euclid { center, .. } => center,
                };
                for i in 0..3 {
                    c[i] += pc[i] / particles.len() as f64;
                }
            }
            c
        };

        // image extent bound used for the Jacobian check: half-angle of the
        // scene as seen from the closest allowed camera distance
        let image_extent = cfg.focal_distance * scene_radius
            / (cfg.distance_range.0 * scene_radius - scene_radius);

        let mut cameras = Vec::with_capacity(cfg.camera_count);
        for _ in 0..cfg.camera_count {
            let dir = random_unit(&mut rng);
            let dist = rng.random_range(cfg.distance_range.0..cfg.distance_range.1) * scene_radius;
            let position = [
                centroid[0] + dist * dir[0],
                centroid[1] + dist * dir[1],
                centroid[2] + dist * dir[2],
            ];
            let forward = normalize3(&sub3(&centroid, &position));
            let helper = if forward[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
            let mut right = normalize3(&cross3(&helper, &forward));
            let mut up = cross3(&forward, &right);
            let roll: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (sr, cr) = roll.sin_cos();
            let (r0, u0) = (right, up);
            for i in 0..3 {
                right[i] = cr * r0[i] + sr * u0[i];
                up[i] = -sr * r0[i] + cr * u0[i];
            }

            let distortion = draw_distortion(&mut rng, cfg, image_extent)?;
            let cam = CameraModel {
                position,
                orientation: [right, up, forward],
                focal_distance: cfg.focal_distance,
                distortion,
            };
            cam.validate()?;
            cameras.push(cam);
        }

        let rig = SensorRig { particles, cameras };
        rig.validate()?;
        Ok(rig)
    }
}

/// Draw distortion coefficients, retrying until the image-plane Jacobian
/// singular values stay within bounds over the sampled image region.
fn draw_distortion(rng: &mut impl Rng, cfg: &RigConfig, extent: f64) -> Result<[[f64; 6]; 2]> {
    for _ in 0..200 {
        let mut c = [[0.0; 6]; 2];
        c[0][0] = rng.random_range(-cfg.shift_amplitude..cfg.shift_amplitude);
        c[1][0] = rng.random_range(-cfg.shift_amplitude..cfg.shift_amplitude);
        c[0][1] = 1.0 + rng.random_range(-cfg.linear_amplitude..cfg.linear_amplitude);
        c[0][2] = rng.random_range(-cfg.linear_amplitude..cfg.linear_amplitude);
        c[1][1] = rng.random_range(-cfg.linear_amplitude..cfg.linear_amplitude);
        c[1][2] = 1.0 + rng.random_range(-cfg.linear_amplitude..cfg.linear_amplitude);
        for k in 3..6 {
            c[0][k] = rng.random_range(-cfg.quadratic_amplitude..cfg.quadratic_amplitude) / extent;
            c[1][k] = rng.random_range(-cfg.quadratic_amplitude..cfg.quadratic_amplitude) / extent;
        }
        let cam = CameraModel {
            position: [0.0; 3],
            orientation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            focal_distance: 1.0,
            distortion: c,
        };
        let mut ok = true;
        let m = 6;
        'grid: for i in 0..=m {
            for j in 0..=m {
                let u = -extent + 2.0 * extent * i as f64 / m as f64;
                let v = -extent + 2.0 * extent * j as f64 / m as f64;
                let jm = cam.distortion_jacobian(u, v);
                // singular values of a 2x2 from the two invariants
                let a = jm[0] * jm[0] + jm[1] * jm[1] + jm[2] * jm[2] + jm[3] * jm[3];
                let det = jm[0] * jm[3] - jm[1] * jm[2];
                let disc = (a * a / 4.0 - det * det).max(0.0).sqrt();
                let s_max = (a / 2.0 + disc).sqrt();
                let s_min = (a / 2.0 - disc).max(0.0).sqrt();
                if s_min < cfg.jacobian_bounds.0 || s_max > cfg.jacobian_bounds.1 {
                    ok = false;
                    break 'grid;
                }
            }
        }
        if ok {
            return Ok(c);
        }
    }
    Err(Error::Sampling { attempts: 200, context: "distortion draw exceeded Jacobian bounds".into() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff;
    use crate::stimulus::{segment_rng, sphere_line_config};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn test_rig(seed: u64) -> (StimulusConfig, SensorRig) {
        let stim = sphere_line_config(0.01, 0.05, 7, 10, seed, [1.0, 0.0, 0.0], 1.0);
        let rig = SensorRig::generate(&stim, &RigConfig { seed, ..RigConfig::default() }).unwrap();
        (stim, rig)
    }

    #[test]
    fn five_cameras_give_twenty_outputs() {
        let (_, rig) = test_rig(1);
        assert_eq!(rig.output_dim(), 20);
        let out = rig.observe(&[0.1, -0.2, 0.3]).unwrap();
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn identity_distortion_is_pure_pinhole() {
        // similar-triangles oracle for a hand-built camera
        let cam = CameraModel {
            position: [0.0, 0.0, -4.0],
            orientation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            focal_distance: 2.0,
            distortion: [[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]],
        };
        let p = [0.6, -0.9, 1.0]; // depth 5 from the pinhole
        let uv = cam.project(&p).unwrap();
        assert_relative_eq!(uv[0], 2.0 * 0.6 / 5.0, epsilon = 1e-14);
        assert_relative_eq!(uv[1], 2.0 * (-0.9) / 5.0, epsilon = 1e-14);
    }

    #[test]
    fn behind_focal_plane_is_an_error() {
        let cam = CameraModel {
            position: [0.0, 0.0, 0.0],
            orientation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            focal_distance: 1.0,
            distortion: [[0.0, 1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]],
        };
        assert!(cam.project(&[0.0, 0.0, -2.0]).is_err());
    }

    #[test]
    fn finite_difference_jacobian_predicts_nearby_outputs() {
        let (_, rig) = test_rig(2);
        let x = [0.15, 0.25, -0.4];
        let (j, m) = numdiff::jacobian(|p| rig.observe(p), &x, 1e-6).unwrap();
        assert_eq!(m, 20);
        let delta = [3e-4, -2e-4, 4e-4];
        let y0 = rig.observe(&x).unwrap();
        let mut x1 = x;
        for i in 0..3 {
            x1[i] += delta[i];
        }
        let y1 = rig.observe(&x1).unwrap();
        for i in 0..20 {
            let lin: f64 = (0..3).map(|a| j[i * 3 + a] * delta[a]).sum();
            assert!((y1[i] - y0[i] - lin).abs() < 5e-6, "component {i} deviates");
        }
    }

    #[test]
    fn jacobian_has_rank_three_on_samples() {
        let (stim, rig) = test_rig(3);
        let mut rng = segment_rng(7, 0);
        for _ in 0..20 {
            let s = crate::stimulus::sample_phase(&stim, &mut rng).unwrap();
            let (j, m) = numdiff::jacobian(|p| rig.observe(p), &s.x, 1e-6).unwrap();
            let jm = DMatrix::from_row_slice(m, 3, &j);
            let svd = jm.svd(false, false);
            let sv = &svd.singular_values;
            assert!(sv[2] / sv[0] > 1e-3, "rank deficiency: {:?}", sv.as_slice());
        }
    }

    #[test]
    fn observe_series_preserves_shape_and_empty_input() {
        let (stim, rig) = test_rig(4);
        let traj = crate::stimulus::generate_trajectory(&stim).unwrap();
        let sensed = rig.observe_series(&traj).unwrap();
        assert_eq!(sensed.n_segments(), traj.n_segments());
        assert_eq!(sensed.segments()[0].len(), 7);
        assert_eq!(sensed.dim(), 20);
        assert_eq!(sensed.segments()[0].dt, traj.segments()[0].dt);

        let empty = Series::new(3);
        let out = rig.observe_series(&empty).unwrap();
        assert_eq!(out.n_segments(), 0);
    }

    #[test]
    fn distinct_states_map_to_distinct_outputs() {
        let (stim, rig) = test_rig(5);
        let mut rng = segment_rng(13, 0);
        let mut pts = Vec::new();
        for _ in 0..200 {
            pts.push(crate::stimulus::sample_phase(&stim, &mut rng).unwrap().x);
        }
        let images: Vec<Vec<f64>> = pts.iter().map(|p| rig.observe(p).unwrap()).collect();
        let mut checked = 0;
        for i in 0..pts.len() {
            for j in (i + 1)..pts.len() {
                let dx: f64 = pts[i]
                    .iter()
                    .zip(&pts[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dx > 1e-3 {
                    let dy: f64 = images[i]
                        .iter()
                        .zip(&images[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    assert!(dy > 1e-9, "states {i},{j} separated by {dx} collapsed");
                    checked += 1;
                }
            }
        }
        assert!(checked > 10_000);
    }

    #[test]
    fn permuting_cameras_permutes_output_blocks() {
        let (_, rig) = test_rig(6);
        let mut permuted = rig.clone();
        permuted.cameras.swap(0, 3);
        let x = [0.2, -0.1, 0.5];
        let a = rig.observe(&x).unwrap();
        let b = permuted.observe(&x).unwrap();
        assert_eq!(&a[0..4], &b[12..16]);
        assert_eq!(&a[12..16], &b[0..4]);
        assert_eq!(&a[4..8], &b[4..8]);
    }

    #[test]
    fn generation_is_deterministic() {
        let (_, a) = test_rig(8);
        let (_, b) = test_rig(8);
        assert_eq!(a, b);
    }

    #[test]
    fn rig_covers_patch_without_projection_errors() {
        let (stim, rig) = test_rig(9);
        let mut rng = segment_rng(99, 0);
        for _ in 0..2000 {
            let s = crate::stimulus::sample_phase(&stim, &mut rng).unwrap();
            rig.observe(&s.x).unwrap();
        }
    }

    #[test]
    fn takens_condition_enforced() {
        // 1 camera x 2 particles x 2 coords = 4 outputs < 2*3+1
        let (stim, _) = test_rig(10);
        let rig = SensorRig::generate(
            &stim,
            &RigConfig { seed: 10, camera_count: 1, ..RigConfig::default() },
        );
        assert!(rig.is_err());
    }
}
