//! Ground-truth stimulus generation.
//!
//! Trajectories are concatenations of short, statistically independent
//! segments. Each segment starts from a fresh draw of the thermal
//! phase-space density `sqrt(det mu) * exp(-E/kT)` and then evolves under
//! frictionless dynamics on the product of the configured factors. Free
//! motion on the sphere patch and on the line is integrated in closed form
//! (great-circle flow, billiard fold), so segment energy is conserved to
//! rounding; harmonic motion uses velocity Verlet with O(dt^2) drift.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::series::{Segment, Series, Trajectory};

const CHART_SLACK: f64 = 1e-9;

/// One independent factor of the configuration space.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldKind {
    /// Spherical cap: all points within `patch_angle` of `center`.
    /// Local coordinates are (longitude, latitude) with the patch center at
    /// the origin; the mass matrix is `r^2 * diag(cos^2 theta, 1)`.
    SpherePatch { radius: f64, patch_angle: f64, center: [f64; 3] },
    /// Segment [-half_length, half_length] with unit mass and reflecting ends.
    Line { half_length: f64 },
    /// Flat d-dimensional space with identity mass matrix.
    Euclidean { dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
}

/// Per-factor confining potential.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    /// V(x) = stiffness/2 * |x - center|^2
    Harmonic { stiffness: f64, center: Vec<f64> },
}

impl Potential {
    pub fn energy(&self, x: &[f64]) -> f64 {
        match self {
            Potential::Zero => 0.0,
            Potential::Harmonic { stiffness, center } => {
                0.5 * stiffness
                    * x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
            }
        }
    }

    fn force(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Zero => out.iter_mut().for_each(|f| *f = 0.0),
            Potential::Harmonic { stiffness, center } => {
                for ((f, a), c) in out.iter_mut().zip(x).zip(center) {
                    *f = -stiffness * (a - c);
                }
            }
        }
    }
}

impl ManifoldSpec {
    pub fn dim(&self) -> usize {
        match &self.kind {
            ManifoldKind::SpherePatch { .. } => 2,
            ManifoldKind::Line { .. } => 1,
            ManifoldKind::Euclidean { dim } => *dim,
        }
    }

    /// Mass matrix at local coordinates, written row-major into `out` (dim x dim).
    pub fn mass_matrix(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        match &self.kind {
            ManifoldKind::SpherePatch { radius, .. } => {
                let c = x[1].cos();
                out[0] = radius * radius * c * c;
                out[3] = radius * radius;
            }
            ManifoldKind::Line { .. } => out[0] = 1.0,
            ManifoldKind::Euclidean { .. } => {
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            }
        }
    }

    pub fn sqrt_det_mass(&self, x: &[f64]) -> f64 {
        match &self.kind {
            ManifoldKind::SpherePatch { radius, .. } => radius * radius * x[1].cos().abs(),
            ManifoldKind::Line { .. } => 1.0,
            ManifoldKind::Euclidean { .. } => 1.0,
        }
    }

    pub fn admissible(&self, x: &[f64]) -> bool {
        match &self.kind {
            ManifoldKind::SpherePatch { patch_angle, .. } => {
                let (phi, theta) = (x[0], x[1]);
                theta.abs() < std::f64::consts::FRAC_PI_2
                    && theta.cos() * phi.cos() >= patch_angle.cos() - CHART_SLACK
            }
            ManifoldKind::Line { half_length } => x[0].abs() <= half_length + CHART_SLACK,
            ManifoldKind::Euclidean { .. } => x.iter().all(|v| v.is_finite()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ManifoldKind::SpherePatch { radius, patch_angle, center } => {
                if !(*radius > 0.0) {
                    return Err(Error::InvalidArgument("sphere radius must be positive".into()));
                }
                if !(*patch_angle > 0.0 && *patch_angle < std::f64::consts::PI) {
                    return Err(Error::InvalidArgument("patch angle must lie in (0, pi)".into()));
                }
                let norm = center.iter().map(|c| c * c).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("patch center must be a unit vector".into()));
                }
                // The (longitude, latitude) chart needs the patch inside one hemisphere.
                if *patch_angle >= 1.45 {
                    return Err(Error::InvalidArgument(
                        "patch angle must be < 1.45 rad for the latitude/longitude chart".into(),
                    ));
                }
                Ok(())
            }
            ManifoldKind::Line { half_length } => {
                if !(*half_length > 0.0) {
                    return Err(Error::InvalidArgument("line half length must be positive".into()));
                }
                Ok(())
            }
            ManifoldKind::Euclidean { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidArgument("euclidean dim must be > 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Full generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusConfig {
    pub factors: Vec<ManifoldSpec>,
    pub potentials: Vec<Potential>,
    /// Boltzmann constant times bath temperature, in the chosen units.
    pub kt: f64,
    pub segment_length: usize,
    pub dt: f64,
    pub n_segments: usize,
    pub rng_seed: u64,
    pub max_rejection_attempts: usize,
}

impl StimulusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::InvalidArgument("at least one factor required".into()));
        }
        if self.factors.len() != self.potentials.len() {
            return Err(Error::InvalidArgument("one potential per factor required".into()));
        }
        if !(self.kt > 0.0) {
            return Err(Error::InvalidArgument("kT must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if self.segment_length < 2 {
            return Err(Error::InvalidArgument("segment length must be at least 2".into()));
        }
        for (spec, pot) in self.factors.iter().zip(&self.potentials) {
            spec.validate()?;
            match (&spec.kind, pot) {
                (ManifoldKind::SpherePatch { .. }, Potential::Harmonic { .. }) => {
                    return Err(Error::InvalidArgument(
                        "potentials on the sphere patch are not supported".into(),
                    ));
                }
                (ManifoldKind::Euclidean { .. }, Potential::Zero) => {
                    return Err(Error::InvalidArgument(
                        "euclidean factor needs a confining potential".into(),
                    ));
                }
                (_, Potential::Harmonic { stiffness, center }) => {
                    if !(*stiffness > 0.0) {
                        return Err(Error::InvalidArgument("harmonic stiffness must be positive".into()));
                    }
                    if center.len() != spec.dim() {
                        return Err(Error::InvalidArgument("harmonic center dim mismatch".into()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_dim(&self) -> usize {
        self.factors.iter().map(ManifoldSpec::dim).sum()
    }

    /// Starting offset of each factor's coordinates in the state vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.factors.len());
        let mut acc = 0;
        for f in &self.factors {
            out.push(acc);
            acc += f.dim();
        }
        out
    }

    pub fn admissible(&self, x: &[f64]) -> bool {
        let offs = self.offsets();
        self.factors
            .iter()
            .zip(&offs)
            .all(|(f, &o)| f.admissible(&x[o..o + f.dim()]))
    }
}

/// A state-space point with velocity and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSample {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

/// Total energy of a phase sample: kinetic `v.mu(x).v / 2` plus potentials.
/// Additive over factors when the mass matrix is block diagonal.
pub fn energy(cfg: &StimulusConfig, s: &PhaseSample) -> Result<f64> {
    let offs = cfg.offsets();
    let mut e = 0.0;
    for ((spec, pot), &o) in cfg.factors.iter().zip(&cfg.potentials).zip(&offs) {
        let d = spec.dim();
        let x = &s.x[o..o + d];
        let v = &s.v[o..o + d];
        if !spec.admissible(x) {
            return Err(Error::OutOfChart(format!("factor at offset {o}: {x:?}")));
        }
        let mut mu = vec![0.0; d * d];
        spec.mass_matrix(x, &mut mu);
        let mut kin = 0.0;
        for i in 0..d {
            for j in 0..d {
                kin += v[i] * mu[i * d + j] * v[j];
            }
        }
        e += 0.5 * kin + pot.energy(x);
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// sphere chart <-> canonical ambient frame
// ---------------------------------------------------------------------------

pub(crate) fn sphere_ambient(phi: f64, theta: f64) -> [f64; 3] {
    [theta.cos() * phi.cos(), theta.cos() * phi.sin(), theta.sin()]
}

/// Chart tangent basis at (phi, theta): d u / d phi and d u / d theta.
fn sphere_basis(phi: f64, theta: f64) -> ([f64; 3], [f64; 3]) {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    ([-ct * sp, ct * cp, 0.0], [-st * cp, -st * sp, ct])
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sphere_chart(u: &[f64; 3]) -> (f64, f64) {
    (u[1].atan2(u[0]), u[2].clamp(-1.0, 1.0).asin())
}

// ---------------------------------------------------------------------------
// per-factor dynamic state
// ---------------------------------------------------------------------------

enum FactorState {
    /// Unit ambient position `u` and ambient velocity `w = dP/dt` (|P| = r).
    Sphere { u: [f64; 3], w: [f64; 3], radius: f64, cos_alpha: f64 },
    Line { x: f64, v: f64, half: f64 },
    Euclid { x: Vec<f64>, v: Vec<f64> },
}

const MAX_BOUNCES: usize = 64;

impl FactorState {
    fn advance(&mut self, dt: f64, pot: &Potential) -> Result<()> {
        match self {
            FactorState::Sphere { u, w, radius, cos_alpha } => {
                sphere_advance(u, w, *radius, *cos_alpha, dt)
            }
            FactorState::Line { x, v, half } => {
                let mut y = *x + *v * dt;
                let mut bounces = 0;
                while y.abs() > *half {
                    if y > *half {
                        y = 2.0 * *half - y;
                    } else {
                        y = -2.0 * *half - y;
                    }
                    *v = -*v;
                    bounces += 1;
                    if bounces > MAX_BOUNCES {
                        return Err(Error::Sampling {
                            attempts: bounces,
                            context: "line reflection did not settle".into(),
                        });
                    }
                }
                *x = y;
                Ok(())
            }
            FactorState::Euclid { x, v } => {
                // velocity Verlet, unit mass
                let d = x.len();
                let mut f0 = vec![0.0; d];
                let mut f1 = vec![0.0; d];
                pot.force(x, &mut f0);
                for i in 0..d {
                    x[i] += v[i] * dt + 0.5 * f0[i] * dt * dt;
                }
                pot.force(x, &mut f1);
                for i in 0..d {
                    v[i] += 0.5 * (f0[i] + f1[i]) * dt;
                }
                Ok(())
            }
        }
    }

    fn write_chart(&self, out: &mut [f64]) {
        match self {
            FactorState::Sphere { u, .. } => {
                let (phi, theta) = sphere_chart(u);
                out[0] = phi;
                out[1] = theta;
            }
            FactorState::Line { x, .. } => out[0] = *x,
            FactorState::Euclid { x, .. } => out.copy_from_slice(x),
        }
    }

    fn write_chart_velocity(&self, out: &mut [f64]) {
        match self {
            FactorState::Sphere { u, w, radius, .. } => {
                let (phi, theta) = sphere_chart(u);
                let (e_phi, e_theta) = sphere_basis(phi, theta);
                let c2 = theta.cos() * theta.cos();
                out[0] = dot3(w, &e_phi) / (radius * c2);
                out[1] = dot3(w, &e_theta) / radius;
            }
            FactorState::Line { v, .. } => out[0] = *v,
            FactorState::Euclid { v, .. } => out.copy_from_slice(v),
        }
    }
}

/// Exact great-circle flow for time `dt`, reflecting at the patch boundary
/// `u . ex = cos_alpha`.
fn sphere_advance(u: &mut [f64; 3], w: &mut [f64; 3], radius: f64, cos_alpha: f64, dt: f64) -> Result<()> {
    let axis = [1.0, 0.0, 0.0];
    let mut remaining = dt;
    for _bounce in 0..MAX_BOUNCES {
        let speed = dot3(w, w).sqrt();
        if speed < 1e-300 {
            return Ok(());
        }
        let omega = speed / radius;
        let what = [w[0] / speed, w[1] / speed, w[2] / speed];
        let rotate = |t: f64, u: &[f64; 3], w: &[f64; 3]| -> ([f64; 3], [f64; 3]) {
            let (s, c) = (omega * t).sin_cos();
            let un = [
                u[0] * c + what[0] * s,
                u[1] * c + what[1] * s,
                u[2] * c + what[2] * s,
            ];
            let wn = [
                w[0] * c - u[0] * speed * s,
                w[1] * c - u[1] * speed * s,
                w[2] * c - u[2] * speed * s,
            ];
            (un, wn)
        };
        let (u_end, w_end) = rotate(remaining, u, w);
        if dot3(&u_end, &axis) >= cos_alpha {
            *u = u_end;
            *w = w_end;
            return Ok(());
        }
        // analytic first crossing of u(t) . ex = cos_alpha
        let a0 = dot3(u, &axis);
        let b0 = dot3(&what, &axis);
        let c = a0.hypot(b0);
        let t_cross = if c > cos_alpha.abs() && c > 0.0 {
            let psi = b0.atan2(a0);
            let delta = (cos_alpha / c).clamp(-1.0, 1.0).acos();
            let mut best = f64::INFINITY;
            for k in [-1.0f64, 0.0, 1.0] {
                for root in [psi - delta, psi + delta] {
                    let t = (root + 2.0 * std::f64::consts::PI * k) / omega;
                    if t > 1e-13 * dt && t <= remaining && t < best {
                        best = t;
                    }
                }
            }
            best
        } else {
            f64::INFINITY
        };
        let t_cross = if t_cross.is_finite() {
            t_cross
        } else {
            // fall back to bisection between inside start and outside end
            let mut lo = 0.0;
            let mut hi = remaining;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let (um, _) = rotate(mid, u, w);
                if dot3(&um, &axis) >= cos_alpha {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (mut u_hit, mut w_hit) = rotate(t_cross, u, w);
        // outward normal within the tangent plane at the hit point
        let an = dot3(&u_hit, &axis);
        let mut n = [axis[0] - an * u_hit[0], axis[1] - an * u_hit[1], axis[2] - an * u_hit[2]];
        let nn = dot3(&n, &n).sqrt();
        if nn > 0.0 {
            n = [n[0] / nn, n[1] / nn, n[2] / nn];
            let wn = dot3(&w_hit, &n);
            for i in 0..3 {
                w_hit[i] -= 2.0 * wn * n[i];
            }
        }
        // nudge back inside against rounding
        let norm = dot3(&u_hit, &u_hit).sqrt();
        for v in u_hit.iter_mut() {
            *v /= norm;
        }
        *u = u_hit;
        *w = w_hit;
        remaining -= t_cross;
        if remaining <= 0.0 {
            return Ok(());
        }
    }
    Err(Error::Sampling { attempts: MAX_BOUNCES, context: "sphere reflection did not settle".into() })
}

// ---------------------------------------------------------------------------
// Maxwell-Boltzmann initial draws
// ---------------------------------------------------------------------------

fn draw_factor_state(
    spec: &ManifoldSpec,
    pot: &Potential,
    kt: f64,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<FactorState> {
    match &spec.kind {
        ManifoldKind::SpherePatch { radius, patch_angle, .. } => {
            // Uniform area on the cap is exactly the sqrt(det mu) marginal.
            let h: f64 = 1.0 - rng.random_range(0.0..1.0) * (1.0 - patch_angle.cos());
            let psi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let s = (1.0 - h * h).max(0.0).sqrt();
            let u = [h, s * psi.cos(), s * psi.sin()];
            let (phi, theta) = sphere_chart(&u);
            let (e_phi, e_theta) = sphere_basis(phi, theta);
            let ct = theta.cos();
            // orthonormal ambient tangent pair
            let t1 = [e_phi[0] / ct, e_phi[1] / ct, e_phi[2] / ct];
            let t2 = e_theta;
            let sd = kt.sqrt();
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let w = [
                sd * (z1 * t1[0] + z2 * t2[0]),
                sd * (z1 * t1[1] + z2 * t2[1]),
                sd * (z1 * t1[2] + z2 * t2[2]),
            ];
            Ok(FactorState::Sphere { u, w, radius: *radius, cos_alpha: patch_angle.cos() })
        }
        ManifoldKind::Line { half_length } => {
            let x = match pot {
                Potential::Zero => rng.random_range(-half_length..*half_length),
                Potential::Harmonic { .. } => {
                    let v_min = (-half_length..=*half_length)
                        .contains(&potential_center_1d(pot))
                        .then(|| 0.0)
                        .unwrap_or_else(|| {
                            let c = potential_center_1d(pot).clamp(-half_length, *half_length);
                            pot.energy(&[c])
                        });
                    let mut accepted = None;
                    for _ in 0..max_attempts {
                        let cand = rng.random_range(-half_length..*half_length);
                        let p = (-(pot.energy(&[cand]) - v_min) / kt).exp();
                        if rng.random_range(0.0..1.0) < p {
                            accepted = Some(cand);
                            break;
                        }
                    }
                    accepted.ok_or(Error::Sampling {
                        attempts: max_attempts,
                        context: "line position rejection sampling".into(),
                    })?
                }
            };
            let v = kt.sqrt() * rng.sample::<f64, _>(StandardNormal);
            Ok(FactorState::Line { x, v, half: *half_length })
        }
        ManifoldKind::Euclidean { dim } => match pot {
            Potential::Harmonic { stiffness, center } => {
                let pos_sd = (kt / stiffness).sqrt();
                let vel_sd = kt.sqrt();
                let x = (0..*dim)
                    .map(|i| center[i] + pos_sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let v = (0..*dim).map(|_| vel_sd * rng.sample::<f64, _>(StandardNormal)).collect();
                Ok(FactorState::Euclid { x, v })
            }
            Potential::Zero => Err(Error::InvalidArgument(
                "euclidean factor needs a confining potential".into(),
            )),
        },
    }
}

fn potential_center_1d(pot: &Potential) -> f64 {
    match pot {
        Potential::Harmonic { center, .. } => center[0],
        Potential::Zero => 0.0,
    }
}

/// Draw one phase sample from the thermal density, without integrating.
pub fn sample_phase(cfg: &StimulusConfig, rng: &mut impl Rng) -> Result<PhaseSample> {
    let n = cfg.total_dim();
    let offs = cfg.offsets();
    let mut x = vec![0.0; n];
    let mut v = vec![0.0; n];
    for ((spec, pot), &o) in cfg.factors.iter().zip(&cfg.potentials).zip(&offs) {
        let d = spec.dim();
        let st = draw_factor_state(spec, pot, cfg.kt, cfg.max_rejection_attempts, rng)?;
        st.write_chart(&mut x[o..o + d]);
        st.write_chart_velocity(&mut v[o..o + d]);
    }
    Ok(PhaseSample { x, v, t: 0.0 })
}

/// Draw an initial condition from the thermal density and integrate
/// frictionless motion for `segment_length` steps of `dt`.
pub fn sample_mb_segment(cfg: &StimulusConfig, rng: &mut impl Rng) -> Result<Segment> {
    let n = cfg.total_dim();
    let offs = cfg.offsets();
    let mut states = Vec::with_capacity(cfg.factors.len());
    for (spec, pot) in cfg.factors.iter().zip(&cfg.potentials) {
        states.push(draw_factor_state(spec, pot, cfg.kt, cfg.max_rejection_attempts, rng)?);
    }
    let mut data = vec![0.0; cfg.segment_length * n];
    for step in 0..cfg.segment_length {
        if step > 0 {
            for (st, pot) in states.iter_mut().zip(&cfg.potentials) {
                st.advance(cfg.dt, pot)?;
            }
        }
        let row = &mut data[step * n..(step + 1) * n];
        for (st, &o) in states.iter().zip(&offs) {
            let d = match st {
                FactorState::Sphere { .. } => 2,
                FactorState::Line { .. } => 1,
                FactorState::Euclid { x, .. } => x.len(),
            };
            st.write_chart(&mut row[o..o + d]);
        }
    }
    Segment::new(n, cfg.dt, data)
}

/// Generate `n_segments` independent segments. Each segment owns an RNG
/// stream derived from (seed, segment index), so generation is
/// order-independent and reproducible.
pub fn generate_trajectory(cfg: &StimulusConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let segments: Result<Vec<Segment>> = (0..cfg.n_segments)
        .into_par_iter()
        .map(|i| {
            let mut rng = segment_rng(cfg.rng_seed, i as u64);
            sample_mb_segment(cfg, &mut rng)
        })
        .collect();
    Series::from_segments(cfg.total_dim(), segments?)
}

/// Independent RNG stream for one segment.
pub fn segment_rng(seed: u64, segment_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment_index.wrapping_add(1));
    rng
}

/// The sphere-cap x line generator used throughout: unit-radius patch of one
/// radian and a line of the given half length, both potential-free.
pub fn sphere_line_config(
    kt: f64,
    dt: f64,
    segment_length: usize,
    n_segments: usize,
    seed: u64,
    center: [f64; 3],
    line_half_length: f64,
) -> StimulusConfig {
    StimulusConfig {
        factors: vec![
            ManifoldSpec { kind: ManifoldKind::SpherePatch { radius: 1.0, patch_angle: 1.0, center } },
            ManifoldSpec { kind: ManifoldKind::Line { half_length: line_half_length } },
        ],
        potentials: vec![Potential::Zero, Potential::Zero],
        kt,
        segment_length,
        dt,
        n_segments,
        rng_seed: seed,
        max_rejection_attempts: 10_000,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn line_only(kt: f64, seed: u64) -> StimulusConfig {
        StimulusConfig {
            factors: vec![ManifoldSpec { kind: ManifoldKind::Line { half_length: 1.0 } }],
            potentials: vec![Potential::Zero],
            kt,
            segment_length: 7,
            dt: 0.05,
            n_segments: 1,
            rng_seed: seed,
            max_rejection_attempts: 10_000,
        }
    }

    #[test]
    fn energy_zero_at_rest() {
        let cfg = StimulusConfig {
            factors: vec![ManifoldSpec { kind: ManifoldKind::Euclidean { dim: 1 } }],
            potentials: vec![Potential::Harmonic { stiffness: 1.0, center: vec![0.0] }],
            kt: 0.01,
            segment_length: 2,
            dt: 0.1,
            n_segments: 1,
            rng_seed: 0,
            max_rejection_attempts: 100,
        };
        let e = energy(&cfg, &PhaseSample { x: vec![0.0], v: vec![0.0], t: 0.0 }).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn energy_line_kinetic() {
        let cfg = line_only(0.01, 0);
        let e = energy(&cfg, &PhaseSample { x: vec![0.3], v: vec![0.2], t: 0.0 }).unwrap();
        assert_relative_eq!(e, 0.02, epsilon = 1e-15);
    }

    #[test]
    fn energy_sphere_matches_ambient_speed_quadrature() {
        // E = cos^2(theta) * 0.01 / 2 for chart velocity (0.1, 0) on the unit
        // sphere; oracle is the numerically differenced ambient path speed.
        let cfg = sphere_line_config(0.01, 0.05, 7, 1, 0, [1.0, 0.0, 0.0], 1.0);
        let theta0 = 0.4;
        let sample = PhaseSample { x: vec![0.0, theta0, 0.0], v: vec![0.1, 0.0, 0.0], t: 0.0 };
        let e = energy(&cfg, &sample).unwrap();
        assert_relative_eq!(e, 0.5 * theta0.cos().powi(2) * 0.01, epsilon = 1e-14);

        // ambient oracle: finite-difference the exact geodesic through the point
        let (e_phi, e_theta) = sphere_basis(0.0, theta0);
        let mut u = sphere_ambient(0.0, theta0);
        let mut w = [0.0; 3];
        for i in 0..3 {
            w[i] = 0.1 * e_phi[i] + 0.0 * e_theta[i];
        }
        let u0 = u;
        sphere_advance(&mut u, &mut w, 1.0, (1.0f64).cos(), 1e-5).unwrap();
        let speed_fd = ((u[0] - u0[0]).powi(2) + (u[1] - u0[1]).powi(2) + (u[2] - u0[2]).powi(2))
            .sqrt()
            / 1e-5;
        assert_relative_eq!(0.5 * speed_fd * speed_fd, e, max_relative = 1e-6);
    }

    #[test]
    fn velocities_vanish_in_cold_limit() {
        let cfg = line_only(1e-30, 7);
        let mut rng = segment_rng(cfg.rng_seed, 0);
        for _ in 0..100 {
            let s = sample_phase(&cfg, &mut rng).unwrap();
            assert!(s.v[0].abs() < 1e-10);
        }
    }

    #[test]
    fn line_velocity_variance_matches_thermal_value() {
        // Var(v) over 1e5 draws should be kT within 3 standard errors of the
        // variance estimator, sd = kT * sqrt(2/N).
        let cfg = line_only(0.01, 42);
        let mut rng = segment_rng(cfg.rng_seed, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let s = sample_phase(&cfg, &mut rng).unwrap();
            sum += s.v[0];
            sq += s.v[0] * s.v[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let tol = 3.0 * 0.01 * (2.0 / n as f64).sqrt();
        assert!((var - 0.01).abs() < tol, "var {var} not within {tol} of 0.01");
    }

    #[test]
    fn sphere_position_marginal_matches_quadrature() {
        // Histogram of sampled latitudes against the velocity-integrated
        // thermal density. The quadrature marginal is evaluated per bin by
        // trapezoid integration over (theta, phi, v1, v2).
        let cfg = sphere_line_config(0.01, 0.05, 7, 1, 3, [1.0, 0.0, 0.0], 1.0);
        let spec = &cfg.factors[0];
        let alpha: f64 = 1.0;
        let mut rng = segment_rng(cfg.rng_seed, 0);
        let n = 40_000;
        let bins = 24;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let s = sample_phase(&cfg, &mut rng).unwrap();
            let theta = s.x[1];
            let b = (((theta + alpha) / (2.0 * alpha)) * bins as f64).floor() as isize;
            let b = b.clamp(0, bins as isize - 1) as usize;
            counts[b] += 1;
        }
        // oracle: per-theta density = phi extent * velocity integral
        let vel_integral = |theta: f64| -> f64 {
            let mut mu = [0.0; 4];
            spec.mass_matrix(&[0.0, theta], &mut mu);
            let (m11, m22) = (mu[0], mu[3]);
            let s1 = (cfg.kt / m11).sqrt();
            let s2 = (cfg.kt / m22).sqrt();
            let m = 60;
            let mut acc = 0.0;
            for i in 0..=m {
                let v1 = -6.0 * s1 + 12.0 * s1 * i as f64 / m as f64;
                let w1 = if i == 0 || i == m { 0.5 } else { 1.0 };
                for j in 0..=m {
                    let v2 = -6.0 * s2 + 12.0 * s2 * j as f64 / m as f64;
                    let w2 = if j == 0 || j == m { 0.5 } else { 1.0 };
                    let e = 0.5 * (m11 * v1 * v1 + m22 * v2 * v2);
                    acc += w1 * w2 * (-e / cfg.kt).exp();
                }
            }
            // det(mu) prefactor from the phase-space density, times the
            // velocity box measure (constant factors cancel in normalization)
            m11 * m22 * acc * s1 * s2
        };
        let phi_extent = |theta: f64| -> f64 {
            let c = alpha.cos() / theta.cos();
            if c >= 1.0 {
                0.0
            } else {
                2.0 * c.acos()
            }
        };
        let mut expected = vec![0.0; bins];
        let sub = 16;
        for (b, e) in expected.iter_mut().enumerate() {
            for s in 0..sub {
                let theta = -alpha + 2.0 * alpha * (b as f64 + (s as f64 + 0.5) / sub as f64) / bins as f64;
                *e += vel_integral(theta) * phi_extent(theta);
            }
        }
        let total: f64 = expected.iter().sum();
        let mut chi2 = 0.0;
        let mut dof = 0;
        for b in 0..bins {
            let exp = expected[b] / total * n as f64;
            if exp >= 5.0 {
                let d = counts[b] as f64 - exp;
                chi2 += d * d / exp;
                dof += 1;
            }
        }
        // 99.9th percentile of chi-square with <= 23 dof is < 52
        assert!(chi2 < 52.0, "chi2 {chi2} too large for {dof} bins");
    }

    #[test]
    fn trajectory_deterministic_and_sized() {
        let cfg = sphere_line_config(0.01, 0.05, 7, 1, 11, [1.0, 0.0, 0.0], 1.0);
        let mut cfg = cfg;
        cfg.n_segments = 20;
        let a = generate_trajectory(&cfg).unwrap();
        let b = generate_trajectory(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_segments(), 20);
        assert_eq!(a.total_points(), 140);
        assert!(a.iter_points().all(|p| cfg.admissible(p)));
    }

    #[test]
    fn zero_segments_gives_empty_trajectory() {
        let mut cfg = sphere_line_config(0.01, 0.05, 7, 1, 0, [1.0, 0.0, 0.0], 1.0);
        cfg.n_segments = 0;
        let t = generate_trajectory(&cfg).unwrap();
        assert_eq!(t.n_segments(), 0);
    }

    #[test]
    fn segment_energy_conserved() {
        // closed-form sphere/line flows conserve energy to rounding even
        // across reflections
        let mut cfg = sphere_line_config(0.01, 0.2, 50, 1, 5, [1.0, 0.0, 0.0], 0.3);
        cfg.segment_length = 50;
        for si in 0..20u64 {
            let mut rng = segment_rng(cfg.rng_seed, si);
            let mut states = Vec::new();
            for (spec, pot) in cfg.factors.iter().zip(&cfg.potentials) {
                states.push(draw_factor_state(spec, pot, cfg.kt, 1000, &mut rng).unwrap());
            }
            let energy_of = |states: &[FactorState]| -> f64 {
                states
                    .iter()
                    .map(|st| match st {
                        FactorState::Sphere { w, .. } => 0.5 * dot3(w, w),
                        FactorState::Line { v, .. } => 0.5 * v * v,
                        FactorState::Euclid { v, .. } => 0.5 * v.iter().map(|a| a * a).sum::<f64>(),
                    })
                    .sum()
            };
            let e0 = energy_of(&states);
            for _ in 0..cfg.segment_length {
                for (st, pot) in states.iter_mut().zip(&cfg.potentials) {
                    st.advance(cfg.dt, pot).unwrap();
                }
            }
            let e1 = energy_of(&states);
            assert_relative_eq!(e0, e1, max_relative = 1e-10);
        }
    }

    #[test]
    fn harmonic_energy_drift_is_second_order() {
        let mk = |dt: f64| StimulusConfig {
            factors: vec![ManifoldSpec { kind: ManifoldKind::Euclidean { dim: 2 } }],
            potentials: vec![Potential::Harmonic { stiffness: 4.0, center: vec![0.0, 0.0] }],
            kt: 0.01,
            segment_length: 2,
            dt,
            n_segments: 1,
            rng_seed: 9,
            max_rejection_attempts: 100,
        };
        let drift = |dt: f64| -> f64 {
            let cfg = mk(dt);
            let steps = (1.0 / dt) as usize;
            let mut st = FactorState::Euclid { x: vec![0.1, 0.0], v: vec![0.0, 0.2] };
            let e = |st: &FactorState| match st {
                FactorState::Euclid { x, v } => {
                    0.5 * v.iter().map(|a| a * a).sum::<f64>() + cfg.potentials[0].energy(x)
                }
                _ => unreachable!(),
            };
            let e0 = e(&st);
            let mut max_d: f64 = 0.0;
            for _ in 0..steps {
                st.advance(dt, &cfg.potentials[0]).unwrap();
                max_d = max_d.max((e(&st) - e0).abs() / e0);
            }
            max_d
        };
        let d1 = drift(0.02);
        let d2 = drift(0.01);
        // quadratic convergence: halving dt cuts drift ~4x
        assert!(d2 < d1 / 2.5, "drift {d1} -> {d2} not second order");
    }

    #[test]
    fn cross_factor_velocities_uncorrelated() {
        let cfg = sphere_line_config(0.01, 0.05, 7, 1, 21, [1.0, 0.0, 0.0], 1.0);
        let mut rng = segment_rng(cfg.rng_seed, 0);
        let n = 50_000;
        let mut acc = [0.0f64; 2];
        for _ in 0..n {
            let s = sample_phase(&cfg, &mut rng).unwrap();
            acc[0] += s.v[0] * s.v[2];
            acc[1] += s.v[1] * s.v[2];
        }
        // components have sd ~ sqrt(kT/mu_ii); the product mean has
        // sd <= kT/sqrt(N) up to metric factors
        let bound = 5.0 * 0.01 / (n as f64).sqrt() * 2.0;
        assert!((acc[0] / n as f64).abs() < bound);
        assert!((acc[1] / n as f64).abs() < bound);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = sphere_line_config(0.01, 0.05, 7, 1, 0, [1.0, 0.0, 0.0], 1.0);
        cfg.kt = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg2 = sphere_line_config(0.01, 0.05, 1, 1, 0, [1.0, 0.0, 0.0], 1.0);
        cfg2.segment_length = 1;
        assert!(cfg2.validate().is_err());
        let bad_center = sphere_line_config(0.01, 0.05, 7, 1, 0, [2.0, 0.0, 0.0], 1.0);
        assert!(bad_center.validate().is_err());
    }

    #[test]
    fn out_of_chart_energy_is_an_error() {
        let cfg = sphere_line_config(0.01, 0.05, 7, 1, 0, [1.0, 0.0, 0.0], 1.0);
        let s = PhaseSample { x: vec![2.0, 0.9, 0.0], v: vec![0.0; 3], t: 0.0 };
        assert!(matches!(energy(&cfg, &s), Err(Error::OutOfChart(_))));
    }
}
