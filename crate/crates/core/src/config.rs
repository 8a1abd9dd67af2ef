//! Pipeline configuration: a plain-text file of dotted section keys.
//!
//! Every numeric choice of the pipeline lives here with a materialized
//! default, so a written-back config is a full record of the run. Unknown
//! keys are rejected; parse -> serialize -> parse is a fixed point.

use std::collections::BTreeMap;
use std::path::Path;

use crate::embedding::LleConfig;
use crate::error::{Error, Result};
use crate::geometry::MetricOptions;
use crate::sensors::RigConfig;
use crate::separation::{RecurseOptions, SolverOptions};
use crate::stimulus::{ManifoldKind, ManifoldSpec, Potential, StimulusConfig};

/// Which scene the stimulus generator produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimulusKind {
    /// Sphere-cap particle plus line particle (the main experiment).
    SphereLine,
    /// One particle in a 3D harmonic trap: constant metric, flat space.
    Flat3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusSection {
    pub kind: StimulusKind,
    pub kt: f64,
    pub dt: f64,
    pub segment_length: usize,
    pub n_segments: usize,
    pub seed: u64,
    pub sphere_radius: f64,
    pub patch_angle: f64,
    pub patch_center: [f64; 3],
    pub line_half_length: f64,
    pub flat_stiffness: f64,
    pub max_rejection_attempts: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigSection {
    pub seed: u64,
    pub cameras: usize,
    pub focal_distance: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    pub linear_amplitude: f64,
    pub shift_amplitude: f64,
    pub quadratic_amplitude: f64,
    pub jacobian_min: f64,
    pub jacobian_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSection {
    pub landmarks: usize,
    pub k: usize,
    pub target_dim: usize,
    pub regularization: f64,
    pub extrapolation_factor: f64,
    pub dense_eigen_threshold: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSection {
    pub nodes: Vec<usize>,
    pub quantile_low: f64,
    pub quantile_high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSection {
    pub min_count: u64,
    /// 0 disables smoothing.
    pub smooth_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSection {
    pub tol: f64,
    pub gap_min: f64,
    pub null_cap: f64,
    pub probe_count: usize,
    pub probe_radius_frac: f64,
    pub cluster_rel_gap: f64,
    pub flat_tol: f64,
    pub residual_cap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartMode {
    /// Base point and seed directions mapped from the known source origin
    /// and axes, so the geodesic coordinates line up with the sources.
    Calibrated,
    /// Base point at the best-sampled node, seed directions from
    /// metric-orthonormalized coordinate axes.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartSection {
    pub mode: ChartMode,
    pub step: f64,
    pub extents: Vec<usize>,
    pub pushforward_step: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationSection {
    pub block_score_threshold: f64,
    pub cross_corr_sigmas: f64,
    pub sub_grid_nodes: usize,
    pub min_samples: usize,
    pub max_depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSection {
    /// Latitude/longitude values of the test-line grid.
    pub line_values: Vec<f64>,
    /// Parameter extent of each line.
    pub line_extent: f64,
    pub points_per_line: usize,
    /// Half-range of the line-particle sweep paired with each test line.
    pub line_sweep: f64,
    pub rms_frac: f64,
    pub sagitta_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub stimulus: StimulusSection,
    pub rig: RigSection,
    pub embedding: EmbeddingSection,
    pub grid: GridSection,
    pub metric: MetricSection,
    pub solver: SolverSection,
    pub chart: ChartSection,
    pub separation: SeparationSection,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stimulus: StimulusSection {
                kind: StimulusKind::SphereLine,
                kt: 0.01,
                dt: 0.4,
                segment_length: 7,
                n_segments: 200_000,
                seed: 1287,
                sphere_radius: 1.0,
                patch_angle: 1.0,
                patch_center: [0.36, -0.48, 0.8],
                line_half_length: 1.0,
                flat_stiffness: 1.0,
                max_rejection_attempts: 10_000,
            },
            rig: RigSection {
                seed: 905,
                cameras: 5,
                focal_distance: 1.0,
                distance_min: 3.0,
                distance_max: 5.0,
                linear_amplitude: 0.2,
                shift_amplitude: 0.1,
                quadratic_amplitude: 0.25,
                jacobian_min: 0.5,
                jacobian_max: 2.0,
            },
            embedding: EmbeddingSection {
                landmarks: 2000,
                k: 12,
                target_dim: 3,
                regularization: 1e-3,
                extrapolation_factor: 3.0,
                dense_eigen_threshold: 2500,
                seed: 77,
            },
            grid: GridSection {
                nodes: vec![12, 12, 12],
                quantile_low: 0.005,
                quantile_high: 0.995,
            },
            metric: MetricSection { min_count: 20, smooth_sigma: 2.0 },
            solver: SolverSection {
                tol: 1e-6,
                gap_min: 3.0,
                null_cap: 0.15,
                probe_count: 8,
                probe_radius_frac: 0.25,
                cluster_rel_gap: 0.1,
                flat_tol: 0.05,
                residual_cap: 0.5,
                seed: 3,
            },
            chart: ChartSection {
                mode: ChartMode::Calibrated,
                step: 0.1,
                extents: vec![7, 7, 7],
                pushforward_step: 1e-3,
            },
            separation: SeparationSection {
                block_score_threshold: 0.05,
                cross_corr_sigmas: 3.0,
                sub_grid_nodes: 12,
                min_samples: 5000,
                max_depth: 4,
            },
            evaluate: EvaluateSection {
                line_values: vec![-0.6, -0.3, 0.0, 0.3, 0.6],
                line_extent: 0.7,
                points_per_line: 41,
                line_sweep: 0.5,
                rms_frac: 0.05,
                sagitta_frac: 0.05,
            },
        }
    }
}

struct KeyMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::InvalidConfig(format!("line {}: expected key = value", ln + 1)));
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key or value", ln + 1)));
            }
            if entries.insert(key.clone(), (value, ln + 1)).is_some() {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key '{key}'", ln + 1)));
            }
        }
        Ok(Self { entries })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(v, _)| v)
    }

    fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("key '{key}': expected a number, got '{v}'"))),
        }
    }

    fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("key '{key}': expected an integer, got '{v}'"))),
        }
    }

    fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("key '{key}': expected an integer, got '{v}'"))),
        }
    }

    fn take_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::InvalidConfig(format!("key '{key}': expected numbers, got '{v}'"))
                    })
                })
                .collect(),
        }
    }

    fn take_usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::InvalidConfig(format!("key '{key}': expected integers, got '{v}'"))
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::InvalidConfig(format!("line {line}: unknown key '{key}'")));
        }
        Ok(())
    }
}

fn join_f64(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn join_usize(vals: &[usize]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let d = PipelineConfig::default();
        let mut m = KeyMap::parse(text)?;

        let kind = match m.take("stimulus.kind") {
            None => d.stimulus.kind,
            Some(v) => match v.as_str() {
                "sphere_line" => StimulusKind::SphereLine,
                "flat3d" => StimulusKind::Flat3d,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "stimulus.kind: expected sphere_line or flat3d, got '{other}'"
                    )))
                }
            },
        };
        let patch_center = {
            let v = m.take_f64_list("stimulus.patch_center", &d.stimulus.patch_center)?;
            if v.len() != 3 {
                return Err(Error::InvalidConfig("stimulus.patch_center: need 3 components".into()));
            }
            [v[0], v[1], v[2]]
        };
        let stimulus = StimulusSection {
            kind,
            kt: m.take_f64("stimulus.kt", d.stimulus.kt)?,
            dt: m.take_f64("stimulus.dt", d.stimulus.dt)?,
            segment_length: m.take_usize("stimulus.segment_length", d.stimulus.segment_length)?,
            n_segments: m.take_usize("stimulus.n_segments", d.stimulus.n_segments)?,
            seed: m.take_u64("stimulus.seed", d.stimulus.seed)?,
            sphere_radius: m.take_f64("stimulus.sphere_radius", d.stimulus.sphere_radius)?,
            patch_angle: m.take_f64("stimulus.patch_angle", d.stimulus.patch_angle)?,
            patch_center,
            line_half_length: m.take_f64("stimulus.line_half_length", d.stimulus.line_half_length)?,
            flat_stiffness: m.take_f64("stimulus.flat_stiffness", d.stimulus.flat_stiffness)?,
            max_rejection_attempts: m
                .take_usize("stimulus.max_rejection_attempts", d.stimulus.max_rejection_attempts)?,
        };

        let rig = RigSection {
            seed: m.take_u64("rig.seed", d.rig.seed)?,
            cameras: m.take_usize("rig.cameras", d.rig.cameras)?,
            focal_distance: m.take_f64("rig.focal_distance", d.rig.focal_distance)?,
            distance_min: m.take_f64("rig.distance_min", d.rig.distance_min)?,
            distance_max: m.take_f64("rig.distance_max", d.rig.distance_max)?,
            linear_amplitude: m.take_f64("rig.linear_amplitude", d.rig.linear_amplitude)?,
            shift_amplitude: m.take_f64("rig.shift_amplitude", d.rig.shift_amplitude)?,
            quadratic_amplitude: m.take_f64("rig.quadratic_amplitude", d.rig.quadratic_amplitude)?,
            jacobian_min: m.take_f64("rig.jacobian_min", d.rig.jacobian_min)?,
            jacobian_max: m.take_f64("rig.jacobian_max", d.rig.jacobian_max)?,
        };

        let embedding = EmbeddingSection {
            landmarks: m.take_usize("embedding.landmarks", d.embedding.landmarks)?,
            k: m.take_usize("embedding.k", d.embedding.k)?,
            target_dim: m.take_usize("embedding.target_dim", d.embedding.target_dim)?,
            regularization: m.take_f64("embedding.regularization", d.embedding.regularization)?,
            extrapolation_factor: m
                .take_f64("embedding.extrapolation_factor", d.embedding.extrapolation_factor)?,
            dense_eigen_threshold: m
                .take_usize("embedding.dense_eigen_threshold", d.embedding.dense_eigen_threshold)?,
            seed: m.take_u64("embedding.seed", d.embedding.seed)?,
        };

        let grid = GridSection {
            nodes: m.take_usize_list("grid.nodes", &d.grid.nodes)?,
            quantile_low: m.take_f64("grid.quantile_low", d.grid.quantile_low)?,
            quantile_high: m.take_f64("grid.quantile_high", d.grid.quantile_high)?,
        };

        let metric = MetricSection {
            min_count: m.take_u64("metric.min_count", d.metric.min_count)?,
            smooth_sigma: m.take_f64("metric.smooth_sigma", d.metric.smooth_sigma)?,
        };

        let solver = SolverSection {
            tol: m.take_f64("solver.tol", d.solver.tol)?,
            gap_min: m.take_f64("solver.gap_min", d.solver.gap_min)?,
            null_cap: m.take_f64("solver.null_cap", d.solver.null_cap)?,
            probe_count: m.take_usize("solver.probe_count", d.solver.probe_count)?,
            probe_radius_frac: m.take_f64("solver.probe_radius_frac", d.solver.probe_radius_frac)?,
            cluster_rel_gap: m.take_f64("solver.cluster_rel_gap", d.solver.cluster_rel_gap)?,
            flat_tol: m.take_f64("solver.flat_tol", d.solver.flat_tol)?,
            residual_cap: m.take_f64("solver.residual_cap", d.solver.residual_cap)?,
            seed: m.take_u64("solver.seed", d.solver.seed)?,
        };

        let mode = match m.take("chart.mode") {
            None => d.chart.mode,
            Some(v) => match v.as_str() {
                "calibrated" => ChartMode::Calibrated,
                "auto" => ChartMode::Auto,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "chart.mode: expected calibrated or auto, got '{other}'"
                    )))
                }
            },
        };
        let chart = ChartSection {
            mode,
            step: m.take_f64("chart.step", d.chart.step)?,
            extents: m.take_usize_list("chart.extents", &d.chart.extents)?,
            pushforward_step: m.take_f64("chart.pushforward_step", d.chart.pushforward_step)?,
        };

        let separation = SeparationSection {
            block_score_threshold: m
                .take_f64("separation.block_score_threshold", d.separation.block_score_threshold)?,
            cross_corr_sigmas: m
                .take_f64("separation.cross_corr_sigmas", d.separation.cross_corr_sigmas)?,
            sub_grid_nodes: m.take_usize("separation.sub_grid_nodes", d.separation.sub_grid_nodes)?,
            min_samples: m.take_usize("separation.min_samples", d.separation.min_samples)?,
            max_depth: m.take_usize("separation.max_depth", d.separation.max_depth)?,
        };

        let evaluate = EvaluateSection {
            line_values: m.take_f64_list("evaluate.line_values", &d.evaluate.line_values)?,
            line_extent: m.take_f64("evaluate.line_extent", d.evaluate.line_extent)?,
            points_per_line: m.take_usize("evaluate.points_per_line", d.evaluate.points_per_line)?,
            line_sweep: m.take_f64("evaluate.line_sweep", d.evaluate.line_sweep)?,
            rms_frac: m.take_f64("evaluate.rms_frac", d.evaluate.rms_frac)?,
            sagitta_frac: m.take_f64("evaluate.sagitta_frac", d.evaluate.sagitta_frac)?,
        };

        m.finish()?;
        let cfg = Self { stimulus, rig, embedding, grid, metric, solver, chart, separation, evaluate };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.stimulus_config().validate()?;
        if self.grid.nodes.len() != self.state_dim() {
            return Err(Error::InvalidConfig(format!(
                "grid.nodes needs {} axes for this stimulus",
                self.state_dim()
            )));
        }
        if self.chart.extents.len() != self.state_dim() {
            return Err(Error::InvalidConfig(format!(
                "chart.extents needs {} axes for this stimulus",
                self.state_dim()
            )));
        }
        if self.embedding.target_dim != self.state_dim() {
            return Err(Error::InvalidConfig("embedding.target_dim must match the stimulus dimension".into()));
        }
        if !(self.separation.block_score_threshold > 0.0) {
            return Err(Error::InvalidConfig("separation.block_score_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Serialize with every key materialized, in canonical order.
    pub fn serialize(&self) -> String {
        let s = self;
        let kind = match s.stimulus.kind {
            StimulusKind::SphereLine => "sphere_line",
            StimulusKind::Flat3d => "flat3d",
        };
        let mode = match s.chart.mode {
            ChartMode::Calibrated => "calibrated",
            ChartMode::Auto => "auto",
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("stimulus.kind", kind.into());
        push("stimulus.kt", format!("{:?}", s.stimulus.kt));
        push("stimulus.dt", format!("{:?}", s.stimulus.dt));
        push("stimulus.segment_length", s.stimulus.segment_length.to_string());
        push("stimulus.n_segments", s.stimulus.n_segments.to_string());
        push("stimulus.seed", s.stimulus.seed.to_string());
        push("stimulus.sphere_radius", format!("{:?}", s.stimulus.sphere_radius));
        push("stimulus.patch_angle", format!("{:?}", s.stimulus.patch_angle));
        push("stimulus.patch_center", join_f64(&s.stimulus.patch_center));
        push("stimulus.line_half_length", format!("{:?}", s.stimulus.line_half_length));
        push("stimulus.flat_stiffness", format!("{:?}", s.stimulus.flat_stiffness));
        push("stimulus.max_rejection_attempts", s.stimulus.max_rejection_attempts.to_string());
        push("rig.seed", s.rig.seed.to_string());
        push("rig.cameras", s.rig.cameras.to_string());
        push("rig.focal_distance", format!("{:?}", s.rig.focal_distance));
        push("rig.distance_min", format!("{:?}", s.rig.distance_min));
        push("rig.distance_max", format!("{:?}", s.rig.distance_max));
        push("rig.linear_amplitude", format!("{:?}", s.rig.linear_amplitude));
        push("rig.shift_amplitude", format!("{:?}", s.rig.shift_amplitude));
        push("rig.quadratic_amplitude", format!("{:?}", s.rig.quadratic_amplitude));
        push("rig.jacobian_min", format!("{:?}", s.rig.jacobian_min));
        push("rig.jacobian_max", format!("{:?}", s.rig.jacobian_max));
        push("embedding.landmarks", s.embedding.landmarks.to_string());
        push("embedding.k", s.embedding.k.to_string());
        push("embedding.target_dim", s.embedding.target_dim.to_string());
        push("embedding.regularization", format!("{:?}", s.embedding.regularization));
        push("embedding.extrapolation_factor", format!("{:?}", s.embedding.extrapolation_factor));
        push("embedding.dense_eigen_threshold", s.embedding.dense_eigen_threshold.to_string());
        push("embedding.seed", s.embedding.seed.to_string());
        push("grid.nodes", join_usize(&s.grid.nodes));
        push("grid.quantile_low", format!("{:?}", s.grid.quantile_low));
        push("grid.quantile_high", format!("{:?}", s.grid.quantile_high));
        push("metric.min_count", s.metric.min_count.to_string());
        push("metric.smooth_sigma", format!("{:?}", s.metric.smooth_sigma));
        push("solver.tol", format!("{:?}", s.solver.tol));
        push("solver.gap_min", format!("{:?}", s.solver.gap_min));
        push("solver.null_cap", format!("{:?}", s.solver.null_cap));
        push("solver.probe_count", s.solver.probe_count.to_string());
        push("solver.probe_radius_frac", format!("{:?}", s.solver.probe_radius_frac));
        push("solver.cluster_rel_gap", format!("{:?}", s.solver.cluster_rel_gap));
        push("solver.flat_tol", format!("{:?}", s.solver.flat_tol));
        push("solver.residual_cap", format!("{:?}", s.solver.residual_cap));
        push("solver.seed", s.solver.seed.to_string());
        push("chart.mode", mode.into());
        push("chart.step", format!("{:?}", s.chart.step));
        push("chart.extents", join_usize(&s.chart.extents));
        push("chart.pushforward_step", format!("{:?}", s.chart.pushforward_step));
        push("separation.block_score_threshold", format!("{:?}", s.separation.block_score_threshold));
        push("separation.cross_corr_sigmas", format!("{:?}", s.separation.cross_corr_sigmas));
        push("separation.sub_grid_nodes", s.separation.sub_grid_nodes.to_string());
        push("separation.min_samples", s.separation.min_samples.to_string());
        push("separation.max_depth", s.separation.max_depth.to_string());
        push("evaluate.line_values", join_f64(&s.evaluate.line_values));
        push("evaluate.line_extent", format!("{:?}", s.evaluate.line_extent));
        push("evaluate.points_per_line", s.evaluate.points_per_line.to_string());
        push("evaluate.line_sweep", format!("{:?}", s.evaluate.line_sweep));
        push("evaluate.rms_frac", format!("{:?}", s.evaluate.rms_frac));
        push("evaluate.sagitta_frac", format!("{:?}", s.evaluate.sagitta_frac));
        out
    }

    pub fn state_dim(&self) -> usize {
        match self.stimulus.kind {
            StimulusKind::SphereLine => 3,
            StimulusKind::Flat3d => 3,
        }
    }

    pub fn stimulus_config(&self) -> StimulusConfig {
        let s = &self.stimulus;
        let norm = (s.patch_center.iter().map(|c| c * c).sum::<f64>()).sqrt();
        let center = [s.patch_center[0] / norm, s.patch_center[1] / norm, s.patch_center[2] / norm];
        match s.kind {
            StimulusKind::SphereLine => StimulusConfig {
                factors: vec![
                    ManifoldSpec {
                        kind: ManifoldKind::SpherePatch {
                            radius: s.sphere_radius,
                            patch_angle: s.patch_angle,
                            center,
                        },
                    },
                    ManifoldSpec { kind: ManifoldKind::Line { half_length: s.line_half_length } },
                ],
                potentials: vec![Potential::Zero, Potential::Zero],
                kt: s.kt,
                segment_length: s.segment_length,
                dt: s.dt,
                n_segments: s.n_segments,
                rng_seed: s.seed,
                max_rejection_attempts: s.max_rejection_attempts,
            },
            StimulusKind::Flat3d => StimulusConfig {
                factors: vec![ManifoldSpec { kind: ManifoldKind::Euclidean { dim: 3 } }],
                potentials: vec![Potential::Harmonic {
                    stiffness: s.flat_stiffness,
                    center: vec![0.0; 3],
                }],
                kt: s.kt,
                segment_length: s.segment_length,
                dt: s.dt,
                n_segments: s.n_segments,
                rng_seed: s.seed,
                max_rejection_attempts: s.max_rejection_attempts,
            },
        }
    }

    pub fn rig_config(&self) -> RigConfig {
        let r = &self.rig;
        RigConfig {
            seed: r.seed,
            camera_count: r.cameras,
            focal_distance: r.focal_distance,
            distance_range: (r.distance_min, r.distance_max),
            linear_amplitude: r.linear_amplitude,
            shift_amplitude: r.shift_amplitude,
            quadratic_amplitude: r.quadratic_amplitude,
            jacobian_bounds: (r.jacobian_min, r.jacobian_max),
        }
    }

    pub fn lle_config(&self) -> LleConfig {
        let e = &self.embedding;
        LleConfig {
            k: e.k,
            target_dim: e.target_dim,
            regularization: e.regularization,
            extrapolation_factor: e.extrapolation_factor,
            dense_eigen_threshold: e.dense_eigen_threshold,
            seed: e.seed,
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            min_count: self.metric.min_count,
            smooth_sigma: if self.metric.smooth_sigma > 0.0 {
                Some(self.metric.smooth_sigma)
            } else {
                None
            },
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        let s = &self.solver;
        SolverOptions {
            tol: s.tol,
            gap_min: s.gap_min,
            null_cap: s.null_cap,
            probe_count: s.probe_count,
            probe_radius_frac: s.probe_radius_frac,
            cluster_rel_gap: s.cluster_rel_gap,
            flat_tol: s.flat_tol,
            residual_cap: s.residual_cap,
            seed: s.seed,
        }
    }

    pub fn recurse_options(&self) -> RecurseOptions {
        RecurseOptions {
            solver: self.solver_options(),
            metric: self.metric_options(),
            grid_nodes_per_axis: self.separation.sub_grid_nodes,
            quantile_low: self.grid.quantile_low,
            quantile_high: self.grid.quantile_high,
            max_depth: self.separation.max_depth,
            min_samples: self.separation.min_samples,
        }
    }
}
