//! Stage orchestration: simulate -> sense -> embed -> metric -> curvature
//! -> separate -> chart -> evaluate -> plot.
//!
//! Every stage reads its inputs from files in the output directory and
//! writes its products back, so single stages can be rerun in isolation
//! and a full rerun with the same config reproduces every artifact byte
//! for byte.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::config::{ChartMode, PipelineConfig, StimulusKind};
use crate::embedding::{embed, embed_series, fit_lle, EmbeddingModel};
use crate::error::{Error, Result};
use crate::geometry::{christoffel, estimate_metric, riemann, MetricField};
use crate::grid::GridSpec;
use crate::io;
use crate::numdiff;
use crate::plot;
use crate::sensors::SensorRig;
use crate::separation::{
    block_score, build_chart, build_seed_frame, cross_block_independence, metric_in_chart, recurse,
    restrict_series, series_to_chart, solve_projectors, ChartIndex, GeodesicChart, Projector,
    SeparationReport, SeparationStatus, SolveOutcome,
};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Sense,
    Embed,
    Metric,
    Curvature,
    Separate,
    Chart,
    Evaluate,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Simulate,
        Stage::Sense,
        Stage::Embed,
        Stage::Metric,
        Stage::Curvature,
        Stage::Separate,
        Stage::Chart,
        Stage::Evaluate,
        Stage::Plot,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Sense => "sense",
            Stage::Embed => "embed",
            Stage::Metric => "metric",
            Stage::Curvature => "curvature",
            Stage::Separate => "separate",
            Stage::Chart => "chart",
            Stage::Evaluate => "evaluate",
            Stage::Plot => "plot",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.out.join("config.txt")
    }
    pub fn trajectory(&self) -> PathBuf {
        self.out.join("trajectory.gbss")
    }
    pub fn sensed(&self) -> PathBuf {
        self.out.join("sensed.gbss")
    }
    pub fn rig_dump(&self) -> PathBuf {
        self.out.join("rig.txt")
    }
    pub fn embedding(&self) -> PathBuf {
        self.out.join("embedding.glle")
    }
    pub fn embedded(&self) -> PathBuf {
        self.out.join("embedded.gbss")
    }
    pub fn metric(&self) -> PathBuf {
        self.out.join("metric.gmtr")
    }
    pub fn connection(&self) -> PathBuf {
        self.out.join("connection.gcnn")
    }
    pub fn curvature(&self) -> PathBuf {
        self.out.join("curvature.gcrv")
    }
    pub fn projectors(&self) -> PathBuf {
        self.out.join("projectors.gprj")
    }
    pub fn solve_status(&self) -> PathBuf {
        self.out.join("solve_status.txt")
    }
    pub fn chart(&self) -> PathBuf {
        self.out.join("chart.gcht")
    }
    pub fn s_series(&self) -> PathBuf {
        self.out.join("s_series.gbss")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("report.txt")
    }
    pub fn eval(&self) -> PathBuf {
        self.out.join("eval.txt")
    }
    pub fn eval_lines(&self) -> PathBuf {
        self.out.join("eval_lines.csv")
    }
    pub fn plot_dir(&self) -> PathBuf {
        self.out.clone()
    }
}

// ---------------------------------------------------------------------------
// calibration
// ---------------------------------------------------------------------------

/// Forward map of the blind observer: source state -> reduced measurement.
pub fn measurement_map(rig: &SensorRig, model: &EmbeddingModel, x: &[f64]) -> Result<Vec<f64>> {
    embed(model, &rig.observe(x)?)
}

/// Metric norms of the unit coordinate vectors at the source origin, used
/// to normalize calibrated seed vectors like the corresponding source unit
/// vectors.
fn source_axis_norms(cfg: &PipelineConfig) -> Vec<f64> {
    let stim = cfg.stimulus_config();
    let kt = cfg.stimulus.kt;
    let origin = vec![0.0; cfg.state_dim()];
    let offs = stim.offsets();
    let mut out = Vec::with_capacity(cfg.state_dim());
    for (spec, &o) in stim.factors.iter().zip(&offs) {
        let d = spec.dim();
        let mut mu = vec![0.0; d * d];
        spec.mass_matrix(&origin[o..o + d], &mut mu);
        for i in 0..d {
            out.push((mu[i * d + i] / kt).sqrt());
        }
    }
    out
}

/// Base point and seed directions for the chart, either calibrated through
/// the observation map from the source origin and axes, or chosen blind.
pub fn chart_seed(
    cfg: &PipelineConfig,
    rig: &SensorRig,
    model: &EmbeddingModel,
    metric: &MetricField,
    curv_valid: &[bool],
) -> Result<(Vec<f64>, Vec<DVector<f64>>, Vec<f64>)> {
    let n = cfg.state_dim();
    match cfg.chart.mode {
        ChartMode::Calibrated => {
            let origin = vec![0.0; n];
            let base = measurement_map(rig, model, &origin)?;
            let h = cfg.chart.pushforward_step;
            let (jac, m) = numdiff::jacobian(|x| measurement_map(rig, model, x), &origin, h)?;
            debug_assert_eq!(m, n);
            let dirs: Vec<DVector<f64>> = (0..n)
                .map(|a| DVector::from_fn(n, |i, _| jac[i * n + a]))
                .collect();
            let targets: Vec<f64> =
                source_axis_norms(cfg).iter().map(|s| s * cfg.chart.step).collect();
            Ok((base, dirs, targets))
        }
        ChartMode::Auto => {
            let grid = &metric.grid;
            let base_node = (0..grid.n_nodes())
                .filter(|&i| metric.valid[i] && curv_valid[i])
                .max_by_key(|&i| metric.counts[i])
                .ok_or_else(|| Error::InvalidArgument("no valid node for the base point".into()))?;
            let base = grid.node_position(&grid.coords(base_node));
            let dirs: Vec<DVector<f64>> =
                (0..n).map(|a| DVector::from_fn(n, |i, _| if i == a { 1.0 } else { 0.0 })).collect();
            // scale transfers to roughly chart.step in coordinate units
            let g = metric.g_cov_at(base_node);
            let mean_diag: f64 = (0..n).map(|i| g[i * n + i]).sum::<f64>() / n as f64;
            let targets = vec![cfg.chart.step * mean_diag.sqrt(); n];
            Ok((base, dirs, targets))
        }
    }
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

pub fn stage_simulate(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let traj = crate::stimulus::generate_trajectory(&cfg.stimulus_config())?;
    io::write_series(&paths.trajectory(), &traj)
}

pub fn stage_sense(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let traj = io::read_series(&paths.trajectory())?;
    let rig = SensorRig::generate(&cfg.stimulus_config(), &cfg.rig_config())?;
    let sensed = rig.observe_series(&traj)?;
    io::write_series(&paths.sensed(), &sensed)?;
    std::fs::write(&paths.rig_dump(), dump_rig(&rig))?;
    Ok(())
}

fn dump_rig(rig: &SensorRig) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "output_dim = {}\nstate_dim = {}\nparticles = {}\ncameras = {}\n",
        rig.output_dim(),
        rig.state_dim(),
        rig.particles.len(),
        rig.cameras.len()
    ));
    for (i, cam) in rig.cameras.iter().enumerate() {
        out.push_str(&format!(
            "camera.{i}.position = {:?},{:?},{:?}\n",
            cam.position[0], cam.position[1], cam.position[2]
        ));
        for (r, row) in cam.orientation.iter().enumerate() {
            out.push_str(&format!(
                "camera.{i}.orientation.{r} = {:?},{:?},{:?}\n",
                row[0], row[1], row[2]
            ));
        }
        out.push_str(&format!("camera.{i}.focal_distance = {:?}\n", cam.focal_distance));
        for (c, coeffs) in cam.distortion.iter().enumerate() {
            let list: Vec<String> = coeffs.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&format!("camera.{i}.distortion.{c} = {}\n", list.join(",")));
        }
    }
    out
}

pub fn stage_embed(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let sensed = io::read_series(&paths.sensed())?;
    let m = sensed.dim();
    let total = sensed.total_points();
    let want = cfg.embedding.landmarks.min(total);
    if want < 4 * cfg.embedding.k {
        return Err(Error::InvalidArgument("too few points for landmark selection".into()));
    }
    // deterministic strided landmark subsample over the whole stream
    let mut landmarks = Vec::with_capacity(want * m);
    let mut next_pick = 0usize;
    let mut picked = 0usize;
    for (i, p) in sensed.iter_points().enumerate() {
        if i == next_pick && picked < want {
            landmarks.extend_from_slice(p);
            picked += 1;
            next_pick = (picked * total) / want;
        }
    }
    let model = fit_lle(&landmarks, m, &cfg.lle_config())?;
    io::write_embedding(&paths.embedding(), &model)?;
    let embedded = embed_series(&model, &sensed)?;
    io::write_series(&paths.embedded(), &embedded)
}

pub fn stage_metric(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let embedded = io::read_series(&paths.embedded())?;
    let grid = GridSpec::from_quantiles(
        embedded.iter_points(),
        embedded.dim(),
        cfg.grid.nodes.clone(),
        cfg.grid.quantile_low,
        cfg.grid.quantile_high,
    )?;
    let metric = estimate_metric(&embedded, &grid, &cfg.metric_options())?;
    io::write_metric(&paths.metric(), &metric)
}

pub fn stage_curvature(_cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let metric = io::read_metric(&paths.metric())?;
    let conn = christoffel(&metric)?;
    io::write_connection(&paths.connection(), &conn)?;
    let curv = riemann(&conn)?;
    io::write_curvature(&paths.curvature(), &curv)
}

/// Outcome of the projector solve, written alongside the projector file.
fn write_solve_status(path: &Path, outcome: &SolveOutcome) -> Result<()> {
    let text = match outcome {
        SolveOutcome::Projectors(p) => {
            let ranks: Vec<String> = p.iter().map(|q| q.rank.to_string()).collect();
            format!("status = projectors\nranks = {}\n", ranks.join(","))
        }
        SolveOutcome::FlatExceptional { dim } => {
            format!("status = flat_exceptional\nflat_dim = {dim}\n")
        }
        SolveOutcome::NotSeparable { diagnostic } => {
            format!("status = not_separable\ndiagnostic = {diagnostic}\n")
        }
        SolveOutcome::Undetermined { diagnostic } => {
            format!("status = undetermined\ndiagnostic = {diagnostic}\n")
        }
    };
    std::fs::write(path, text)?;
    Ok(())
}

fn read_solve_status(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("status = ") {
            return Ok(rest.trim().to_string());
        }
    }
    Err(Error::Format("solve status file without a status line".into()))
}

pub fn stage_separate(cfg: &PipelineConfig, paths: &Paths) -> Result<SolveOutcome> {
    let metric = io::read_metric(&paths.metric())?;
    let curv = io::read_curvature(&paths.curvature())?;
    let base = match cfg.chart.mode {
        ChartMode::Calibrated => {
            let rig = SensorRig::generate(&cfg.stimulus_config(), &cfg.rig_config())?;
            let model = io::read_embedding(&paths.embedding())?;
            measurement_map(&rig, &model, &vec![0.0; cfg.state_dim()])?
        }
        ChartMode::Auto => {
            let grid = &metric.grid;
            let node = (0..grid.n_nodes())
                .filter(|&i| metric.valid[i] && curv.valid[i])
                .max_by_key(|&i| metric.counts[i])
                .ok_or_else(|| Error::InvalidArgument("no valid base node".into()))?;
            grid.node_position(&grid.coords(node))
        }
    };
    let outcome = solve_projectors(&curv, &metric, &base, &cfg.solver_options())?;
    let projs: &[Projector] = match &outcome {
        SolveOutcome::Projectors(p) => p,
        _ => &[],
    };
    io::write_projectors(&paths.projectors(), projs)?;
    write_solve_status(&paths.solve_status(), &outcome)?;
    Ok(outcome)
}

/// Chart stage: build the geodesic lattice from the solved projectors,
/// transform the metric, score block-diagonality, map the measurement
/// series into s, recurse into the blocks and write the final report.
pub fn stage_chart(cfg: &PipelineConfig, paths: &Paths) -> Result<SeparationReport> {
    let n = cfg.state_dim();
    let status = read_solve_status(&paths.solve_status())?;
    if status != "projectors" {
        let report = match status.as_str() {
            "flat_exceptional" => SeparationReport::leaf(
                SeparationStatus::FlatExceptional(vec![n]),
                n,
                "curvature vanishes; projectors undetermined up to rotation",
            ),
            "not_separable" => {
                SeparationReport::leaf(SeparationStatus::NotSeparable, n, "no nontrivial projectors")
            }
            _ => SeparationReport::leaf(SeparationStatus::Undetermined, n, "solver undetermined"),
        };
        std::fs::write(paths.report(), render_report(&report, cfg))?;
        return Ok(report);
    }

    let metric = io::read_metric(&paths.metric())?;
    let curv = io::read_curvature(&paths.curvature())?;
    let conn = io::read_connection(&paths.connection())?;
    let projectors = io::read_projectors(&paths.projectors())?;
    let embedded = io::read_series(&paths.embedded())?;
    let rig = SensorRig::generate(&cfg.stimulus_config(), &cfg.rig_config())?;
    let model = io::read_embedding(&paths.embedding())?;

    let (base, dirs, targets) = chart_seed(cfg, &rig, &model, &metric, &curv.valid)?;
    let frame = build_seed_frame(&projectors, &metric, &base, &dirs, &targets)?;
    let chart = build_chart(&conn, &frame, &cfg.chart.extents, cfg.chart.step)?;
    io::write_chart(&paths.chart(), &chart)?;

    let cm = metric_in_chart(&chart, &metric)?;
    let blocks: Vec<usize> = projectors.iter().map(|p| p.rank).collect();
    let score = block_score(&cm, &blocks)?;

    let index = ChartIndex::new(&chart)?;
    let s_series = series_to_chart(&index, &embedded)?;
    io::write_series(&paths.s_series(), &s_series)?;

    let separable = score.score <= cfg.separation.block_score_threshold;
    let mut report = SeparationReport::leaf(
        if separable {
            SeparationStatus::Separable(blocks.clone())
        } else {
            SeparationStatus::NotSeparable
        },
        n,
        if separable {
            "metric is block-diagonal in the geodesic coordinates"
        } else {
            "projectors found but the chart metric is not block-diagonal"
        },
    );
    report.off_block_score = Some(score.score);
    report.dependence_residuals = score.dependence_residuals.clone();
    report.projector_residuals = projectors
        .iter()
        .map(|p| (p.rank, p.idempotency_residual, p.commutation_residual))
        .collect();

    if separable {
        report.cross_correlations =
            cross_block_independence(&s_series, &blocks, cfg.separation.cross_corr_sigmas);
        report.fused_pairs = report
            .cross_correlations
            .iter()
            .filter(|p| p.max_abs_corr > p.bound)
            .map(|p| (p.block_a, p.block_b))
            .collect();
        let ropts = cfg.recurse_options();
        for b in 0..blocks.len() {
            let sub = restrict_series(&s_series, &blocks, b)?;
            report.children.push(recurse(&sub, &ropts, 1));
        }
    }
    std::fs::write(paths.report(), render_report(&report, cfg))?;
    Ok(report)
}

/// Render the report tree as an indented plain-text document.
pub fn render_report(report: &SeparationReport, cfg: &PipelineConfig) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "block_score_threshold = {:?}\nsolver_tol = {:?}\n",
        cfg.separation.block_score_threshold, cfg.solver.tol
    ));
    render_node(report, 0, &mut out);
    out
}

fn render_node(node: &SeparationReport, depth: usize, out: &mut String) {
    let pad = "  ".repeat(depth);
    let status = match &node.status {
        SeparationStatus::Separable(blocks) => {
            let b: Vec<String> = blocks.iter().map(|v| v.to_string()).collect();
            format!("separable blocks={}", b.join(","))
        }
        SeparationStatus::NotSeparable => "not_separable".to_string(),
        SeparationStatus::FlatExceptional(dims) => {
            let b: Vec<String> = dims.iter().map(|v| v.to_string()).collect();
            format!("flat_exceptional dims={}", b.join(","))
        }
        SeparationStatus::Undetermined => "undetermined".to_string(),
    };
    out.push_str(&format!("{pad}status = {status}\n"));
    out.push_str(&format!("{pad}dim = {}\n", node.dim));
    if let Some(s) = node.off_block_score {
        out.push_str(&format!("{pad}off_block_score = {s:.6}\n"));
    }
    if !node.dependence_residuals.is_empty() {
        let d: Vec<String> = node.dependence_residuals.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&format!("{pad}dependence_residuals = {}\n", d.join(",")));
    }
    for (rank, idem, comm) in &node.projector_residuals {
        out.push_str(&format!(
            "{pad}projector rank={rank} idempotency={idem:.3e} commutation={comm:.3e}\n"
        ));
    }
    for c in &node.cross_correlations {
        out.push_str(&format!(
            "{pad}cross_correlation blocks={},{} max_abs={:.6} bound={:.6}\n",
            c.block_a, c.block_b, c.max_abs_corr, c.bound
        ));
    }
    for (a, b) in &node.fused_pairs {
        out.push_str(&format!("{pad}fused_blocks = {a},{b}\n"));
    }
    if !node.note.is_empty() {
        out.push_str(&format!("{pad}note = {}\n", node.note));
    }
    for (i, child) in node.children.iter().enumerate() {
        out.push_str(&format!("{pad}block {i}:\n"));
        render_node(child, depth + 1, out);
    }
}

// ---------------------------------------------------------------------------
// test lines
// ---------------------------------------------------------------------------

/// One test line: a latitude or longitude sweep paired with a linear
/// sweep of the line particle.
#[derive(Debug, Clone)]
pub struct TestLine {
    /// true: latitude line (fixed latitude, longitude varies).
    pub along_longitude: bool,
    pub fixed_value: f64,
    pub sweep_slope: f64,
    pub source_points: Vec<Vec<f64>>,
}

/// Test lines with known projections onto the source subspaces: the grid
/// of latitudes and longitudes, each paired with a line-particle sweep at
/// a different slope.
pub fn build_test_lines(cfg: &PipelineConfig) -> Vec<TestLine> {
    let ev = &cfg.evaluate;
    let slopes = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let alpha = cfg.stimulus.patch_angle;
    let mut lines = Vec::new();
    let mut slope_idx = 0usize;
    for &along_longitude in &[true, false] {
        for &v in &ev.line_values {
            let slope = slopes[slope_idx % slopes.len()];
            slope_idx += 1;
            let mut pts = Vec::with_capacity(ev.points_per_line);
            for i in 0..ev.points_per_line {
                let tau = -1.0 + 2.0 * i as f64 / (ev.points_per_line - 1) as f64;
                let (phi, theta) = if along_longitude {
                    (tau * ev.line_extent, v)
                } else {
                    (v, tau * ev.line_extent)
                };
                if theta.cos() * phi.cos() < alpha.cos() {
                    continue; // outside the patch
                }
                let ell = slope * tau * ev.line_sweep;
                pts.push(vec![phi, theta, ell]);
            }
            lines.push(TestLine { along_longitude, fixed_value: v, sweep_slope: slope, source_points: pts });
        }
    }
    lines
}

/// Per-line deviation statistics.
#[derive(Debug, Clone)]
pub struct LineEval {
    pub rms_dev: f64,
    pub rms_dev_a: f64,
    pub sagitta: f64,
    pub evaluated: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub per_line: Vec<LineEval>,
    pub mean_rms_frac: f64,
    pub max_rms_frac: f64,
    pub max_rms_a_frac: f64,
    pub max_sagitta: f64,
    pub coverage: f64,
    pub patch_size: f64,
    pub pass: bool,
}

/// Map the test lines through observe -> embed -> chart inverse and
/// compare with the known source geometry.
pub fn evaluate_test_lines(
    cfg: &PipelineConfig,
    rig: &SensorRig,
    model: &EmbeddingModel,
    chart: &GeodesicChart,
) -> Result<(EvalStats, Vec<(TestLine, Vec<Option<Vec<f64>>>)>)> {
    if cfg.stimulus.kind != StimulusKind::SphereLine {
        return Err(Error::InvalidArgument("test lines are defined for the sphere_line stimulus".into()));
    }
    let lines = build_test_lines(cfg);
    let index = ChartIndex::new(chart)?;
    let patch_size = 2.0 * cfg.stimulus.patch_angle;
    let mut per_line = Vec::new();
    let mut mapped_lines = Vec::new();
    let mut total_pts = 0usize;
    let mut eval_pts = 0usize;
    for line in lines {
        let mut s_points: Vec<Option<Vec<f64>>> = Vec::with_capacity(line.source_points.len());
        for x in &line.source_points {
            let s = measurement_map(rig, model, x).ok().and_then(|xt| index.to_s(&xt));
            s_points.push(s);
        }
        let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = line
            .source_points
            .iter()
            .zip(&s_points)
            .filter_map(|(x, s)| s.as_ref().map(|sv| (x, sv)))
            .collect();
        total_pts += line.source_points.len();
        eval_pts += pairs.len();
        if pairs.len() < 3 {
            per_line.push(LineEval {
                rms_dev: f64::NAN,
                rms_dev_a: f64::NAN,
                sagitta: f64::NAN,
                evaluated: pairs.len(),
                total: line.source_points.len(),
            });
            mapped_lines.push((line, s_points));
            continue;
        }
        let mut dev2 = 0.0;
        let mut dev2_a = 0.0;
        for (x, s) in &pairs {
            let d2: f64 = x.iter().zip(s.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let d2a: f64 = x.iter().zip(s.iter()).take(2).map(|(a, b)| (a - b) * (a - b)).sum();
            dev2 += d2;
            dev2_a += d2a;
        }
        let rms_dev = (dev2 / pairs.len() as f64).sqrt();
        let rms_dev_a = (dev2_a / pairs.len() as f64).sqrt();
        // straightness: max distance to the chord between the endpoints
        let first = pairs.first().unwrap().1.clone();
        let last = pairs.last().unwrap().1.clone();
        let chord: Vec<f64> = last.iter().zip(&first).map(|(a, b)| a - b).collect();
        let chord_len: f64 = chord.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut sagitta = 0.0;
        if chord_len > 0.0 {
            for (_, s) in &pairs {
                let rel: Vec<f64> = s.iter().zip(&first).map(|(a, b)| a - b).collect();
                let along: f64 =
                    rel.iter().zip(&chord).map(|(a, b)| a * b).sum::<f64>() / chord_len;
                let off2: f64 = rel
                    .iter()
                    .zip(&chord)
                    .map(|(a, b)| a - b * along / chord_len)
                    .map(|v| v * v)
                    .sum();
                sagitta = f64::max(sagitta, off2.sqrt() / chord_len);
            }
        }
        per_line.push(LineEval {
            rms_dev,
            rms_dev_a,
            sagitta,
            evaluated: pairs.len(),
            total: line.source_points.len(),
        });
        mapped_lines.push((line, s_points));
    }

    let finite: Vec<&LineEval> = per_line.iter().filter(|l| l.rms_dev.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::InvalidArgument("no test line could be evaluated".into()));
    }
    let mean_rms_frac =
        finite.iter().map(|l| l.rms_dev).sum::<f64>() / finite.len() as f64 / patch_size;
    let max_rms_frac = finite.iter().map(|l| l.rms_dev).fold(0.0f64, f64::max) / patch_size;
    let max_rms_a_frac = finite.iter().map(|l| l.rms_dev_a).fold(0.0f64, f64::max) / patch_size;
    let max_sagitta = finite.iter().map(|l| l.sagitta).fold(0.0f64, f64::max);
    let coverage = eval_pts as f64 / total_pts as f64;
    let pass = max_rms_frac <= cfg.evaluate.rms_frac && max_sagitta <= cfg.evaluate.sagitta_frac;
    Ok((
        EvalStats {
            per_line,
            mean_rms_frac,
            max_rms_frac,
            max_rms_a_frac,
            max_sagitta,
            coverage,
            patch_size,
            pass,
        },
        mapped_lines,
    ))
}

pub fn stage_evaluate(cfg: &PipelineConfig, paths: &Paths) -> Result<EvalStats> {
    let rig = SensorRig::generate(&cfg.stimulus_config(), &cfg.rig_config())?;
    let model = io::read_embedding(&paths.embedding())?;
    let chart = io::read_chart(&paths.chart())?;
    let (stats, mapped) = evaluate_test_lines(cfg, &rig, &model, &chart)?;

    let mut text = String::new();
    text.push_str(&format!(
        "patch_size = {:?}\nmean_rms_frac = {:.6}\nmax_rms_frac = {:.6}\nmax_rms_a_frac = {:.6}\nmax_sagitta = {:.6}\ncoverage = {:.6}\nrms_threshold = {:?}\nsagitta_threshold = {:?}\npass = {}\n",
        stats.patch_size,
        stats.mean_rms_frac,
        stats.max_rms_frac,
        stats.max_rms_a_frac,
        stats.max_sagitta,
        stats.coverage,
        cfg.evaluate.rms_frac,
        cfg.evaluate.sagitta_frac,
        stats.pass
    ));
    for (i, l) in stats.per_line.iter().enumerate() {
        text.push_str(&format!(
            "line {i}: rms = {:.6}, rms_a = {:.6}, sagitta = {:.6}, evaluated = {}/{}\n",
            l.rms_dev, l.rms_dev_a, l.sagitta, l.evaluated, l.total
        ));
    }
    std::fs::write(paths.eval(), text)?;

    // per-point line data for plotting and inspection
    let mut csv = String::from("line,point,along_longitude,slope,x0,x1,x2,s0,s1,s2,evaluated\n");
    for (li, (line, s_points)) in mapped.iter().enumerate() {
        for (pi, (x, s)) in line.source_points.iter().zip(s_points).enumerate() {
            match s {
                Some(sv) => csv.push_str(&format!(
                    "{li},{pi},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},1\n",
                    line.along_longitude as u8, line.sweep_slope, x[0], x[1], x[2], sv[0], sv[1], sv[2]
                )),
                None => csv.push_str(&format!(
                    "{li},{pi},{},{:.6},{:.6},{:.6},{:.6},,,,0\n",
                    line.along_longitude as u8, line.sweep_slope, x[0], x[1], x[2]
                )),
            }
        }
    }
    std::fs::write(paths.eval_lines(), csv)?;
    Ok(stats)
}

pub fn stage_plot(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    plot::plot_artifacts(cfg, paths)
}

// ---------------------------------------------------------------------------
// full pipeline
// ---------------------------------------------------------------------------

/// Final outcome of a pipeline run, mapped to the process exit code by the
/// command-line front end.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub report: Option<SeparationReport>,
    pub eval: Option<EvalStats>,
}

impl PipelineSummary {
    pub fn status(&self) -> Option<&SeparationStatus> {
        self.report.as_ref().map(|r| &r.status)
    }
}

/// Run stages in order up to and including `upto` (all stages when None).
/// The config is written back with all defaults materialized.
pub fn run_pipeline(cfg: &PipelineConfig, paths: &Paths, upto: Option<Stage>) -> Result<PipelineSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&paths.out)?;
    std::fs::write(paths.config(), cfg.serialize())?;
    let mut summary = PipelineSummary { report: None, eval: None };
    for stage in Stage::ALL {
        if let Some(limit) = upto {
            if stage > limit {
                break;
            }
        }
        match stage {
            Stage::Simulate => stage_simulate(cfg, paths)?,
            Stage::Sense => stage_sense(cfg, paths)?,
            Stage::Embed => stage_embed(cfg, paths)?,
            Stage::Metric => stage_metric(cfg, paths)?,
            Stage::Curvature => stage_curvature(cfg, paths)?,
            Stage::Separate => {
                stage_separate(cfg, paths)?;
            }
            Stage::Chart => {
                summary.report = Some(stage_chart(cfg, paths)?);
            }
            Stage::Evaluate => {
                // only meaningful when the space separated and the stimulus
                // has known test lines
                let sep = matches!(
                    summary.report.as_ref().map(|r| &r.status),
                    Some(SeparationStatus::Separable(_))
                );
                if sep && cfg.stimulus.kind == StimulusKind::SphereLine {
                    summary.eval = Some(stage_evaluate(cfg, paths)?);
                }
            }
            Stage::Plot => stage_plot(cfg, paths)?,
        }
    }
    Ok(summary)
}
