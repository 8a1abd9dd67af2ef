//! Trajectory-driven Riemannian geometry for nonlinear independent
//! subspace separation.
//!
//! The crate turns an observed multicomponent time series into a metric on
//! state space (the local velocity covariance), derives the affine
//! connection and curvature from it, solves commutation constraints for
//! tangent-space projectors, and builds geodesic source coordinates in
//! which the metric is block-diagonal. A simulated sphere-cap x line
//! stimulus, a distorted pinhole-camera rig and a locally-linear-embedding
//! reduction provide the end-to-end demonstration pipeline.

pub mod config;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod numdiff;
pub mod pipeline;
pub mod plot;
pub mod sensors;
pub mod separation;
pub mod series;
pub mod stimulus;

pub use config::{ChartMode, PipelineConfig, StimulusKind};
pub use embedding::{embed, embed_series, fit_lle, EmbeddingModel, LleConfig};
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, EvalStats, Paths, PipelineSummary, Stage};
pub use geometry::{
    christoffel, estimate_metric, geodesic_step, merge_accumulators, parallel_transport, riemann,
    AccumulatorGrid, CellAccumulator, ConnectionField, CurvatureField, GeodesicPath, MetricField,
    MetricOptions,
};
pub use grid::GridSpec;
pub use sensors::{CameraModel, ParticleMap, RigConfig, SensorRig};
pub use separation::{
    block_score, build_chart, build_seed_frame, cross_block_independence, metric_in_chart, recurse,
    restrict_series, series_to_chart, solve_projectors, BlockScore, ChartIndex, ChartMetric,
    GeodesicChart, PairCorrelation, Projector, RecurseOptions, SeedFrame, SeparationReport,
    SeparationStatus, SolveOutcome, SolverOptions,
};
pub use series::{MeasurementSeries, Segment, Series, Trajectory};
pub use stimulus::{
    energy, generate_trajectory, sample_mb_segment, sample_phase, sphere_line_config,
    ManifoldKind, ManifoldSpec, PhaseSample, Potential, StimulusConfig,
};
