//! Deterministic vector plots of pipeline artifacts.
//!
//! Hand-rolled SVG with fixed-precision coordinates: the same inputs
//! always produce byte-identical files.

use std::path::Path;

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::io;
use crate::pipeline::Paths;
use crate::series::Series;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 50.0;

/// Stroke style for one polyline group.
#[derive(Debug, Clone, Copy)]
pub struct Style {
    pub stroke: &'static str,
    pub width: f64,
}

pub const THIN_BLACK: Style = Style { stroke: "#000000", width: 0.8 };
pub const THICK_GRAY: Style = Style { stroke: "#999999", width: 2.4 };

/// Render polyline groups into an SVG with a framed axes box and tick
/// labels. Empty input renders the frame alone.
pub fn svg_plot(path: &Path, title: &str, groups: &[(Vec<Vec<[f64; 2]>>, Style)]) -> Result<()> {
    let mut min = [f64::INFINITY; 2];
    let mut max = [f64::NEG_INFINITY; 2];
    for (lines, _) in groups {
        for line in lines {
            for p in line {
                for a in 0..2 {
                    min[a] = min[a].min(p[a]);
                    max[a] = max[a].max(p[a]);
                }
            }
        }
    }
    let empty = !min[0].is_finite();
    if empty {
        min = [0.0, 0.0];
        max = [1.0, 1.0];
    }
    for a in 0..2 {
        if max[a] - min[a] < 1e-12 {
            max[a] += 0.5;
            min[a] -= 0.5;
        }
    }
    let sx = (WIDTH - 2.0 * MARGIN) / (max[0] - min[0]);
    let sy = (HEIGHT - 2.0 * MARGIN) / (max[1] - min[1]);
    let map = |p: &[f64; 2]| -> (f64, f64) {
        (MARGIN + (p[0] - min[0]) * sx, HEIGHT - MARGIN - (p[1] - min[1]) * sy)
    };

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.6}\" height=\"{:.6}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    ));
    out.push_str(&format!(
        "<text x=\"{:.6}\" y=\"{:.6}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0,
        MARGIN / 2.0
    ));
    // ticks
    for t in 0..5 {
        let fx = min[0] + (max[0] - min[0]) * t as f64 / 4.0;
        let fy = min[1] + (max[1] - min[1]) * t as f64 / 4.0;
        let (px, _) = map(&[fx, min[1]]);
        let (_, py) = map(&[min[0], fy]);
        out.push_str(&format!(
            "<line x1=\"{px:.6}\" y1=\"{:.6}\" x2=\"{px:.6}\" y2=\"{:.6}\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{px:.6}\" y=\"{:.6}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{fx:.3}</text>\n",
            HEIGHT - MARGIN + 18.0
        ));
        out.push_str(&format!(
            "<line x1=\"{:.6}\" y1=\"{py:.6}\" x2=\"{MARGIN}\" y2=\"{py:.6}\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
            MARGIN - 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.6}\" y=\"{:.6}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{fy:.3}</text>\n",
            MARGIN - 8.0,
            py + 3.0
        ));
    }
    for (lines, style) in groups {
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let pts: Vec<String> = line
                .iter()
                .map(|p| {
                    let (x, y) = map(p);
                    format!("{x:.6},{y:.6}")
                })
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{:.3}\"/>\n",
                pts.join(" "),
                style.stroke,
                style.width
            ));
        }
    }
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Polylines from the first `max_segments` segments of a series, projected
/// onto the coordinate pair (ax, ay).
pub fn series_polylines(series: &Series, ax: usize, ay: usize, max_segments: usize) -> Vec<Vec<[f64; 2]>> {
    series
        .segments()
        .iter()
        .take(max_segments)
        .map(|seg| seg.iter_points().map(|p| [p[ax], p[ay]]).collect())
        .collect()
}

/// CSV dump of the same projection, one row per point.
pub fn series_csv(path: &Path, series: &Series, ax: usize, ay: usize, max_segments: usize) -> Result<()> {
    let mut out = String::from("segment,point,x,y\n");
    for (si, seg) in series.segments().iter().take(max_segments).enumerate() {
        for (pi, p) in seg.iter_points().enumerate() {
            out.push_str(&format!("{si},{pi},{:.6},{:.6}\n", p[ax], p[ay]));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Render the standard artifact plots: measurement-space segments, s-space
/// segments, and the test-line overlays when evaluation ran.
pub fn plot_artifacts(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let dir = paths.plot_dir();
    let max_segments = 150;

    if paths.embedded().exists() {
        let embedded = io::read_series(&paths.embedded())?;
        let lines = series_polylines(&embedded, 0, 1, max_segments);
        svg_plot(&dir.join("segments_measurement.svg"), "trajectory segments in measurement coordinates", &[(lines, THIN_BLACK)])?;
        series_csv(&dir.join("segments_measurement.csv"), &embedded, 0, 1, max_segments)?;
    }
    if paths.s_series().exists() {
        let s_series = io::read_series(&paths.s_series())?;
        let lines = series_polylines(&s_series, 0, 1, max_segments);
        svg_plot(&dir.join("segments_source.svg"), "trajectory segments in geodesic coordinates", &[(lines, THIN_BLACK)])?;
        series_csv(&dir.join("segments_source.csv"), &s_series, 0, 1, max_segments)?;
    }
    if paths.eval_lines().exists() {
        let text = std::fs::read_to_string(paths.eval_lines())?;
        let mut s_lines: Vec<Vec<[f64; 3]>> = Vec::new();
        let mut x_lines: Vec<Vec<[f64; 3]>> = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 11 {
                continue;
            }
            let li: usize = f[0].parse().unwrap_or(0);
            while s_lines.len() <= li {
                s_lines.push(Vec::new());
                x_lines.push(Vec::new());
            }
            let x = [
                f[4].parse().unwrap_or(f64::NAN),
                f[5].parse().unwrap_or(f64::NAN),
                f[6].parse().unwrap_or(f64::NAN),
            ];
            x_lines[li].push(x);
            if f[10] == "1" {
                let s = [
                    f[7].parse().unwrap_or(f64::NAN),
                    f[8].parse().unwrap_or(f64::NAN),
                    f[9].parse().unwrap_or(f64::NAN),
                ];
                s_lines[li].push(s);
            }
        }
        // overlays: (s0, s1) experimentally derived vs exact, then the
        // A-subspace projection of both
        let proj =
            |lines: &[Vec<[f64; 3]>], a: usize, b: usize| -> Vec<Vec<[f64; 2]>> {
                lines.iter().map(|l| l.iter().map(|p| [p[a], p[b]]).collect()).collect()
            };
        svg_plot(
            &dir.join("test_lines_overlay.svg"),
            "test lines: geodesic coordinates (thin) vs exact sources (thick)",
            &[(proj(&x_lines, 0, 2), THICK_GRAY), (proj(&s_lines, 0, 2), THIN_BLACK)],
        )?;
        svg_plot(
            &dir.join("test_lines_subspace.svg"),
            "test-line projection onto the first subspace",
            &[(proj(&x_lines, 0, 1), THICK_GRAY), (proj(&s_lines, 0, 1), THIN_BLACK)],
        )?;
    }
    let _ = cfg;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::Segment;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("gbss-plot-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn empty_input_renders_axes_only() {
        let p = tmp("empty.svg");
        svg_plot(&p, "empty", &[]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<rect"));
        assert!(!text.contains("<polyline"));
    }

    #[test]
    fn fixed_input_is_byte_identical() {
        let lines = vec![vec![[0.0, 0.0], [1.0, 0.5], [2.0, -0.3]]];
        let p1 = tmp("det1.svg");
        let p2 = tmp("det2.svg");
        svg_plot(&p1, "t", &[(lines.clone(), THIN_BLACK)]).unwrap();
        svg_plot(&p2, "t", &[(lines, THIN_BLACK)]).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn csv_row_count_matches_points() {
        let seg = Segment::new(2, 0.1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let series = Series::from_segments(2, vec![seg]).unwrap();
        let p = tmp("rows.csv");
        series_csv(&p, &series, 0, 1, 10).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 3);
    }
}
