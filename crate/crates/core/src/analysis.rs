//! Layer-wise similarity heatmaps, feature export and report bundles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{AggregateScores, RobustnessScores};
use crate::vit::train::degrade_to;
use crate::vit::{forward, BaseParameters, LRTokenBank};
use crate::zeroshot::{encode_images, EmbeddingMatrix, ImageEncoder};

/// `S[i][j] = 1 / (1 + ||lr_i - hr_j||)`; rows are LR layers, columns HR layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHeatmap {
    matrix: Vec<Vec<f64>>,
}

pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 / (1.0 + d2.sqrt())
}

pub fn layer_similarity(features_lr: &[Vec<f64>], features_hr: &[Vec<f64>]) -> Result<SimilarityHeatmap> {
    if features_lr.len() != features_hr.len() || features_lr.is_empty() {
        return Err(Error::validation(format!(
            "layer counts differ or are empty: {} vs {}",
            features_lr.len(),
            features_hr.len()
        )));
    }
    let dim = features_lr[0].len();
    if features_lr.iter().chain(features_hr).any(|f| f.len() != dim) {
        return Err(Error::validation("layer feature dimensions differ"));
    }
    let matrix = features_lr
        .par_iter()
        .map(|a| features_hr.iter().map(|b| similarity(a, b)).collect())
        .collect();
    Ok(SimilarityHeatmap { matrix })
}

impl SimilarityHeatmap {
    pub fn from_matrix(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 || matrix.iter().any(|r| r.len() != n) {
            return Err(Error::validation("heatmap must be a non-empty square matrix"));
        }
        Ok(SimilarityHeatmap { matrix })
    }

    pub fn size(&self) -> usize {
        self.matrix.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size()).map(|i| self.matrix[i][i]).collect()
    }

    /// Means of the first and of the last `ceil(depth / 2)` diagonal entries,
    /// `depth` being one less than the number of layers.
    pub fn shallow_deep_means(&self) -> (f64, f64) {
        let diag = self.diagonal();
        let half = (diag.len().saturating_sub(1)).div_ceil(2).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&diag[..half]), mean(&diag[diag.len() - half..]))
    }

    /// Elementwise mean of equally sized heatmaps.
    pub fn mean(maps: &[SimilarityHeatmap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::validation("no heatmaps to average"))?;
        let n = first.size();
        if maps.iter().any(|m| m.size() != n) {
            return Err(Error::validation("heatmaps differ in size"));
        }
        let k = maps.len() as f64;
        let matrix = (0..n)
            .map(|i| (0..n).map(|j| maps.iter().map(|m| m.matrix[i][j]).sum::<f64>() / k).collect())
            .collect();
        Ok(SimilarityHeatmap { matrix })
    }

    pub fn to_csv(&self) -> String {
        let n = self.size();
        let mut out = String::from("lr_layer");
        for j in 0..n {
            let _ = write!(out, ",hr_{j}");
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`SimilarityHeatmap::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::validation("empty heatmap CSV"))?;
        let n = header.split(',').count().saturating_sub(1);
        let matrix = lines
            .enumerate()
            .map(|(i, line)| {
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != n + 1 {
                    return Err(Error::Row {
                        row: i + 1,
                        message: format!("expected {} fields, got {}", n + 1, fields.len()),
                    });
                }
                fields[1..]
                    .iter()
                    .map(|f| {
                        f.trim().parse::<f64>().map_err(|_| Error::Row {
                            row: i + 1,
                            message: format!("bad similarity '{f}'"),
                        })
                    })
                    .collect()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::from_matrix(matrix)
    }
}

/// Heatmap of the model at resolution `n` against the frozen model at full
/// input resolution, averaged over `images`. With `tokens` the LR pass uses
/// the token banks; the HR pass never does.
pub fn model_heatmap(
    params: &BaseParameters,
    tokens: Option<&LRTokenBank>,
    images: &[Image],
    n: usize,
    start_block: usize,
) -> Result<SimilarityHeatmap> {
    let maps = images
        .par_iter()
        .map(|img| {
            let hr = forward(params, None, img, 0)?;
            let lr = forward(params, tokens, &degrade_to(img, n)?, start_block)?;
            layer_similarity(&lr.layer_features, &hr.layer_features)
        })
        .collect::<Result<Vec<_>>>()?;
    SimilarityHeatmap::mean(&maps)
}

/// Encodes `images` and writes the embedding matrix with its sidecar.
pub fn export_features(encoder: &dyn ImageEncoder, images: &[Image], path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let m = encode_images(encoder, images)?;
    m.save(path, None)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Numeric content of a chart, embedded verbatim in the SVG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    pub kind: String,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Mean top-1 accuracy against resolution, one line per model.
pub fn accuracy_chart(aggregates: &AggregateScores) -> ChartData {
    let mut by_model: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &aggregates.rows {
        by_model
            .entry(&r.model_id)
            .or_default()
            .push((f64::from(r.resolution), r.acc));
    }
    ChartData {
        kind: "line".into(),
        title: "Accuracy vs resolution".into(),
        x_label: "resolution".into(),
        y_label: "top-1 accuracy".into(),
        series: by_model
            .into_iter()
            .map(|(name, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: name.into(),
                    points,
                }
            })
            .collect(),
    }
}

/// Mean γ over models per dataset, one bar per resolution.
pub fn gamma_chart(scores: &RobustnessScores) -> ChartData {
    let mut acc: BTreeMap<&str, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for c in &scores.cells {
        let e = acc.entry(&c.dataset_id).or_default().entry(c.resolution).or_default();
        e.0 += c.gamma;
        e.1 += 1;
    }
    ChartData {
        kind: "bar".into(),
        title: "Relative robustness per dataset".into(),
        x_label: "resolution".into(),
        y_label: "mean gamma".into(),
        series: acc
            .into_iter()
            .map(|(name, cells)| Series {
                name: name.into(),
                points: cells
                    .into_iter()
                    .map(|(n, (sum, k))| (f64::from(n), sum / k as f64))
                    .collect(),
            })
            .collect(),
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str, data: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <metadata id=\"chart-data\"><![CDATA[{data}]]></metadata>\n\
         <title>{}</title>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        escape(title),
        WIDTH / 2.0,
        escape(title)
    )
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\" font-size=\"12\">{xl}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">{yl}</text>",
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        cx = WIDTH / 2.0,
        ly = HEIGHT - 12.0,
        cy = HEIGHT / 2.0,
        xl = escape(x_label),
        yl = escape(y_label),
    );
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders a chart as SVG with its [`ChartData`] as JSON inside `<metadata>`.
pub fn render_svg(chart: &ChartData) -> String {
    let data = serde_json::to_string(chart).expect("chart data serializes");
    let mut out = svg_open(&chart.title, &data);
    axes(&mut out, &chart.x_label, &chart.y_label);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let (y_lo, y_hi) = extent(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain([0.0]));
    let y = |v: f64| HEIGHT - MARGIN - (v - y_lo) / (y_hi - y_lo) * plot_h;
    match chart.kind.as_str() {
        "bar" => {
            let mut xs: Vec<f64> = chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let groups = chart.series.len().max(1) as f64;
            let group_w = plot_w / groups;
            let bar_w = group_w / (xs.len() as f64 + 1.0);
            for (g, s) in chart.series.iter().enumerate() {
                let gx = MARGIN + g as f64 * group_w;
                let _ = writeln!(
                    out,
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                    gx + group_w / 2.0,
                    HEIGHT - MARGIN + 14.0,
                    escape(&s.name)
                );
                for &(x, v) in &s.points {
                    let k = xs.iter().position(|&t| t == x).unwrap_or(0);
                    let top = y(v.max(y_lo).max(0.0));
                    let base = y(0.0f64.max(y_lo));
                    let _ = writeln!(
                        out,
                        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{} @ {}: {}</title></rect>",
                        gx + (k as f64 + 0.5) * bar_w,
                        top.min(base),
                        bar_w * 0.9,
                        (base - top).abs(),
                        PALETTE[k % PALETTE.len()],
                        escape(&s.name),
                        x,
                        v
                    );
                }
            }
        }
        _ => {
            let (x_lo, x_hi) = extent(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
            let x = |v: f64| MARGIN + (v - x_lo) / (x_hi - x_lo) * plot_w;
            for (i, s) in chart.series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s.points.iter().map(|&(a, b)| format!("{:.2},{:.2}", x(a), y(b))).collect();
                let _ = writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"><title>{}</title></polyline>",
                    pts.join(" "),
                    escape(&s.name)
                );
                for &(a, b) in &s.points {
                    let _ = writeln!(
                        out,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                        x(a),
                        y(b)
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Extracts the embedded [`ChartData`] from an SVG produced by [`render_svg`].
pub fn parse_chart_data(svg: &str) -> Result<ChartData> {
    let start = svg
        .find("<![CDATA[")
        .ok_or_else(|| Error::validation("no chart data block"))?
        + "<![CDATA[".len();
    let end = svg[start..]
        .find("]]>")
        .ok_or_else(|| Error::validation("unterminated chart data block"))?;
    serde_json::from_str(&svg[start..start + end]).map_err(|e| Error::validation(format!("chart data: {e}")))
}

fn heatmap_svg(n: usize, map: &SimilarityHeatmap) -> String {
    let size = map.size();
    let chart = ChartData {
        kind: "heatmap".into(),
        title: format!("Layer similarity {n}x{n} vs full resolution"),
        x_label: "HR layer".into(),
        y_label: "LR layer".into(),
        series: map
            .rows()
            .iter()
            .enumerate()
            .map(|(i, row)| Series {
                name: format!("lr_{i}"),
                points: row.iter().enumerate().map(|(j, &v)| (j as f64, v)).collect(),
            })
            .collect(),
    };
    let data = serde_json::to_string(&chart).expect("chart data serializes");
    let mut out = svg_open(&chart.title, &data);
    let cell = (HEIGHT - 2.0 * MARGIN).min(WIDTH - 2.0 * MARGIN) / size as f64;
    for (i, row) in map.rows().iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let shade = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{shade},{shade})\"><title>{i},{j}: {v}</title></rect>",
                MARGIN + j as f64 * cell,
                MARGIN + i as f64 * cell,
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Paths written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub scores: PathBuf,
    pub cells: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub charts: Vec<PathBuf>,
}

/// Writes `scores.csv`, `cells.csv`, `heatmap_<n>.csv` and `charts/*.svg`.
pub fn emit_report(
    dir: impl AsRef<Path>,
    aggregates: &AggregateScores,
    scores: &RobustnessScores,
    heatmaps: &[(usize, SimilarityHeatmap)],
) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    let charts_dir = dir.join("charts");
    fs::create_dir_all(&charts_dir).map_err(|e| Error::io(&charts_dir, e))?;
    let write = |p: PathBuf, text: &str| -> Result<PathBuf> {
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let scores_path = write(dir.join("scores.csv"), &aggregates.to_csv())?;
    let cells_path = write(dir.join("cells.csv"), &scores.to_csv())?;
    let mut heatmap_paths = Vec::new();
    let mut charts = vec![
        write(charts_dir.join("accuracy.svg"), &render_svg(&accuracy_chart(aggregates)))?,
        write(charts_dir.join("gamma.svg"), &render_svg(&gamma_chart(scores)))?,
    ];
    for (n, map) in heatmaps {
        heatmap_paths.push(write(dir.join(format!("heatmap_{n}.csv")), &map.to_csv())?);
        charts.push(write(charts_dir.join(format!("heatmap_{n}.svg")), &heatmap_svg(*n, map))?);
    }
    Ok(ReportFiles {
        scores: scores_path,
        cells: cells_path,
        heatmaps: heatmap_paths,
        charts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ModelAggregate;

    #[test]
    fn identical_stacks_have_unit_diagonal() {
        let f = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
        let h = layer_similarity(&f, &f).unwrap();
        assert!(h.diagonal().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn orthonormal_features() {
        let f: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let h = layer_similarity(&f, &f).unwrap();
        let expected = 1.0 / (1.0 + 2f64.sqrt());
        assert!((h.get(0, 1) - expected).abs() < 1e-15);
        assert!((h.get(2, 0) - 0.4142).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(layer_similarity(&[vec![1.0, 0.0]], &[vec![1.0]]).is_err());
        assert!(layer_similarity(&[vec![1.0]], &[vec![1.0], vec![0.0]]).is_err());
    }

    #[test]
    fn shallow_and_deep_halves() {
        let m: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..5).map(|j| if i == j { 0.1 * (i + 1) as f64 } else { 0.0 }).collect())
            .collect();
        let (s, d) = SimilarityHeatmap::from_matrix(m).unwrap().shallow_deep_means();
        assert!((s - 0.15).abs() < 1e-12);
        assert!((d - 0.45).abs() < 1e-12);
    }

    #[test]
    fn heatmap_csv_round_trips() {
        let f = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
        let g = vec![vec![0.3, 0.1], vec![0.2, 0.9], vec![0.7, 0.7]];
        let h = layer_similarity(&f, &g).unwrap();
        assert_eq!(SimilarityHeatmap::from_csv(&h.to_csv()).unwrap(), h);
        assert!(SimilarityHeatmap::from_csv("lr_layer,hr_0\n0,x\n").is_err());
    }

    #[test]
    fn one_model_four_resolutions_is_one_series() {
        let rows = [16, 32, 64, 128]
            .iter()
            .map(|&n| ModelAggregate {
                model_id: "m".into(),
                resolution: n,
                sar: 0.5,
                war: None,
                acc: f64::from(n) / 200.0,
                datasets: 1,
            })
            .collect();
        let chart = accuracy_chart(&AggregateScores { rows });
        assert_eq!(chart.series.len(), 1);
        assert_eq!(chart.series[0].points.len(), 4);
        let back = parse_chart_data(&render_svg(&chart)).unwrap();
        assert_eq!(back, chart);
    }
}
