use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 7] = ["run_id", "arm", "seed", "step", "metric", "affordance", "value"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AffordanceIou,
    ObjectAccuracy,
    InteractionSuccessRate,
    InteractedObjectRate,
    InteractableAnnotationRate,
    NonInteractableAnnotationRate,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::AffordanceIou,
        Metric::ObjectAccuracy,
        Metric::InteractionSuccessRate,
        Metric::InteractedObjectRate,
        Metric::InteractableAnnotationRate,
        Metric::NonInteractableAnnotationRate,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AffordanceIou => "affordance_iou",
            Metric::ObjectAccuracy => "object_accuracy",
            Metric::InteractionSuccessRate => "interaction_success_rate",
            Metric::InteractedObjectRate => "interacted_object_rate",
            Metric::InteractableAnnotationRate => "interactable_annotation_rate",
            Metric::NonInteractableAnnotationRate => "non_interactable_annotation_rate",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }
}

/// One row of the long-format metric CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub step: u64,
    pub metric: Metric,
    /// Affordance name, or `all` for affordance-independent metrics.
    pub affordance: String,
    pub value: f64,
}

/// Confusion counts of the object-wise test for one run and affordance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectwiseRow {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub affordance: String,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub skipped: usize,
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(REPORT_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a metric CSV, rejecting a wrong header, bad rows, non-finite or
/// out-of-range values, and files without rows.
pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::malformed(path, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != REPORT_HEADER {
        return Err(Error::malformed(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<MetricRecord>().enumerate() {
        let r = row.map_err(|e| Error::malformed(path, format!("row {}: {e}", i + 1)))?;
        if !r.value.is_finite() || !(0.0..=1.0).contains(&r.value) {
            return Err(Error::malformed(path, format!("row {}: value {} outside [0, 1]", i + 1, r.value)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::malformed(path, "no metric rows"));
    }
    Ok(out)
}

/// Seed aggregate of one curve at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
}

/// Curves keyed by (metric, arm, affordance) with mean and range across
/// seeds at each step.
pub fn aggregate_curves(records: &[MetricRecord]) -> BTreeMap<(Metric, String, String), Vec<CurvePoint>> {
    let mut acc: BTreeMap<(Metric, String, String), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        acc.entry((r.metric, r.arm.clone(), r.affordance.clone()))
            .or_default()
            .entry(r.step)
            .or_default()
            .push(r.value);
    }
    acc.into_iter()
        .map(|(k, steps)| {
            let pts = steps
                .into_iter()
                .map(|(step, v)| CurvePoint {
                    step,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    seeds: v.len(),
                })
                .collect();
            (k, pts)
        })
        .collect()
}

/// Per run, metric and affordance: mean over the last `fraction` of the
/// run's recorded steps (at least one).
pub fn final_values(records: &[MetricRecord], fraction: f64) -> BTreeMap<(String, String, u64, Metric, String), f64> {
    let mut by: BTreeMap<(String, String, u64, Metric, String), BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records {
        by.entry((r.run_id.clone(), r.arm.clone(), r.seed, r.metric, r.affordance.clone()))
            .or_default()
            .insert(r.step, r.value);
    }
    by.into_iter()
        .map(|(k, steps)| {
            let n = steps.len();
            let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
            let tail: Vec<f64> = steps.values().skip(n - take).copied().collect();
            (k, tail.iter().sum::<f64>() / tail.len() as f64)
        })
        .collect()
}

fn mean_range(v: &[f64]) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

/// Markdown tables of final training metrics and held-out test metrics,
/// mean and [min, max] over seeds per arm.
pub fn summary_markdown(curves: &[MetricRecord], test: &[MetricRecord], fraction: f64) -> String {
    let mut s = String::from("# Ablation summary\n\n");
    let mut section = |title: &str, values: BTreeMap<(Metric, String, String), Vec<f64>>| {
        let _ = writeln!(s, "## {title}\n\n| metric | affordance | arm | mean | range | seeds |\n|---|---|---|---|---|---|");
        for ((m, aff, arm), v) in values {
            let (mean, lo, hi) = mean_range(&v);
            let _ = writeln!(s, "| {} | {aff} | {arm} | {mean:.4} | [{lo:.4}, {hi:.4}] | {} |", m.name(), v.len());
        }
        s.push('\n');
    };
    let mut fin: BTreeMap<(Metric, String, String), Vec<f64>> = BTreeMap::new();
    for ((_, arm, _, m, aff), v) in final_values(curves, fraction) {
        fin.entry((m, aff, arm)).or_default().push(v);
    }
    section("Final training metrics", fin);
    let mut t: BTreeMap<(Metric, String, String), Vec<f64>> = BTreeMap::new();
    for r in test {
        t.entry((r.metric, r.affordance.clone(), r.arm.clone())).or_default().push(r.value);
    }
    section("Held-out test scenes", t);
    s
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One SVG per metric: a line per (arm, affordance) with the seed range
/// shaded when more than one seed contributed.
pub fn plot_metrics(records: &[MetricRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::malformed(out_dir, "no records to plot"));
    }
    std::fs::create_dir_all(out_dir)?;
    let curves = aggregate_curves(records);
    let mut per_metric: BTreeMap<Metric, Vec<(String, &Vec<CurvePoint>)>> = BTreeMap::new();
    for ((m, arm, aff), pts) in &curves {
        per_metric.entry(*m).or_default().push((format!("{arm}/{aff}"), pts));
    }
    let mut written = Vec::new();
    for (metric, lines) in per_metric {
        let path = out_dir.join(format!("{}.svg", metric.name()));
        let max_step = lines.iter().flat_map(|(_, p)| p.iter().map(|c| c.step)).max().unwrap_or(1).max(1);
        {
            let root = SVGBackend::new(&path, (720, 480)).into_drawing_area();
            root.fill(&WHITE).map_err(plot_err)?;
            let mut chart = ChartBuilder::on(&root)
                .caption(metric.name(), ("sans-serif", 22))
                .margin(12)
                .x_label_area_size(36)
                .y_label_area_size(48)
                .build_cartesian_2d(0u64..max_step, 0f64..1f64)
                .map_err(plot_err)?;
            chart
                .configure_mesh()
                .x_desc("environment steps")
                .y_desc(metric.name())
                .draw()
                .map_err(plot_err)?;
            for (i, (label, pts)) in lines.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                if pts.iter().any(|p| p.seeds > 1) {
                    let mut band: Vec<(u64, f64)> = pts.iter().map(|p| (p.step, p.max)).collect();
                    band.extend(pts.iter().rev().map(|p| (p.step, p.min)));
                    chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.2)))).map_err(plot_err)?;
                }
                chart
                    .draw_series(LineSeries::new(pts.iter().map(|p| (p.step, p.mean)), color.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(label.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
            root.present().map_err(plot_err)?;
        }
        written.push(path);
    }
    Ok(written)
}
