//! SVG plots of a trace: local against global entropy, then `k_t` and
//! `α_t`, over the generation step. One file per run id.

use std::path::{Path, PathBuf};

use guard_decode::trace::{group_by_run, read, total_variation, TraceRecord};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlot {
    pub run_id: String,
    pub file: PathBuf,
    pub steps: usize,
    pub tv_local: f64,
    pub tv_global: f64,
}

impl RunPlot {
    /// Smoothing property with a rounding allowance proportional to length.
    pub fn smoothed(&self) -> bool {
        self.tv_global <= self.tv_local + 1e-12 * self.steps as f64
    }
}

fn file_name(run_id: &str) -> String {
    let safe: String = run_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.svg")
}

type Series<'a> = (&'a str, RGBColor, Vec<(f64, f64)>);

fn panel(
    area: &DrawingArea<SVGBackend<'_>, plotters::coord::Shift>,
    title: &str,
    series: &[Series<'_>],
) -> Result<(), Box<dyn std::error::Error>> {
    let xs = series.iter().flat_map(|s| s.2.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.2.iter().map(|p| p.1));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (mut y_lo, mut y_hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    let pad = ((y_hi - y_lo) * 0.05).max(1e-3);
    y_lo -= pad;
    y_hi += pad;
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x_lo..x_hi.max(x_lo + 1.0), y_lo..y_hi)?;
    chart.configure_mesh().x_desc("t").draw()?;
    for (label, color, points) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(
                points.iter().copied(),
                color.stroke_width(2),
            ))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    Ok(())
}

fn draw(
    path: &Path,
    run_id: &str,
    records: &[&TraceRecord],
) -> Result<(), Box<dyn std::error::Error>> {
    let at = |f: fn(&TraceRecord) -> f64| -> Vec<(f64, f64)> {
        records.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let root = SVGBackend::new(path, (1000, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((3, 1));
    panel(
        &panels[0],
        &format!("{run_id}: entropy"),
        &[
            ("H_loc", BLUE, at(|r| r.h_loc)),
            ("H_glob", RED, at(|r| r.h_glob)),
        ],
    )?;
    panel(
        &panels[1],
        "candidate set size k_t",
        &[("k_t", GREEN, at(|r| r.k_t as f64))],
    )?;
    panel(
        &panels[2],
        "penalty base α_t",
        &[("alpha_t", MAGENTA, at(|r| r.alpha_t))],
    )?;
    root.present()?;
    Ok(())
}

/// Reads `trace`, writes one SVG per run into `out_dir`.
pub fn plot_trace(trace: &Path, out_dir: &Path) -> Result<Vec<RunPlot>, CliError> {
    let file = std::fs::File::open(trace)
        .map_err(|e| CliError::Runtime(format!("cannot open trace {}: {e}", trace.display())))?;
    let records = read(std::io::BufReader::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", trace.display())))?;
    if records.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} holds no records",
            trace.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut plots = Vec::new();
    for (run_id, recs) in group_by_run(&records) {
        let h_loc: Vec<f64> = recs.iter().map(|r| r.h_loc).collect();
        let h_glob: Vec<f64> = recs.iter().map(|r| r.h_glob).collect();
        let path = out_dir.join(file_name(&run_id));
        draw(&path, &run_id, &recs)
            .map_err(|e| CliError::Runtime(format!("plot {run_id}: {e}")))?;
        plots.push(RunPlot {
            run_id,
            file: path,
            steps: recs.len(),
            tv_local: total_variation(&h_loc),
            tv_global: total_variation(&h_glob),
        });
    }
    Ok(plots)
}

pub fn cmd_plot_trace(trace: Option<&Path>, out_dir: Option<&Path>) -> Result<(), CliError> {
    let trace = trace.ok_or_else(|| CliError::Config("plot-trace needs --trace FILE".into()))?;
    let plots = plot_trace(trace, out_dir.unwrap_or(Path::new(".")))?;
    let mut violations = 0;
    for p in &plots {
        println!(
            "{}: {} steps, TV(H_loc) {:.6}, TV(H_glob) {:.6} -> {}",
            p.run_id,
            p.steps,
            p.tv_local,
            p.tv_global,
            p.file.display()
        );
        if !p.smoothed() {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(CliError::Failed(format!(
            "{violations} runs where TV(H_glob) exceeds TV(H_loc)"
        )));
    }
    Ok(())
}
