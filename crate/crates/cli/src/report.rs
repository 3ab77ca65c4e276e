//! Static SVG curves (loss per step, kNN accuracy per epoch), one line per
//! run, and the results table as CSV and Markdown.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use wildssl::eval::{read_results, ResultRow};
use wildssl::trainer::{read_metrics, MetricRow};

use crate::ReportArgs;

pub const TABLE_HEADER: [&str; 6] = ["run_id", "mode", "fraction", "Acc", "Prec", "Rec"];

struct Curve {
    name: String,
    points: Vec<(f64, f64)>,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .unwrap_or_else(|| dir.display().to_string())
}

fn plot(path: &Path, title: &str, x_label: &str, y_label: &str, curves: &[Curve]) -> Result<()> {
    let all = curves.iter().flat_map(|c| c.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        bail!("nothing to plot for {}", path.display());
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw()?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(c.points.iter().copied(), color.stroke_width(2)))?
            .label(c.name.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 4), (x + 16, y + 4)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn fmt_row(r: &ResultRow) -> [String; 6] {
    [
        r.run_id.clone(),
        r.mode.as_str().to_string(),
        r.fraction.to_string(),
        format!("{:.1}", r.top1),
        format!("{:.1}", r.prec_fg),
        format!("{:.1}", r.rec_fg),
    ]
}

pub fn results_table(rows: &[ResultRow]) -> (String, String) {
    let mut csv = TABLE_HEADER.join(",") + "\n";
    let mut md = format!("| {} |\n|{}\n", TABLE_HEADER.join(" | "), "---|".repeat(TABLE_HEADER.len()));
    for r in rows {
        let cells = fmt_row(r);
        csv += &(cells.join(",") + "\n");
        let _ = writeln!(md, "| {} |", cells.join(" | "));
    }
    (csv, md)
}

pub fn run(out: &Path, args: &ReportArgs) -> Result<()> {
    if args.runs.is_empty() && args.results.is_empty() {
        bail!("`report` needs --runs and/or --results");
    }
    fs::create_dir_all(out)?;
    let mut written: Vec<PathBuf> = Vec::new();
    if !args.runs.is_empty() {
        let mut runs: Vec<(String, Vec<MetricRow>)> = Vec::new();
        for dir in &args.runs {
            let path = dir.join("metrics.csv");
            let rows = read_metrics(&path).with_context(|| format!("reading {}", path.display()))?;
            runs.push((run_name(dir), rows));
        }
        let loss: Vec<Curve> = runs
            .iter()
            .map(|(name, rows)| Curve {
                name: name.clone(),
                points: rows.iter().map(|r| (r.step as f64, r.loss)).collect(),
            })
            .collect();
        let p = out.join("loss.svg");
        plot(&p, "Pretraining loss", "step", "loss", &loss)?;
        written.push(p);
        let knn: Vec<Curve> = runs
            .iter()
            .map(|(name, rows)| Curve {
                name: name.clone(),
                points: rows
                    .iter()
                    .filter_map(|r| r.knn_acc.map(|a| (r.epoch as f64, a)))
                    .collect(),
            })
            .filter(|c| !c.points.is_empty())
            .collect();
        if !knn.is_empty() {
            let p = out.join("knn.svg");
            plot(&p, "kNN accuracy", "epoch", "top-1 (%)", &knn)?;
            written.push(p);
        }
    }
    if !args.results.is_empty() {
        let mut rows = Vec::new();
        for p in &args.results {
            rows.extend(read_results(p).with_context(|| format!("reading {}", p.display()))?);
        }
        let (csv, md) = results_table(&rows);
        for (name, text) in [("table.csv", csv), ("table.md", md)] {
            let p = out.join(name);
            fs::write(&p, text)?;
            written.push(p);
        }
    }
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
