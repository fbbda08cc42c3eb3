//! SVG plots of evaluation curves.

use std::path::Path;

use frp_core::metrics::EvalCurve;
use plotters::prelude::*;

type PlotResult = Result<(), Box<dyn std::error::Error>>;

/// Miss rate against FPPI on a log axis spanning `[1e-3, 1]`.
pub fn mr_fppi(curve: &EvalCurve, path: &Path) -> PlotResult {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("miss rate vs FPPI (log-average MR {:.4})", curve.log_average_miss_rate),
            ("sans-serif", 18),
        )
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((1e-3f64..1.0f64).log_scale(), 0.0f64..1.0f64)?;
    chart
        .configure_mesh()
        .x_desc("false positives per image")
        .y_desc("miss rate")
        .draw()?;
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.fppi.clamp(1e-3, 1.0), p.miss_rate))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    chart.draw_series(LineSeries::new(pts, &BLUE))?;
    root.present()?;
    Ok(())
}

pub fn precision_recall(curve: &EvalCurve, path: &Path) -> PlotResult {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("precision vs recall", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0f64..1.0f64, 0.0f64..1.0f64)?;
    chart.configure_mesh().x_desc("recall").y_desc("precision").draw()?;
    let mut pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    chart.draw_series(LineSeries::new(pts, &RED))?;
    root.present()?;
    Ok(())
}
