//! Error-versus-step curves as SVG.

use std::path::Path;

use plotters::prelude::*;
use vtssi::eval::EvalReport;

const COLORS: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

/// Full-horizon curve of a report: observed steps, then generated ones.
pub fn full_curve(r: &EvalReport) -> Vec<Option<f64>> {
    let s = r.options.observe;
    r.inference_error_curve
        .iter()
        .copied()
        .chain(r.prediction_error_curve[s..].iter().copied())
        .collect()
}

/// Plots every report's curve with dashed markers at the observation
/// horizon and the training length.
pub fn error_curves(reports: &[EvalReport], out: &Path) -> Result<(), String> {
    let horizon = reports.iter().map(|r| r.options.horizon).max().unwrap_or(1);
    let ymax = reports
        .iter()
        .flat_map(|r| full_curve(r).into_iter().flatten())
        .fold(1.0f64, f64::max)
        * 1.1;
    let root = SVGBackend::new(out, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption("center error per step", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.5f64..horizon as f64 + 0.5, 0f64..ymax)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("pixels")
        .draw()
        .map_err(|e| e.to_string())?;
    let mut markers = Vec::new();
    for r in reports {
        markers.push((r.options.observe as f64 + 0.5, "observed"));
        if r.train_len < horizon {
            markers.push((r.train_len as f64 + 0.5, "training length"));
        }
    }
    markers.sort_by(|a, b| a.0.total_cmp(&b.0));
    markers.dedup_by(|a, b| a.0 == b.0);
    for (x, _) in &markers {
        chart
            .draw_series(DashedLineSeries::new(
                vec![(*x, 0.0), (*x, ymax)],
                6,
                4,
                BLACK.mix(0.5).stroke_width(1),
            ))
            .map_err(|e| e.to_string())?;
    }
    for (i, r) in reports.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = full_curve(r)
            .into_iter()
            .enumerate()
            .filter_map(|(t, v)| v.map(|v| (t as f64 + 1.0, v)))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(r.variant.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| e.to_string())?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

/// Training ELBO per logged step with a trailing moving average.
pub fn elbo_curve(records: &[vtssi::train::MetricsRecord], out: &Path) -> Result<(), String> {
    if records.is_empty() {
        return Err("empty metrics log".into());
    }
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.step as f64, r.elbo)).collect();
    let window = (records.len() / 50).max(1);
    let smooth: Vec<(f64, f64)> = (0..pts.len())
        .map(|i| {
            let lo = i.saturating_sub(window - 1);
            let m = pts[lo..=i].iter().map(|p| p.1).sum::<f64>() / (i + 1 - lo) as f64;
            (pts[i].0, m)
        })
        .collect();
    let (xmax, lo, hi) = pts.iter().fold((1.0f64, f64::MAX, f64::MIN), |(x, lo, hi), p| {
        (x.max(p.0), lo.min(p.1), hi.max(p.1))
    });
    let pad = ((hi - lo) * 0.05).max(1.0);
    let root = SVGBackend::new(out, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training ELBO", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0f64..xmax, (lo - pad)..(hi + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("ELBO")
        .draw()
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(LineSeries::new(pts, COLORS[0].mix(0.3).stroke_width(1)))
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(LineSeries::new(smooth, COLORS[1].stroke_width(2)))
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}
