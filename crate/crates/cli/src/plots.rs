//! Static figures. Labels live in the companion TOML/CSV files; the images
//! carry no text so no font is needed.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

const PALETTE: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// One polyline per series over a shared step axis.
pub fn line_chart(path: &Path, series: &[Vec<(f64, f64)>]) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let (x0, x1) = bounds(series.iter().flatten().map(|p| p.0));
    let (y0, y1) = bounds(series.iter().flatten().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, y0), (x1, y0)], BLACK)))
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, y0), (x0, y1)], BLACK)))
        .map_err(|e| anyhow!("{e}"))?;
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s.iter().copied().filter(|p| p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts, PALETTE[i % PALETTE.len()]))
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Grouped bars: `groups[g][k]` is bar `k` of group `g`, each metric scaled
/// to its own maximum so different units share one axis.
pub fn grouped_bars(path: &Path, groups: &[Vec<f64>]) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let k = groups.first().map_or(0, Vec::len);
    let maxes: Vec<f64> = (0..k)
        .map(|j| {
            groups
                .iter()
                .map(|g| g[j].abs())
                .filter(|v| v.is_finite())
                .fold(0.0, f64::max)
                .max(1e-12)
        })
        .collect();
    let n = groups.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .build_cartesian_2d(0.0..n, 0.0..1.05f64)
        .map_err(|e| anyhow!("{e}"))?;
    let width = 0.8 / k.max(1) as f64;
    for (g, vals) in groups.iter().enumerate() {
        for (j, v) in vals.iter().enumerate() {
            let h = if v.is_finite() { v.abs() / maxes[j] } else { 0.0 };
            let x = g as f64 + 0.1 + j as f64 * width;
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x, 0.0), (x + width * 0.9, h)],
                    PALETTE[j % PALETTE.len()].filled(),
                )))
                .map_err(|e| anyhow!("{e}"))?;
        }
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}
