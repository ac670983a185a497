//! SVG line charts. Each chart is written next to a CSV holding exactly the plotted points.

use plotters::prelude::*;

use crate::artifacts::{csv_bytes, OutDir};
use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: &'a [Series],
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    (pad(x0, x1), pad(y0.min(0.0), y1))
}

pub fn render_svg(chart: &Chart) -> Result<String, CliError> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 440)).into_drawing_area();
        let err = |e: &dyn std::fmt::Display| CliError::Io(format!("plot {}: {e}", chart.title));
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let ((x0, x1), (y0, y1)) = bounds(chart.series);
        let mut ctx = ChartBuilder::on(&root)
            .caption(chart.title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1 * 1.05)
            .map_err(|e| err(&e))?;
        ctx.configure_mesh()
            .x_desc(chart.x_label)
            .y_desc(chart.y_label)
            .draw()
            .map_err(|e| err(&e))?;
        for (i, s) in chart.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            ctx.draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        if chart.series.len() > 1 {
            ctx.configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(&e))?;
        }
        root.present().map_err(|e| err(&e))?;
    }
    Ok(svg)
}

pub fn twin_csv(chart: &Chart) -> Result<Vec<u8>, CliError> {
    let rows: Vec<Vec<String>> = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(move |&(x, y)| vec![s.label.clone(), x.to_string(), format!("{y:.6}")]))
        .collect();
    csv_bytes(&["series", chart.x_label, chart.y_label], &rows)
}

/// Writes `plots/<stem>.csv`, and `plots/<stem>.svg` unless `csv_only`.
pub fn write_chart(out: &mut OutDir, stem: &str, chart: &Chart, csv_only: bool) -> Result<(), CliError> {
    out.write(&format!("plots/{stem}.csv"), &twin_csv(chart)?)?;
    if !csv_only {
        out.write(&format!("plots/{stem}.svg"), render_svg(chart)?.as_bytes())?;
    }
    Ok(())
}
