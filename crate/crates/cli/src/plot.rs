use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

/// A named PSNR-vs-SNR curve.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

pub fn render(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        bail!("nothing to plot for {title}");
    }
    let (x_lo, x_hi) = bounds(all.iter().map(|p| p.0));
    let (y_lo, y_hi) = bounds(all.iter().map(|p| p.1));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)?;
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc("PSNR (dB)")
        .draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.08).max(0.25);
    (lo - pad, hi + pad)
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let rows = reader
        .records()
        .map(|r| Ok(r?.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .with_context(|| format!("table has no `{name}` column"))
}

/// Renders plots from a sweep or ablation table. Sweep tables give one
/// file per `(channel, cbr)` with seeds averaged; ablation tables give one
/// file with a curve per arm.
pub fn plot_table(table: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (header, rows) = read_table(table)?;
    let snr = column(&header, "snr_db")?;
    let psnr = column(&header, "mean_psnr_db")?;
    let num = |row: &[String], i: usize| -> Result<f64> {
        row[i].parse::<f64>().with_context(|| format!("bad number `{}`", row[i]))
    };
    std::fs::create_dir_all(out_dir)?;
    if let Ok(arm) = column(&header, "arm") {
        let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &rows {
            curves.entry(row[arm].clone()).or_default().push((num(row, snr)?, num(row, psnr)?));
        }
        let series: Vec<Series> = curves
            .into_iter()
            .map(|(label, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series { label, points }
            })
            .collect();
        let path = out_dir.join("ablation.svg");
        render(&path, "Ablation: PSNR vs SNR", &series)?;
        return Ok(vec![path]);
    }
    let channel = column(&header, "channel")?;
    let cbr = column(&header, "cbr")?;
    let mut groups: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for row in &rows {
        num(row, psnr)?;
        groups
            .entry((row[channel].clone(), row[cbr].clone()))
            .or_default()
            .entry(row[snr].clone())
            .or_default()
            .push(num(row, psnr)?);
    }
    let mut written = Vec::new();
    for ((ch, rate), by_snr) in groups {
        let mut points: Vec<(f64, f64)> = by_snr
            .into_iter()
            .map(|(s, v)| Ok((s.parse::<f64>()?, v.iter().sum::<f64>() / v.len() as f64)))
            .collect::<Result<_>>()?;
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path = out_dir.join(format!("psnr_{ch}_cbr{}.svg", rate.replace('.', "p")));
        render(
            &path,
            &format!("{ch}, CBR {rate}"),
            &[Series {
                label: format!("{ch} cbr {rate}"),
                points,
            }],
        )?;
        written.push(path);
    }
    Ok(written)
}
