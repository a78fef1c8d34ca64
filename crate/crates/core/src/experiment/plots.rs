//! Raster plots of training curves and confusion matrices. The numbers
//! behind every image are written as CSV by the caller.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use super::ExperimentError;
use crate::dataset::EmotionLevel;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::trainer::TrainingHistory;

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a system font once. Without one, plots are drawn unlabeled.
fn fonts_available() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let from_env = std::env::var_os("BAVED_SER_FONT").map(PathBuf::from);
        let candidates = from_env.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; plots will have no text");
        false
    })
}

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> ExperimentError + '_ {
    move |e| ExperimentError::Plot(format!("{}: {e:?}", path.display()))
}

/// One labeled curve over epochs.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

pub fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<(), ExperimentError> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(ExperimentError::Plot(format!("{}: nothing to plot", path.display())));
    }
    let x_max = all.iter().map(|p| p.0).fold(1.0, f64::max);
    let (mut y_lo, mut y_hi) =
        all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let pad = ((y_hi - y_lo) * 0.08).max(1e-3);
    y_lo -= pad;
    y_hi += pad;

    let err = draw_err(path);
    let text = fonts_available();
    let root = BitMapBackend::new(path, (800, 520)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16).x_label_area_size(40).y_label_area_size(60);
    if text {
        builder.caption(title, ("sans-serif", 24));
    }
    let mut chart = builder.build_cartesian_2d(0.8..x_max + 0.2, y_lo..y_hi).map_err(&err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc(y_label)
            .x_labels(x_max as usize + 1)
            .x_label_formatter(&|x| format!("{x:.0}"))
            .draw()
            .map_err(&err)?;
    }
    for (k, s) in series.iter().enumerate() {
        let color = Palette99::pick(k).to_rgba();
        let drawn =
            chart.draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2))).map_err(&err)?;
        if text {
            drawn
                .label(s.label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(&err)?;
    }
    if text && series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

/// Row-normalized heatmap with raw counts printed in each cell.
pub fn confusion_heatmap(path: &Path, title: &str, confusion: &ConfusionMatrix) -> Result<(), ExperimentError> {
    let err = draw_err(path);
    let text = fonts_available();
    let root = BitMapBackend::new(path, (560, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(16).x_label_area_size(50).y_label_area_size(80);
    if text {
        builder.caption(title, ("sans-serif", 22));
    }
    let mut chart = builder.build_cartesian_2d(0.0..3.0, 3.0..0.0).map_err(&err)?;
    if text {
        let label = |v: &f64| {
            let i = v.floor() as usize;
            if (v - v.floor() - 0.5).abs() < 1e-9 && i < 3 {
                EmotionLevel::ALL[i].label()
            } else {
                String::new()
            }
        };
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("predicted")
            .y_desc("true")
            .x_labels(7)
            .y_labels(7)
            .x_label_formatter(&label)
            .y_label_formatter(&label)
            .draw()
            .map_err(&err)?;
    }
    for i in 0..3 {
        let row_total = confusion.row_sum(i).max(1) as f64;
        for j in 0..3 {
            let share = confusion.counts[i][j] as f64 / row_total;
            let shade = (255.0 * (1.0 - share)) as u8;
            let (x, y) = (j as f64, i as f64);
            chart
                .draw_series(std::iter::once(Rectangle::new(
                    [(x, y), (x + 1.0, y + 1.0)],
                    RGBColor(shade, shade, 255).filled(),
                )))
                .map_err(&err)?;
            if text {
                let ink = if share > 0.5 { WHITE } else { BLACK };
                chart
                    .draw_series(std::iter::once(Text::new(
                        confusion.counts[i][j].to_string(),
                        (x + 0.42, y + 0.45),
                        ("sans-serif", 22).into_font().color(&ink),
                    )))
                    .map_err(&err)?;
            }
        }
    }
    root.present().map_err(&err)?;
    Ok(())
}

fn curve(history: &TrainingHistory, value: impl Fn(&crate::trainer::EpochRecord) -> f64) -> Vec<(f64, f64)> {
    history.epochs.iter().map(|r| (r.epoch as f64, value(r))).collect()
}

pub const TRAIN_LOSS_PNG: &str = "train_loss.png";
pub const VAL_LOSS_PNG: &str = "val_loss.png";
pub const VAL_F1_PNG: &str = "val_f1.png";
pub const CONFUSION_PNG: &str = "confusion.png";

type CurveSpec = (&'static str, &'static str, &'static str, fn(&crate::trainer::EpochRecord) -> f64);

/// Loss and F1 curves for one or more labeled histories.
pub fn emit_curve_plots(
    histories: &[(&str, &TrainingHistory)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, ExperimentError> {
    if histories.is_empty() || histories.iter().any(|(_, h)| h.is_empty()) {
        return Err(ExperimentError::Plot("cannot plot an empty training history".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let plots: [CurveSpec; 3] = [
        (TRAIN_LOSS_PNG, "Training loss", "loss", |r| r.train_loss),
        (VAL_LOSS_PNG, "Validation loss", "loss", |r| r.val_loss),
        (VAL_F1_PNG, "Validation macro-F1", "macro-F1", |r| r.val_macro_f1),
    ];
    let mut written = Vec::new();
    for (file, title, y, value) in plots {
        let series: Vec<Series> =
            histories.iter().map(|(label, h)| Series { label, points: curve(h, value) }).collect();
        let path = out_dir.join(file);
        line_plot(&path, title, y, &series)?;
        written.push(path);
    }
    Ok(written)
}

/// Three curve plots plus a confusion heatmap for a single model.
pub fn emit_plots(
    history: &TrainingHistory,
    report: &MetricsReport,
    out_dir: &Path,
    label: &str,
) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut written = emit_curve_plots(&[(label, history)], out_dir)?;
    let path = out_dir.join(CONFUSION_PNG);
    confusion_heatmap(&path, &format!("Confusion matrix: {label}"), &report.confusion)?;
    written.push(path);
    Ok(written)
}
