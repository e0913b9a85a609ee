//! Raster figures: training curves and confusion matrices.
//!
//! Text needs a TrueType font. One is looked up once per process (the
//! `OCTCLASS_FONT` variable first, then common system paths); without one
//! the figures are drawn unlabelled.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::metrics::EvaluationReport;
use crate::train::TrainHistory;
use crate::{Error, Result};

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// True when a font was registered and figures carry text.
pub fn fonts_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var("OCTCLASS_FONT").ok();
        for path in env.iter().map(String::as_str).chain(FONT_CANDIDATES.iter().copied()) {
            let Ok(bytes) = std::fs::read(path) else { continue };
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
        log::warn!("no TrueType font found; figures will have no text");
        false
    })
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Accuracy,
    Loss,
}

impl CurveKind {
    fn title(self) -> &'static str {
        match self {
            CurveKind::Accuracy => "Training and validation accuracy",
            CurveKind::Loss => "Training and validation loss",
        }
    }

    fn series(self, history: &TrainHistory) -> [(&'static str, Vec<(f64, f64)>); 2] {
        let pick = |f: fn(&crate::train::EpochRecord) -> f64| {
            history.records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>()
        };
        match self {
            CurveKind::Accuracy => [("train", pick(|r| r.train_acc)), ("validation", pick(|r| r.val_acc))],
            CurveKind::Loss => [("train", pick(|r| r.train_loss)), ("validation", pick(|r| r.val_loss))],
        }
    }
}

/// Line chart of one metric per epoch, train and validation.
pub fn plot_curve(history: &TrainHistory, kind: CurveKind, path: impl AsRef<Path>) -> Result<()> {
    if history.records.is_empty() {
        return Err(Error::Plot("history has no epochs".into()));
    }
    let text = fonts_available();
    let series = kind.series(history);
    let last = history.records.iter().map(|r| r.epoch).max().unwrap_or(1) as f64;
    let y_max = series
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max);
    let y_max = match kind {
        CurveKind::Accuracy => 1.0,
        CurveKind::Loss => (y_max * 1.1).max(1e-3),
    };
    let root = BitMapBackend::new(path.as_ref(), (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(15).x_label_area_size(40).y_label_area_size(55);
    if text {
        builder.caption(kind.title(), ("sans-serif", 24));
    }
    let mut chart = builder
        .build_cartesian_2d(1.0..last.max(2.0), 0.0..y_max)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("epoch").y_desc(match kind {
            CurveKind::Accuracy => "accuracy",
            CurveKind::Loss => "loss",
        });
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    for ((name, points), color) in series.into_iter().zip([BLUE, RED]) {
        let s = chart
            .draw_series(LineSeries::new(points.clone(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            s.label(name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `accuracy.png` and `loss.png` into `dir`.
pub fn plot_history(history: &TrainHistory, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (kind, name) in [(CurveKind::Accuracy, "accuracy.png"), (CurveKind::Loss, "loss.png")] {
        let path = dir.join(name);
        plot_curve(history, kind, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Confusion-matrix heatmap: rows are true classes, columns predictions.
pub fn plot_confusion(report: &EvaluationReport, path: impl AsRef<Path>) -> Result<()> {
    let n = report.confusion.len();
    if n == 0 {
        return Err(Error::Plot("empty confusion matrix".into()));
    }
    let text = fonts_available();
    let cell = 70u32;
    let margin = if text { 110 } else { 10 };
    let size = (margin + cell * n as u32 + 20, margin + cell * n as u32 + 20);
    let root = BitMapBackend::new(path.as_ref(), size).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max = report.confusion.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let origin = |i: usize| (margin + cell * i as u32) as i32;
    for (t, row) in report.confusion.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let shade = 1.0 - 0.85 * v as f64 / max;
            let color = RGBColor((255.0 * shade) as u8, (255.0 * shade) as u8, 255);
            let (x0, y0) = (origin(p), origin(t));
            root.draw(&Rectangle::new(
                [(x0, y0), (x0 + cell as i32, y0 + cell as i32)],
                color.filled(),
            ))
            .map_err(plot_err)?;
            root.draw(&Rectangle::new([(x0, y0), (x0 + cell as i32, y0 + cell as i32)], BLACK))
                .map_err(plot_err)?;
            if text {
                let fg = if shade < 0.5 { WHITE } else { BLACK };
                root.draw(&Text::new(
                    v.to_string(),
                    (x0 + 8, y0 + cell as i32 / 2 - 8),
                    ("sans-serif", 16).into_font().color(&fg),
                ))
                .map_err(plot_err)?;
            }
        }
    }
    if text {
        for (i, c) in report.classes.iter().enumerate() {
            let style = ("sans-serif", 14).into_font();
            root.draw(&Text::new(c.name.clone(), (8, origin(i) + cell as i32 / 2 - 7), style.clone()))
                .map_err(plot_err)?;
            root.draw(&Text::new(c.name.clone(), (origin(i) + 4, margin as i32 - 24), style))
                .map_err(plot_err)?;
        }
        root.draw(&Text::new(
            format!("{} (rows: true, columns: predicted)", report.model),
            (8, 8),
            ("sans-serif", 16).into_font(),
        ))
        .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}
