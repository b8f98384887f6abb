//! Standalone SVG capacity-curve plots. No renderer dependency: the
//! output is a self-contained file with axes, tick labels, a legend,
//! and one polyline per curve.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiment::CapacityCurve;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 770.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 550.0;

const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Affine data-to-pixel mapping used by the plot; exposed so tests can
/// verify point placement by parsing coordinates back out of the SVG.
pub struct PlotScale {
    pub k_min: f64,
    pub k_max: f64,
}

impl PlotScale {
    pub fn x(&self, k: f64) -> f64 {
        if self.k_max == self.k_min {
            return (LEFT + RIGHT) / 2.0;
        }
        LEFT + (k - self.k_min) / (self.k_max - self.k_min) * (RIGHT - LEFT)
    }

    /// Accuracy axis is fixed to [0, 1].
    pub fn y(&self, accuracy: f64) -> f64 {
        BOTTOM - accuracy * (BOTTOM - TOP)
    }
}

fn fmt(v: f64) -> String {
    format!("{:.2}", v)
}

/// Render named capacity curves into an SVG document string.
pub fn render_svg(curves: &[(String, CapacityCurve)]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("no curves to plot".into()));
    }
    for (name, curve) in curves {
        if curve.rows.is_empty() {
            return Err(Error::InvalidInput(format!("curve '{name}' is empty")));
        }
        curve.validate()?;
    }
    let k_min = curves
        .iter()
        .flat_map(|(_, c)| c.rows.iter())
        .map(|r| r.k)
        .min()
        .unwrap() as f64;
    let k_max = curves
        .iter()
        .flat_map(|(_, c)| c.rows.iter())
        .map(|r| r.k)
        .max()
        .unwrap() as f64;
    let scale = PlotScale { k_min, k_max };

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // axes
    s.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{RIGHT}\" y2=\"{BOTTOM}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{LEFT}\" y1=\"{BOTTOM}\" x2=\"{LEFT}\" y2=\"{TOP}\" stroke=\"black\"/>\n"
    ));

    // y ticks every 0.1
    for i in 0..=10 {
        let acc = i as f64 / 10.0;
        let y = scale.y(acc);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{LEFT}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(LEFT - 5.0),
            fmt(y),
            fmt(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{:.1}</text>\n",
            fmt(LEFT - 9.0),
            fmt(y + 4.0),
            acc
        ));
    }

    // x ticks at each distinct k of the first curve (capped to avoid clutter)
    let ks: Vec<usize> = {
        let mut ks: Vec<usize> = curves
            .iter()
            .flat_map(|(_, c)| c.rows.iter().map(|r| r.k))
            .collect();
        ks.sort_unstable();
        ks.dedup();
        let step = ks.len().div_ceil(16);
        ks.into_iter().step_by(step.max(1)).collect()
    };
    for k in ks {
        let x = scale.x(k as f64);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{BOTTOM}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(x),
            fmt(x),
            fmt(BOTTOM + 5.0)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{k}</text>\n",
            fmt(x),
            fmt(BOTTOM + 20.0)
        ));
    }

    // axis labels
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">filters kept</text>\n",
        fmt((LEFT + RIGHT) / 2.0),
        fmt(HEIGHT - 10.0)
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {})\">test accuracy</text>\n",
        fmt((TOP + BOTTOM) / 2.0),
        fmt((TOP + BOTTOM) / 2.0)
    ));

    // curves
    for (i, (_, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = curve
            .rows
            .iter()
            .map(|r| format!("{},{}", fmt(scale.x(r.k as f64)), fmt(scale.y(r.accuracy))))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for p in &points {
            let (x, y) = p.split_once(',').unwrap();
            s.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"2.5\" fill=\"{color}\"/>\n"
            ));
        }
    }

    // legend
    for (i, (name, _)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let y = TOP + 10.0 + 18.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            fmt(RIGHT - 180.0),
            fmt(y),
            fmt(RIGHT - 150.0),
            fmt(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{}</text>\n",
            fmt(RIGHT - 144.0),
            fmt(y + 4.0),
            escape(name)
        ));
    }

    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg(curves: &[(String, CapacityCurve)], path: &Path) -> Result<()> {
    let svg = render_svg(curves)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
