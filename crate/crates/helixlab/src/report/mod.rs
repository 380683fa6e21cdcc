//! Deterministic SVG figures and run configuration plumbing.
//!
//! Every plot is rendered from named columns into a self-contained SVG with
//! fixed layout and formatting, so identical data produces identical bytes.

use crate::error::{Error, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 90.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 52.0;

const SERIES_COLORS: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Heatmap,
    Histogram,
    Scatter,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Line => "line",
            PlotKind::Heatmap => "heatmap",
            PlotKind::Histogram => "histogram",
            PlotKind::Scatter => "scatter",
        }
    }
}

impl FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "line" => Ok(PlotKind::Line),
            "heatmap" => Ok(PlotKind::Heatmap),
            "histogram" => Ok(PlotKind::Histogram),
            "scatter" => Ok(PlotKind::Scatter),
            other => Err(Error::invalid(format!("unknown plot kind {other}"))),
        }
    }
}

/// Named numeric columns of equal length. The first column is the x axis;
/// heatmaps read (x, y, value) from the first three.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    columns: Vec<(String, Vec<f64>)>,
}

impl PlotData {
    pub fn new(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if columns.is_empty() || columns[0].1.is_empty() {
            return Err(Error::Insufficient { what: "plot columns", need: 1, have: 0 });
        }
        let n = columns[0].1.len();
        for (name, col) in &columns {
            if name.is_empty() || name.contains(',') || name.contains('\n') {
                return Err(Error::invalid(format!("bad column name {name:?}")));
            }
            if col.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "plot_data",
                    lhs: vec![n],
                    rhs: vec![col.len()],
                });
            }
            if !col.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!("column {name}")));
            }
        }
        Ok(PlotData { columns })
    }

    pub fn columns(&self) -> &[(String, Vec<f64>)] {
        &self.columns
    }

    pub fn n_rows(&self) -> usize {
        self.columns[0].1.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.columns.iter().map(|(n, _)| n.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for row in 0..self.n_rows() {
            let cells: Vec<String> =
                self.columns.iter().map(|(_, c)| format!("{}", c[row])).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Insufficient {
            what: "csv lines",
            need: 2,
            have: 0,
        })?;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(Error::invalid(format!(
                    "csv row {} has {} cells, expected {}",
                    i + 2,
                    cells.len(),
                    names.len()
                )));
            }
            for (j, cell) in cells.iter().enumerate() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("csv cell {cell:?} is not a number")))?;
                cols[j].push(v);
            }
        }
        PlotData::new(names.into_iter().zip(cols).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        PlotData::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Render a plot to an SVG string. Layout and number formatting are fixed,
/// so equal inputs give byte-equal output.
pub fn render_plot(data: &PlotData, kind: PlotKind, title: &str) -> Result<String> {
    match kind {
        PlotKind::Heatmap => render_heatmap(data, title),
        PlotKind::Line | PlotKind::Scatter => render_xy(data, kind, title),
        PlotKind::Histogram => render_histogram(data, title),
    }
}

/// Render and write a plot file.
pub fn emit_plot(data: &PlotData, kind: PlotKind, title: &str, path: &Path) -> Result<()> {
    let svg = render_plot(data, kind, title)?;
    std::fs::write(path, svg)?;
    Ok(())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn coord(v: f64) -> String {
    format!("{v:.2}")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if a >= 10000.0 || a < 0.001 { format!("{v:.2e}") } else { format!("{v:.4}") };
    if s.contains('.') && !s.contains('e') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        t.to_string()
    } else {
        s
    }
}

struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    /// Map [lo, hi] onto pixel range [p0, p1]; degenerate ranges get ±1 pad.
    fn new(mut lo: f64, mut hi: f64, p0: f64, p1: f64) -> Scale {
        if !(hi > lo) {
            lo -= 1.0;
            hi += 1.0;
        }
        let a = (p1 - p0) / (hi - lo);
        Scale { lo, hi, a, b: p0 - lo * (p1 - p0) / (hi - lo) }
    }

    fn at(&self, v: f64) -> f64 {
        self.a * v + self.b
    }

    fn ticks(&self) -> Vec<f64> {
        (0..5).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        esc(title)
    );
}

fn axes(out: &mut String, xs: &Scale, ys: &Scale, x_label: &str, y_label: &str) {
    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let _ = write!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        coord(x0),
        coord(y0),
        coord(x1),
        coord(y0),
        coord(x0),
        coord(y0),
        coord(x0),
        coord(y1),
    );
    for t in xs.ticks() {
        let px = xs.at(t);
        let _ = write!(
            out,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
            coord(px),
            coord(y0),
            coord(y0 + 5.0),
            coord(y0 + 18.0),
            tick_label(t),
        );
    }
    for t in ys.ticks() {
        let py = ys.at(t);
        let _ = write!(
            out,
            "<line x1=\"{0}\" y1=\"{2}\" x2=\"{1}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\">{5}</text>\n",
            coord(x0 - 5.0),
            coord(x0),
            coord(py),
            coord(x0 - 8.0),
            coord(py + 4.0),
            tick_label(t),
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        coord((x0 + x1) / 2.0),
        coord(HEIGHT - 14.0),
        esc(x_label),
        coord((y0 + y1) / 2.0),
        coord((y0 + y1) / 2.0),
        esc(y_label),
    );
}

fn render_xy(data: &PlotData, kind: PlotKind, title: &str) -> Result<String> {
    if data.columns.len() < 2 {
        return Err(Error::Insufficient { what: "plot columns", need: 2, have: data.columns.len() });
    }
    let x = &data.columns[0];
    let series = &data.columns[1..];
    let xmin = x.1.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = x.1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = series.iter().flat_map(|(_, c)| c).cloned().fold(f64::INFINITY, f64::min);
    let ymax = series.iter().flat_map(|(_, c)| c).cloned().fold(f64::NEG_INFINITY, f64::max);
    let xs = Scale::new(xmin, xmax, MARGIN_L, WIDTH - MARGIN_R);
    let ys = Scale::new(ymin, ymax, HEIGHT - MARGIN_B, MARGIN_T);

    let mut out = String::new();
    svg_open(&mut out, title);
    let y_label = if series.len() == 1 { series[0].0.as_str() } else { "value" };
    axes(&mut out, &xs, &ys, &x.0, y_label);
    for (si, (name, col)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        match kind {
            PlotKind::Line => {
                let pts: Vec<String> = x
                    .1
                    .iter()
                    .zip(col)
                    .map(|(&xv, &yv)| format!("{},{}", coord(xs.at(xv)), coord(ys.at(yv))))
                    .collect();
                let _ = write!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                    color,
                    pts.join(" ")
                );
            }
            _ => {
                for (&xv, &yv) in x.1.iter().zip(col) {
                    let _ = write!(
                        out,
                        "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>\n",
                        coord(xs.at(xv)),
                        coord(ys.at(yv)),
                        color
                    );
                }
            }
        }
        if series.len() > 1 {
            let ly = MARGIN_T + 14.0 * si as f64;
            let _ = write!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n\
                 <text x=\"{}\" y=\"{}\">{}</text>\n",
                coord(WIDTH - MARGIN_R + 6.0),
                coord(ly),
                color,
                coord(WIDTH - MARGIN_R + 20.0),
                coord(ly + 9.0),
                esc(name)
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn render_histogram(data: &PlotData, title: &str) -> Result<String> {
    if data.columns.len() < 2 {
        return Err(Error::Insufficient { what: "plot columns", need: 2, have: data.columns.len() });
    }
    let x = &data.columns[0];
    let y = &data.columns[1];
    let xmin = x.1.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = x.1.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymax = y.1.iter().cloned().fold(0.0f64, f64::max);
    // bars sit on a zero baseline
    let mut gap = f64::INFINITY;
    let mut sorted: Vec<f64> = x.1.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            gap = gap.min(w[1] - w[0]);
        }
    }
    if !gap.is_finite() {
        gap = 1.0;
    }
    let xs = Scale::new(xmin - gap / 2.0, xmax + gap / 2.0, MARGIN_L, WIDTH - MARGIN_R);
    let ys = Scale::new(0.0, ymax.max(1e-12), HEIGHT - MARGIN_B, MARGIN_T);

    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &xs, &ys, &x.0, &y.0);
    let bar_w = xs.a * gap * 0.8;
    for (&xv, &yv) in x.1.iter().zip(&y.1) {
        let px = xs.at(xv) - bar_w / 2.0;
        let py = ys.at(yv);
        let h = ys.at(0.0) - py;
        let _ = write!(
            out,
            "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\"/>\n",
            coord(px),
            coord(py),
            coord(bar_w),
            coord(h.max(0.0)),
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Five-stop linear color map.
fn heat_color(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (0x44 as f64, 0x01 as f64, 0x54 as f64),
        (0x3b as f64, 0x52 as f64, 0x8b as f64),
        (0x21 as f64, 0x91 as f64, 0x8c as f64),
        (0x5e as f64, 0xc9 as f64, 0x62 as f64),
        (0xfd as f64, 0xe7 as f64, 0x25 as f64),
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(STOPS[i].0, STOPS[i + 1].0),
        lerp(STOPS[i].1, STOPS[i + 1].1),
        lerp(STOPS[i].2, STOPS[i + 1].2)
    )
}

fn render_heatmap(data: &PlotData, title: &str) -> Result<String> {
    if data.columns.len() < 3 {
        return Err(Error::Insufficient { what: "plot columns", need: 3, have: data.columns.len() });
    }
    let (xn, xv) = (&data.columns[0].0, &data.columns[0].1);
    let (yn, yv) = (&data.columns[1].0, &data.columns[1].1);
    let vv = &data.columns[2].1;
    let uniq = |v: &[f64]| {
        let mut u: Vec<f64> = v.to_vec();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        u.dedup();
        u
    };
    let ux = uniq(xv);
    let uy = uniq(yv);
    let vmin = vv.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = vv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };

    let (x0, x1) = (MARGIN_L, WIDTH - MARGIN_R);
    let (y0, y1) = (HEIGHT - MARGIN_B, MARGIN_T);
    let cw = (x1 - x0) / ux.len() as f64;
    let ch = (y0 - y1) / uy.len() as f64;

    let mut out = String::new();
    svg_open(&mut out, title);
    for (&cx, (&cy, &val)) in xv.iter().zip(yv.iter().zip(vv)) {
        let xi = ux.iter().position(|&u| u == cx).unwrap();
        let yi = uy.iter().position(|&u| u == cy).unwrap();
        let color = heat_color((val - vmin) / span);
        let _ = write!(
            out,
            "<rect class=\"cell\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            coord(x0 + cw * xi as f64),
            coord(y0 - ch * (yi + 1) as f64),
            coord(cw),
            coord(ch),
            color
        );
    }
    // tick label per distinct coordinate, centered on the cell
    for (xi, &cx) in ux.iter().enumerate() {
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            coord(x0 + cw * (xi as f64 + 0.5)),
            coord(y0 + 16.0),
            tick_label(cx)
        );
    }
    for (yi, &cy) in uy.iter().enumerate() {
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            coord(x0 - 8.0),
            coord(y0 - ch * (yi as f64 + 0.5) + 4.0),
            tick_label(cy)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        coord((x0 + x1) / 2.0),
        coord(HEIGHT - 14.0),
        esc(xn),
        coord((y0 + y1) / 2.0),
        coord((y0 + y1) / 2.0),
        esc(yn),
    );
    // colorbar with min/max labels
    let bar_x = WIDTH - MARGIN_R + 24.0;
    let steps = 16usize;
    let sh = (y0 - y1) / steps as f64;
    let _ = write!(out, "<g class=\"colorbar\">\n");
    for s in 0..steps {
        let t = (s as f64 + 0.5) / steps as f64;
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"{}\" fill=\"{}\"/>\n",
            coord(bar_x),
            coord(y0 - sh * (s + 1) as f64),
            coord(sh),
            heat_color(t)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\">{}</text>\n<text x=\"{}\" y=\"{}\">{}</text>\n</g>\n",
        coord(bar_x + 18.0),
        coord(y0),
        tick_label(vmin),
        coord(bar_x + 18.0),
        coord(y1 + 10.0),
        tick_label(if vmax > vmin { vmax } else { vmin }),
    );
    out.push_str("</svg>\n");
    Ok(out)
}

/// Flat run configuration: a JSON file flattened to dotted keys, plus
/// command-line overrides. Unknown keys are rejected against each command's
/// allow list before use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<String, Value>,
}

impl CliConfig {
    pub fn new() -> Self {
        CliConfig::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::invalid("config root must be a JSON object"))?;
        let mut values = BTreeMap::new();
        for (k, v) in obj {
            flatten(k, v, &mut values);
        }
        Ok(CliConfig { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        CliConfig::from_json(&std::fs::read_to_string(path)?)
    }

    /// Set `key=value`; the value parses as JSON when possible and falls
    /// back to a plain string.
    pub fn set_override(&mut self, dotted: &str, value: &str) -> Result<()> {
        if dotted.is_empty() {
            return Err(Error::invalid("empty override key"));
        }
        let v = serde_json::from_str::<Value>(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        if v.is_object() {
            return Err(Error::invalid(format!("override {dotted} must be a scalar or array")));
        }
        self.values.insert(dotted.to_string(), v);
        Ok(())
    }

    /// Reject keys outside the allow list.
    pub fn require_known(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::invalid(format!(
                    "unknown config key {key}; known keys: {}",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(|s| s.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).and_then(|v| v.as_str())
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.values.get(key).and_then(|v| v.as_u64())
    }

    pub fn get_usize(&self, key: &str) -> Option<usize> {
        self.get_u64(key).map(|v| v as usize)
    }

    pub fn get_i64(&self, key: &str) -> Option<i64> {
        self.values.get(key).and_then(|v| v.as_i64())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.values.get(key).and_then(|v| v.as_f64())
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        self.values.get(key).and_then(|v| v.as_bool())
    }

    /// Effective config as deterministic JSON, one dotted key per entry.
    pub fn echo(&self) -> String {
        let map: serde_json::Map<String, Value> =
            self.values.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        serde_json::to_string_pretty(&Value::Object(map)).unwrap()
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(obj) => {
            for (k, v) in obj {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_line() -> PlotData {
        PlotData::new(vec![
            ("step".into(), vec![0.0, 1.0]),
            ("loss".into(), vec![2.5, 1.0]),
        ])
        .unwrap()
    }

    #[test]
    fn two_point_line_is_one_polyline_with_two_coordinates() {
        let svg = render_plot(&two_point_line(), PlotKind::Line, "loss").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split(' ').count(), 2, "points {points:?}");
        assert!(svg.contains(">step<"), "x axis labeled from the column name");
        assert!(svg.contains(">loss<"), "y axis labeled from the column name");
    }

    #[test]
    fn three_by_three_heatmap_has_nine_cells_and_colorbar() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut v = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                x.push(i as f64);
                y.push(j as f64);
                v.push((i * 3 + j) as f64);
            }
        }
        let data = PlotData::new(vec![
            ("layer".into(), x),
            ("head".into(), y),
            ("ld".into(), v),
        ])
        .unwrap();
        let svg = render_plot(&data, PlotKind::Heatmap, "grid").unwrap();
        assert_eq!(svg.matches("class=\"cell\"").count(), 9);
        assert_eq!(svg.matches("class=\"colorbar\"").count(), 1);
    }

    #[test]
    fn histogram_draws_one_bar_per_row_and_scatter_one_circle_per_point() {
        let data = PlotData::new(vec![
            ("error".into(), vec![-10.0, 0.0, 10.0]),
            ("count".into(), vec![4.0, 0.0, 2.0]),
        ])
        .unwrap();
        let svg = render_plot(&data, PlotKind::Histogram, "errors").unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 3);

        let svg = render_plot(&data, PlotKind::Scatter, "errors").unwrap();
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_plot(&two_point_line(), PlotKind::Line, "t").unwrap();
        let b = render_plot(&two_point_line(), PlotKind::Line, "t").unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        emit_plot(&two_point_line(), PlotKind::Line, "t", &p1).unwrap();
        emit_plot(&two_point_line(), PlotKind::Line, "t", &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn multi_series_line_gets_legend_entries() {
        let data = PlotData::new(vec![
            ("k".into(), vec![1.0, 2.0, 3.0]),
            ("true".into(), vec![0.2, 0.5, 0.9]),
            ("fitted".into(), vec![0.1, 0.45, 0.8]),
        ])
        .unwrap();
        let svg = render_plot(&data, PlotKind::Line, "arms").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">true<") && svg.contains(">fitted<"));
    }

    #[test]
    fn bad_plot_data_is_rejected() {
        assert!(PlotData::new(vec![]).is_err());
        assert!(PlotData::new(vec![("x".into(), vec![])]).is_err());
        assert!(PlotData::new(vec![
            ("x".into(), vec![1.0]),
            ("y".into(), vec![1.0, 2.0]),
        ])
        .is_err());
        assert!(PlotData::new(vec![("x".into(), vec![f64::NAN])]).is_err());
        assert!(PlotData::new(vec![("a,b".into(), vec![1.0])]).is_err());
        let one_col = PlotData::new(vec![("x".into(), vec![1.0])]).unwrap();
        assert!(render_plot(&one_col, PlotKind::Line, "t").is_err());
        assert!(render_plot(&one_col, PlotKind::Heatmap, "t").is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = PlotData::new(vec![
            ("x".into(), vec![0.1, 2.0, -3.75e-9]),
            ("y".into(), vec![1.0 / 3.0, f64::MIN_POSITIVE, 1e300]),
        ])
        .unwrap();
        let back = PlotData::from_csv(&data.to_csv()).unwrap();
        assert_eq!(data, back);
    }

    #[test]
    fn title_and_labels_are_escaped() {
        let data = PlotData::new(vec![
            ("a<b".into(), vec![0.0, 1.0]),
            ("c&d".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        let svg = render_plot(&data, PlotKind::Line, "x<&>y").unwrap();
        assert!(svg.contains("x&lt;&amp;&gt;y"));
        assert!(svg.contains("a&lt;b") && svg.contains("c&amp;d"));
        assert!(!svg.contains("x<&>y"));
    }

    #[test]
    fn config_flattens_and_overrides() {
        let mut cfg = CliConfig::from_json(
            r#"{"train": {"steps": 400, "lr": 0.003}, "task": "addmod113", "flags": [1, 2]}"#,
        )
        .unwrap();
        assert_eq!(cfg.get_u64("train.steps"), Some(400));
        assert_eq!(cfg.get_f64("train.lr"), Some(0.003));
        assert_eq!(cfg.get_str("task"), Some("addmod113"));
        assert!(cfg.get("flags").unwrap().is_array());

        cfg.set_override("train.steps", "800").unwrap();
        assert_eq!(cfg.get_u64("train.steps"), Some(800));
        cfg.set_override("out", "runs/demo").unwrap();
        assert_eq!(cfg.get_str("out"), Some("runs/demo"));
        cfg.set_override("json", "true").unwrap();
        assert_eq!(cfg.get_bool("json"), Some(true));
        assert!(cfg.set_override("bad", "{\"a\": 1}").is_err());

        assert!(cfg
            .require_known(&["train.steps", "train.lr", "task", "flags", "out", "json"])
            .is_ok());
        assert!(cfg.require_known(&["train.steps"]).is_err());
    }

    #[test]
    fn config_echo_is_deterministic_and_reloadable() {
        let cfg = CliConfig::from_json(r#"{"b": 2, "a": {"z": 1, "y": [3]}}"#).unwrap();
        let echo = cfg.echo();
        assert_eq!(echo, cfg.echo());
        let again = CliConfig::from_json(&echo).unwrap();
        assert_eq!(cfg, again);
        let keys: Vec<&str> = cfg.keys().collect();
        assert_eq!(keys, vec!["a.y", "a.z", "b"]);
    }
}
