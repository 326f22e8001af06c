//! Comparison reporting: a per-method metrics table (CSV and aligned
//! text) and an overlaid ROC plot rendered as standalone SVG.

use thiserror::Error;

use crate::eval::RocCurve;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("a report needs at least one row")]
    Empty,
    #[error("baseline row index {0} out of range ({1} rows)")]
    BadBaseline(usize, usize),
    #[error("non-finite metric {metric} in row '{row}'")]
    NonFinite { row: String, metric: &'static str },
}

pub type Result<T, E = ReportError> = std::result::Result<T, E>;

// ── Metrics table ────────────────────────────────────────────────────

/// One evaluated configuration. `method` is the method display name
/// (e.g. `single-structure`, `hierarchical`) and `backbone` the preset
/// it ran with.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub backbone: String,
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Ordered rows plus the index of the baseline row that the
/// improvement column is measured against.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    rows: Vec<ReportRow>,
    baseline_index: usize,
}

pub const CSV_HEADER: &str = "method,backbone,auc,sensitivity,specificity,improvement";

impl MetricsReport {
    pub fn new(rows: Vec<ReportRow>, baseline_index: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(ReportError::Empty);
        }
        if baseline_index >= rows.len() {
            return Err(ReportError::BadBaseline(baseline_index, rows.len()));
        }
        for row in &rows {
            for (metric, v) in [
                ("auc", row.auc),
                ("sensitivity", row.sensitivity),
                ("specificity", row.specificity),
            ] {
                if !v.is_finite() {
                    return Err(ReportError::NonFinite {
                        row: row.method.clone(),
                        metric,
                    });
                }
            }
        }
        Ok(MetricsReport {
            rows,
            baseline_index,
        })
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn baseline(&self) -> &ReportRow {
        &self.rows[self.baseline_index]
    }

    pub fn baseline_index(&self) -> usize {
        self.baseline_index
    }

    /// AUC difference to the baseline; `None` for the baseline row
    /// itself.
    pub fn improvement(&self, index: usize) -> Option<f64> {
        if index == self.baseline_index {
            None
        } else {
            Some(self.rows[index].auc - self.baseline().auc)
        }
    }

    fn improvement_cell(&self, index: usize) -> String {
        match self.improvement(index) {
            None => "Baseline".to_string(),
            Some(d) => format!("{d:+.3}"),
        }
    }

    /// CSV with a fixed header and three-decimal metrics. Row order
    /// matches construction order, so equal inputs give byte-equal
    /// output.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.3},{:.3},{:.3},{}\n",
                row.method,
                row.backbone,
                row.auc,
                row.sensitivity,
                row.specificity,
                self.improvement_cell(i)
            ));
        }
        out
    }

    /// Space-aligned table for terminals and logs.
    pub fn to_text(&self) -> String {
        let header = ["method", "backbone", "auc", "sensitivity", "specificity", "improvement"];
        let mut grid: Vec<[String; 6]> = vec![header.map(str::to_string)];
        for (i, row) in self.rows.iter().enumerate() {
            grid.push([
                row.method.clone(),
                row.backbone.clone(),
                format!("{:.3}", row.auc),
                format!("{:.3}", row.sensitivity),
                format!("{:.3}", row.specificity),
                self.improvement_cell(i),
            ]);
        }
        let widths: Vec<usize> = (0..6)
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &grid {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                line.push_str(cell);
                if c + 1 < row.len() {
                    line.push_str(&" ".repeat(widths[c] - cell.len() + 2));
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

// ── ROC plot ─────────────────────────────────────────────────────────

/// One labeled curve for the overlay plot.
#[derive(Debug, Clone)]
pub struct RocSeries {
    pub label: String,
    pub curve: RocCurve,
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn x_px(fpr: f64) -> f64 {
    MARGIN_L + fpr * (SVG_W - MARGIN_L - MARGIN_R)
}

fn y_px(tpr: f64) -> f64 {
    SVG_H - MARGIN_B - tpr * (SVG_H - MARGIN_T - MARGIN_B)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG with all curves overlaid on a unit square, a dashed
/// chance diagonal, axis ticks every 0.25, and a legend. Output is a
/// pure function of the input.
pub fn roc_svg(series: &[RocSeries]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    ));

    // Frame and ticks.
    let (x0, x1) = (x_px(0.0), x_px(1.0));
    let (y0, y1) = (y_px(0.0), y_px(1.0));
    s.push_str(&format!(
        "  <rect x=\"{x0:.1}\" y=\"{y1:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"black\"/>\n",
        x1 - x0,
        y0 - y1
    ));
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (tx, ty) = (x_px(f), y_px(f));
        s.push_str(&format!(
            "  <line x1=\"{tx:.1}\" y1=\"{y0:.1}\" x2=\"{tx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            y0 + 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{tx:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">{f:.2}</text>\n",
            y0 + 20.0
        ));
        s.push_str(&format!(
            "  <line x1=\"{x0:.1}\" y1=\"{ty:.1}\" x2=\"{:.1}\" y2=\"{ty:.1}\" stroke=\"black\"/>\n",
            x0 - 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">{f:.2}</text>\n",
            x0 - 9.0,
            ty + 4.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">false positive rate</text>\n",
        (x0 + x1) / 2.0,
        y0 + 40.0
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.1} {:.1})\">true positive rate</text>\n",
        x0 - 44.0,
        (y0 + y1) / 2.0,
        x0 - 44.0,
        (y0 + y1) / 2.0
    ));

    // Chance diagonal.
    s.push_str(&format!(
        "  <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y1:.1}\" \
         stroke=\"gray\" stroke-dasharray=\"6 4\"/>\n"
    ));

    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = sr
            .curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_px(p.fpr), y_px(p.tpr)))
            .collect();
        s.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        // Legend entry.
        let ly = MARGIN_T + 16.0 + i as f64 * 20.0;
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
             stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            SVG_W - MARGIN_R + 12.0,
            SVG_W - MARGIN_R + 36.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{} (AUC {:.3})</text>\n",
            SVG_W - MARGIN_R + 42.0,
            ly + 4.0,
            xml_escape(&sr.label),
            sr.curve.trapezoid_area()
        ));
    }

    s.push_str("</svg>\n");
    s
}
