//! Method × noise-setting accuracy grids checked against reference bands.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::pipeline::Summary;

const BUILTIN_BANDS: &str = include_str!("../data/reference_bands.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCell {
    pub dataset: String,
    pub column: String,
    pub method: String,
    pub reference_mean: f64,
    #[serde(default)]
    pub reference_std: Option<f64>,
    /// Accepted range; a missing side is unbounded.
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

impl BandCell {
    pub fn contains(&self, value: f64) -> bool {
        self.lower.map_or(true, |lo| value >= lo) && self.upper.map_or(true, |hi| value <= hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBands {
    pub version: u32,
    /// Preferred column order.
    pub columns: Vec<String>,
    pub methods: Vec<String>,
    pub cells: Vec<BandCell>,
}

impl ReferenceBands {
    pub fn builtin() -> Self {
        serde_json::from_str(BUILTIN_BANDS).expect("bundled reference bands parse")
    }

    pub fn cell(&self, dataset: &str, column: &str, method: &str) -> Option<&BandCell> {
        self.cells
            .iter()
            .find(|c| c.dataset == dataset && c.column == column && c.method == method)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportCell {
    pub column: String,
    pub method: String,
    /// One accuracy per summary (seed).
    pub values: Vec<f64>,
    pub median: f64,
    pub band: Option<BandCell>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub dataset: String,
    pub columns: Vec<String>,
    pub methods: Vec<String>,
    pub cells: Vec<ReportCell>,
}

impl Report {
    pub fn flags(&self) -> usize {
        self.cells.iter().filter(|c| c.flagged).count()
    }

    fn cell(&self, column: &str, method: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.column == column && c.method == method)
    }

    pub fn to_text(&self) -> String {
        let width = 18;
        let mut out = format!("{:<20}", self.dataset);
        for c in &self.columns {
            let _ = write!(out, "{c:>width$}");
        }
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{m:<20}");
            for c in &self.columns {
                let text = match self.cell(c, m) {
                    Some(cell) => {
                        let reference = cell.band.as_ref().map(|b| format!(" ({:.1})", b.reference_mean)).unwrap_or_default();
                        let flag = if cell.flagged { "!" } else { "" };
                        format!("{flag}{:.2}{reference}", cell.median)
                    }
                    None => "-".into(),
                };
                let _ = write!(out, "{text:>width$}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "median over seeds; reference in parentheses; ! marks a value outside its band");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,column,median,n,reference_mean,lower,upper,flagged\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            let b = c.band.as_ref();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.method,
                c.column,
                c.median,
                c.values.len(),
                opt(b.map(|b| b.reference_mean)),
                opt(b.and_then(|b| b.lower)),
                opt(b.and_then(|b| b.upper)),
                c.flagged
            );
        }
        out
    }
}

/// Builds the grid. All summaries must come from one dataset family.
pub fn build_report(summaries: &[Summary], bands: &ReferenceBands) -> CliResult<Report> {
    let Some(first) = summaries.first() else {
        return Err(CliError::Argument("no summaries given".into()));
    };
    if let Some(other) = summaries.iter().find(|s| s.dataset != first.dataset) {
        return Err(CliError::Argument(format!(
            "summaries mix datasets '{}' and '{}'",
            first.dataset, other.dataset
        )));
    }
    let mut grid: BTreeMap<(String, &str), Vec<f64>> = BTreeMap::new();
    for s in summaries {
        for (method, acc) in [
            ("cross-entropy", s.baseline.test_accuracy),
            ("improved-baseline", s.improved.test_accuracy),
            ("two-stage", s.two_stage.test_accuracy),
        ] {
            grid.entry((s.column.clone(), method)).or_default().push(acc);
        }
    }
    let mut columns: Vec<String> = bands
        .columns
        .iter()
        .filter(|c| summaries.iter().any(|s| &s.column == *c))
        .cloned()
        .collect();
    let mut extra: Vec<String> = summaries
        .iter()
        .map(|s| s.column.clone())
        .filter(|c| !columns.contains(c))
        .collect();
    extra.sort();
    extra.dedup();
    columns.extend(extra);

    let mut cells = Vec::new();
    for column in &columns {
        for method in &bands.methods {
            let Some(values) = grid.get(&(column.clone(), method.as_str())) else {
                continue;
            };
            let m = median(values);
            let band = bands.cell(&first.dataset, column, method).cloned();
            let flagged = band.as_ref().is_some_and(|b| !b.contains(m));
            cells.push(ReportCell {
                column: column.clone(),
                method: method.clone(),
                values: values.clone(),
                median: m,
                band,
                flagged,
            });
        }
    }
    Ok(Report {
        dataset: first.dataset.clone(),
        columns,
        methods: bands.methods.clone(),
        cells,
    })
}
