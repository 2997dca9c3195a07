//! Dependency-free SVG plots. The sidecar CSV holds exactly the plotted
//! values and re-rendering it yields the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Columns `x`, `y`, `fit`: scatter of `y` with `fit` drawn as a line.
    LawFit,
    /// Columns `x` then one or more series drawn as lines with markers.
    Line,
    /// Columns `x`, `y`.
    Scatter,
}

impl PlotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::LawFit => "law_fit",
            PlotKind::Line => "line",
            PlotKind::Scatter => "scatter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "law_fit" => Some(PlotKind::LawFit),
            "line" => Some(PlotKind::Line),
            "scatter" => Some(PlotKind::Scatter),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotTable {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        PlotTable { title: title.to_string(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    fn check(&self, kind: PlotKind) -> Result<()> {
        if self.rows.is_empty() {
            bail!("schema error: plot `{}` has no rows", self.title);
        }
        if let Some(bad) = self.rows.iter().find(|r| r.len() != self.columns.len()) {
            bail!("schema error: row has {} values for {} columns", bad.len(), self.columns.len());
        }
        let ok = match kind {
            PlotKind::LawFit => self.columns == ["x", "y", "fit"],
            PlotKind::Scatter => self.columns == ["x", "y"],
            PlotKind::Line => self.columns.len() >= 2 && self.columns[0] == "x",
        };
        if !ok {
            bail!("schema error: columns {:?} do not fit a {} plot", self.columns, kind.as_str());
        }
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            bail!("schema error: plot `{}` contains non-finite values", self.title);
        }
        Ok(())
    }
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

pub fn render_svg(table: &PlotTable, kind: PlotKind) -> Result<String> {
    table.check(kind)?;
    let (x0, x1) = range(table.rows.iter().map(|r| r[0]));
    let (y0, y1) = range(table.rows.iter().flat_map(|r| r[1..].iter().copied()));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#)?;
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#, W / 2.0, escape(&table.title))?;
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    )?;
    for (v, x, y, anchor) in [
        (x0, PAD, H - PAD + 16.0, "start"),
        (x1, W - PAD, H - PAD + 16.0, "end"),
        (y0, PAD - 4.0, H - PAD, "end"),
        (y1, PAD - 4.0, PAD + 4.0, "end"),
    ] {
        writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-family="sans-serif" font-size="10">{v:.3}</text>"#)?;
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
        W / 2.0,
        H - 8.0,
        escape(&table.columns[0])
    )?;

    let mut rows: Vec<&Vec<f64>> = table.rows.iter().collect();
    if kind != PlotKind::Scatter {
        rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    }
    let line = |col: usize| {
        rows.iter()
            .enumerate()
            .map(|(i, r)| format!("{}{:.2} {:.2}", if i == 0 { "M" } else { " L" }, sx(r[0]), sy(r[col])))
            .collect::<String>()
    };
    let dots = |s: &mut String, col: usize, color: &str| -> std::fmt::Result {
        for r in &rows {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(r[0]), sy(r[col]))?;
        }
        Ok(())
    };
    match kind {
        PlotKind::Scatter => dots(&mut s, 1, COLORS[0])?,
        PlotKind::LawFit => {
            dots(&mut s, 1, COLORS[0])?;
            writeln!(s, r#"<path d="{}" fill="none" stroke="{}"/>"#, line(2), COLORS[1])?;
        }
        PlotKind::Line => {
            for col in 1..table.columns.len() {
                let color = COLORS[(col - 1) % COLORS.len()];
                writeln!(s, r#"<path d="{}" fill="none" stroke="{color}"/>"#, line(col))?;
                dots(&mut s, col, color)?;
                writeln!(
                    s,
                    r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" fill="{color}">{}</text>"#,
                    W - PAD + 4.0,
                    PAD + 12.0 * col as f64,
                    escape(&table.columns[col])
                )?;
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn sidecar_path(svg: &Path) -> PathBuf {
    svg.with_extension("csv")
}

/// Writes `path` (SVG) and its sidecar CSV. The CSV's first line records the
/// kind and title so the plot can be rebuilt from it alone.
pub fn emit_plot(table: &PlotTable, kind: PlotKind, path: &Path) -> Result<()> {
    let svg = render_svg(table, kind)?;
    let mut csv_text = format!("# kind={} title={}\n", kind.as_str(), table.title);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&table.columns)?;
    for r in &table.rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    csv_text.push_str(std::str::from_utf8(&w.into_inner()?)?);
    fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), csv_text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<(PlotKind, PlotTable)> {
    let text = fs::read_to_string(path)?;
    let (head, body) = text.split_once('\n').context("empty sidecar")?;
    let rest = head.strip_prefix("# kind=").context("sidecar header missing")?;
    let (kind, title) = rest.split_once(" title=").context("sidecar header missing title")?;
    let kind = PlotKind::parse(kind).context("unknown plot kind")?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let columns = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>()?);
    }
    Ok((kind, PlotTable { title: title.to_string(), columns, rows }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> PlotTable {
        let mut t = PlotTable::new("law", &["x", "y", "fit"]);
        for i in 0..5 {
            let x = -1.0 / (0.8 + i as f64 * 0.7);
            t.push(vec![x, 5.8 * x + 0.1 * (i as f64).sin(), 5.8 * x]);
        }
        t
    }

    #[test]
    fn empty_and_mismatched_tables_are_rejected() {
        let empty = PlotTable::new("e", &["x", "y"]);
        assert!(render_svg(&empty, PlotKind::Scatter).unwrap_err().to_string().contains("schema"));
        assert!(render_svg(&table(), PlotKind::Scatter).is_err());
        let mut ragged = PlotTable::new("r", &["x", "y"]);
        ragged.push(vec![1.0]);
        assert!(render_svg(&ragged, PlotKind::Scatter).is_err());
    }

    #[test]
    fn sidecar_rebuilds_identical_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("law.svg");
        emit_plot(&table(), PlotKind::LawFit, &path).unwrap();
        let (kind, back) = read_sidecar(&sidecar_path(&path)).unwrap();
        assert_eq!(kind, PlotKind::LawFit);
        assert_eq!(back, table());
        let again = dir.path().join("again.svg");
        emit_plot(&back, kind, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }
}
