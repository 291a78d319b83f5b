use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalReport, EvalRow};
use crate::data::DatasetId;
use crate::error::{Error, Result};

/// Row labels of the masking table.
pub const NORMAL_ROW: &str = "Normal Accuracy";
pub const MASKED_ROW: &str = "With Masking";

const CAMERA_COLUMNS: [&str; 2] = ["D", "E"];
const EXTERNAL_ORDER: [DatasetId; 3] = [DatasetId::Messidor1, DatasetId::Messidor2, DatasetId::Aptos];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Columns Camera D, Camera E, Avg.
    CameraTable,
    /// One column per external dataset (Messidor-1, Messidor-2, APTOS first), then Avg.
    ExternalTable,
    /// Rows "Normal Accuracy" and "With Masking".
    MaskingTable,
    /// One row per ablation variant.
    AblationTable,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::config(
                "report.layout",
                format!("unknown layout `{s}` (camera_table, external_table, masking_table, ablation_table)"),
            )
        })
    }
}

#[derive(Debug, Clone)]
pub struct RenderedTable {
    pub csv_path: PathBuf,
    pub text_path: PathBuf,
    pub text: String,
}

/// Rounds the shortest decimal representation of `x` half-up (away from
/// zero) to `decimals` places, so `82.55` becomes `82.6`.
pub fn round_half_up(x: f64, decimals: usize) -> String {
    let repr = format!("{}", x.abs());
    if !x.is_finite() || repr.contains('e') {
        return format!("{x:.decimals$}");
    }
    let (int_part, frac_part) = repr.split_once('.').unwrap_or((&repr, ""));
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes()).map(|b| b - b'0').collect();
    let int_len = int_part.len();
    let keep = int_len + decimals;
    let round_up = digits.get(keep).is_some_and(|&d| d >= 5);
    digits.resize(keep, 0);
    let mut int_len = int_len;
    if round_up {
        let mut i = keep;
        loop {
            if i == 0 {
                digits.insert(0, 1);
                int_len += 1;
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let text: String = digits.iter().map(|d| char::from(b'0' + d)).collect();
    let (i, f) = text.split_at(int_len);
    let negative = x < 0.0 && text.bytes().any(|b| b != b'0');
    let sign = if negative { "-" } else { "" };
    if decimals == 0 {
        format!("{sign}{i}")
    } else {
        format!("{sign}{i}.{f}")
    }
}

pub fn format_one_decimal(x: f64) -> String {
    round_half_up(x, 1)
}

fn column_title(domain: &str) -> String {
    if domain.len() == 1 && domain.chars().all(|c| c.is_ascii_uppercase()) {
        return format!("Camera {domain}");
    }
    DatasetId::from_str(domain).map_or_else(|_| domain.to_string(), |d| d.display_name().to_string())
}

fn ordered_columns(layout: Layout, domains: &[String]) -> Result<Vec<String>> {
    if layout == Layout::CameraTable {
        let mut sorted = domains.to_vec();
        sorted.sort();
        if sorted != CAMERA_COLUMNS {
            return Err(Error::Report(format!("camera_table needs domains D and E, found {domains:?}")));
        }
        return Ok(CAMERA_COLUMNS.iter().map(|s| s.to_string()).collect());
    }
    let mut cols: Vec<String> = Vec::new();
    let mut cameras: Vec<&String> = domains.iter().filter(|d| column_title(d).starts_with("Camera ")).collect();
    cameras.sort();
    cols.extend(cameras.into_iter().cloned());
    for id in &EXTERNAL_ORDER {
        if let Some(d) = domains.iter().find(|d| DatasetId::from_str(d).ok().as_ref() == Some(id)) {
            cols.push(d.clone());
        }
    }
    for d in domains {
        if !cols.contains(d) {
            cols.push(d.clone());
        }
    }
    Ok(cols)
}

struct MethodRow<'a> {
    method: String,
    cells: BTreeMap<String, &'a EvalRow>,
}

/// Writes `<out>.csv` (full precision) and `<out>.txt` (aligned, one decimal,
/// best value per column marked with `*`).
pub fn render_report(reports: &[EvalReport], layout: Layout, out: &Path) -> Result<RenderedTable> {
    let mut methods: Vec<MethodRow<'_>> = Vec::new();
    let mut domains: Vec<String> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    let mut hashes: Vec<String> = Vec::new();
    for report in reports {
        for row in &report.rows {
            let idx = match methods.iter().position(|m| m.method == row.method) {
                Some(i) => i,
                None => {
                    methods.push(MethodRow { method: row.method.clone(), cells: BTreeMap::new() });
                    methods.len() - 1
                }
            };
            if methods[idx].cells.insert(row.domain.clone(), row).is_some() {
                return Err(Error::Report(format!("duplicate row {} / {}", row.method, row.domain)));
            }
            if !domains.contains(&row.domain) {
                domains.push(row.domain.clone());
            }
        }
        seeds.extend(report.provenance.seeds.iter().filter(|s| !seeds.contains(s)).copied().collect::<Vec<_>>());
        for h in &report.provenance.config_hashes {
            if !hashes.contains(h) {
                hashes.push(h.clone());
            }
        }
    }
    if methods.is_empty() {
        return Err(Error::Report("nothing to render".into()));
    }
    let columns = ordered_columns(layout, &domains)?;
    for m in &methods {
        if m.cells.len() != columns.len() {
            let missing: Vec<&String> = columns.iter().filter(|c| !m.cells.contains_key(*c)).collect();
            return Err(Error::Report(format!("method `{}` has no rows for {missing:?}", m.method)));
        }
    }
    if layout == Layout::MaskingTable {
        let names: Vec<&str> = methods.iter().map(|m| m.method.as_str()).collect();
        if names.len() != 2 || !names.contains(&NORMAL_ROW) || !names.contains(&MASKED_ROW) {
            return Err(Error::Report(format!("masking_table needs rows `{NORMAL_ROW}` and `{MASKED_ROW}`, found {names:?}")));
        }
        methods.sort_by_key(|m| m.method != NORMAL_ROW);
    }

    let averages: Vec<f64> =
        methods.iter().map(|m| columns.iter().map(|c| m.cells[c].accuracy).sum::<f64>() / columns.len() as f64).collect();

    let mut csv_out = csv::Writer::from_writer(Vec::new());
    csv_out.write_record(["method", "domain", "accuracy", "std", "n"])?;
    for (m, avg) in methods.iter().zip(&averages) {
        for c in &columns {
            let r = m.cells[c];
            csv_out.write_record([
                m.method.clone(),
                c.clone(),
                r.accuracy.to_string(),
                r.std.map(|s| s.to_string()).unwrap_or_default(),
                r.n.to_string(),
            ])?;
        }
        let n: usize = m.cells.values().map(|r| r.n).sum();
        csv_out.write_record([m.method.clone(), "Avg".into(), avg.to_string(), String::new(), n.to_string()])?;
    }
    let csv_bytes = csv_out.into_inner().map_err(|e| Error::Report(e.to_string()))?;

    // Best per column is judged on the printed values so ties print alike.
    let printed = |v: f64| format_one_decimal(v).parse::<f64>().unwrap_or(v);
    let mut grid: Vec<Vec<String>> = Vec::new();
    let mut header = vec![if layout == Layout::MaskingTable { "Setting".to_string() } else { "Method".to_string() }];
    header.extend(columns.iter().map(|c| column_title(c)));
    header.push("Avg".into());
    grid.push(header);
    let col_values: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| methods.iter().map(|m| printed(m.cells[c].accuracy)).collect())
        .chain(std::iter::once(averages.iter().map(|&a| printed(a)).collect()))
        .collect();
    let best: Vec<f64> = col_values.iter().map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let flag = methods.len() > 1;
    for (mi, (m, avg)) in methods.iter().zip(&averages).enumerate() {
        let mut line = vec![m.method.clone()];
        for (ci, c) in columns.iter().enumerate() {
            let r = m.cells[c];
            let mut cell = format_one_decimal(r.accuracy);
            if let Some(s) = r.std {
                cell.push_str(&format!(" ± {}", round_half_up(s, 2)));
            }
            if flag && col_values[ci][mi] == best[ci] {
                cell.push('*');
            }
            line.push(cell);
        }
        let mut cell = format_one_decimal(*avg);
        if flag && col_values[columns.len()][mi] == best[columns.len()] {
            cell.push('*');
        }
        line.push(cell);
        grid.push(line);
    }
    let widths: Vec<usize> = (0..grid[0].len()).map(|j| grid.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
    let mut text = String::new();
    for (i, row) in grid.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, c)| if j == 0 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
            .collect();
        let _ = writeln!(text, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(text, "{}", "-".repeat(total));
        }
    }
    text.push('\n');
    if flag {
        text.push_str("* best value in column\n");
    }
    if methods.iter().any(|m| m.cells.values().any(|r| r.std.is_some())) {
        let _ = writeln!(text, "± population standard deviation over seeds {seeds:?}");
    } else if !seeds.is_empty() {
        let _ = writeln!(text, "seeds {seeds:?}");
    }
    if !hashes.is_empty() {
        let short: Vec<&str> = hashes.iter().map(|h| &h[..h.len().min(12)]).collect();
        let _ = writeln!(text, "config {}", short.join(", "));
    }

    let csv_path = out.with_extension("csv");
    let text_path = out.with_extension("txt");
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&csv_path, csv_bytes).map_err(|e| Error::io(&csv_path, e))?;
    std::fs::write(&text_path, &text).map_err(|e| Error::io(&text_path, e))?;
    Ok(RenderedTable { csv_path, text_path, text })
}

#[cfg(test)]
mod tests {
    use super::super::Provenance;
    use super::*;

    fn report(method: &str, rows: &[(&str, f64, Option<f64>)]) -> EvalReport {
        EvalReport::new(
            rows.iter()
                .map(|&(d, a, s)| EvalRow { method: method.into(), domain: d.into(), accuracy: a, std: s, n: 100 })
                .collect(),
            Provenance { config_hashes: vec!["0123456789abcdef".into()], seeds: vec![0, 1] },
        )
        .unwrap()
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round_half_up(82.55, 1), "82.6");
        assert_eq!(round_half_up(82.549, 1), "82.5");
        assert_eq!(round_half_up(99.95, 1), "100.0");
        assert_eq!(round_half_up(0.245, 2), "0.25");
        assert_eq!(round_half_up(7.0, 1), "7.0");
        assert_eq!(round_half_up(-1.25, 1), "-1.3");
        assert_eq!(round_half_up(-0.04, 1), "0.0");
    }

    #[test]
    fn camera_table_layout() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("AdvBlur", &[("E", 83.3, Some(0.1)), ("D", 81.8, Some(0.32))]);
        let t = render_report(&[r], Layout::CameraTable, &dir.path().join("camera")).unwrap();
        let header = t.text.lines().next().unwrap();
        let cols: Vec<&str> = header.split("  ").map(str::trim).filter(|s| !s.is_empty()).collect();
        assert_eq!(cols, ["Method", "Camera D", "Camera E", "Avg"]);
        assert!(t.text.contains("81.8 ± 0.32"));
        assert!(t.text.lines().nth(2).unwrap().trim_end().ends_with("82.6"));
        assert!(t.text.contains("population standard deviation"));
        assert!(render_report(&[report("m", &[("D", 1.0, None)])], Layout::CameraTable, &dir.path().join("x")).is_err());
    }

    #[test]
    fn external_table_orders_columns_and_flags_best() {
        let dir = tempfile::tempdir().unwrap();
        let a = report("A", &[("aptos", 60.0, None), ("messidor1", 70.0, None), ("messidor2", 50.0, None)]);
        let b = report("B", &[("messidor2", 55.0, None), ("aptos", 58.0, None), ("messidor1", 70.0, None)]);
        let t = render_report(&[a, b], Layout::ExternalTable, &dir.path().join("ext")).unwrap();
        let header = t.text.lines().next().unwrap();
        assert!(header.find("Messidor-1").unwrap() < header.find("Messidor-2").unwrap());
        assert!(header.find("Messidor-2").unwrap() < header.find("APTOS").unwrap());
        let row_a = t.text.lines().nth(2).unwrap();
        let row_b = t.text.lines().nth(3).unwrap();
        assert!(row_a.contains("60.0*") && row_a.contains("70.0*") && !row_a.contains("50.0*"));
        assert!(row_b.contains("55.0*") && row_b.contains("70.0*"));
    }

    #[test]
    fn masking_table_rows() {
        let dir = tempfile::tempdir().unwrap();
        let masked = report(MASKED_ROW, &[("x", 50.0, None)]);
        let normal = report(NORMAL_ROW, &[("x", 70.0, None)]);
        let t = render_report(&[masked, normal], Layout::MaskingTable, &dir.path().join("mask")).unwrap();
        let labels: Vec<&str> = t.text.lines().skip(2).take(2).map(|l| l.split("  ").next().unwrap().trim()).collect();
        assert_eq!(labels, [NORMAL_ROW, MASKED_ROW]);
        let bad = report("other", &[("x", 1.0, None)]);
        assert!(render_report(&[bad], Layout::MaskingTable, &dir.path().join("m2")).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = report("m", &[("D", 81.8, Some(0.2449489742783178)), ("E", 83.3, None)]);
        let t = render_report(std::slice::from_ref(&r), Layout::CameraTable, &dir.path().join("c")).unwrap();
        let mut rd = csv::Reader::from_path(&t.csv_path).unwrap();
        assert_eq!(rd.headers().unwrap(), vec!["method", "domain", "accuracy", "std", "n"]);
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0][2].parse::<f64>().unwrap(), 81.8);
        assert_eq!(rows[0][3].parse::<f64>().unwrap(), 0.2449489742783178);
        assert_eq!(rows[2][1].to_string(), "Avg");
        assert_eq!(rows[2][2].parse::<f64>().unwrap(), r.average);
    }

    #[test]
    fn layout_parses() {
        assert_eq!("ablation_table".parse::<Layout>().unwrap(), Layout::AblationTable);
        assert!("table9".parse::<Layout>().is_err());
    }
}
