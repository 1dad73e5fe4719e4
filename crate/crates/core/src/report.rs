//! Accuracy tables: one row per architecture (CapsNet, CNN-S, CNN-L), one
//! column per polarization mode (VH, VV, VH-VV), rendered as aligned text
//! and as CSV. Built from evaluation-report JSON files.

use crate::error::{CoreError, Result};
use crate::train::EvalReport;
use std::collections::BTreeMap;
use std::path::Path;

pub const MODE_COLUMNS: [&str; 3] = ["VH", "VV", "VH-VV"];
pub const ARCHITECTURE_ROWS: [&str; 3] = ["CapsNet", "CNN-S", "CNN-L"];

/// Five decimals, the table style used throughout (e.g. `0.65091`).
pub fn format_accuracy(acc: f64) -> String {
    format!("{acc:.5}")
}

#[derive(Debug, Default, Clone)]
pub struct ReportTable {
    cells: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ReportTable {
    pub fn insert(&mut self, report: &EvalReport) {
        self.cells
            .entry(report.architecture.clone())
            .or_default()
            .insert(report.mode.clone(), report.accuracy);
    }

    pub fn get(&self, architecture: &str, mode: &str) -> Option<f64> {
        self.cells.get(architecture).and_then(|row| row.get(mode)).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Known architectures in fixed order first, anything else after,
    /// alphabetically.
    pub fn row_order(&self) -> Vec<String> {
        let mut rows: Vec<String> = ARCHITECTURE_ROWS
            .iter()
            .filter(|a| self.cells.contains_key(**a))
            .map(|a| a.to_string())
            .collect();
        for key in self.cells.keys() {
            if !ARCHITECTURE_ROWS.contains(&key.as_str()) {
                rows.push(key.clone());
            }
        }
        rows
    }

    /// Aligned text; absent cells render as `-`.
    pub fn render_text(&self) -> String {
        let rows = self.row_order();
        let arch_width = rows
            .iter()
            .map(|r| r.len())
            .chain(["Architecture".len()])
            .max()
            .unwrap_or(12);
        let cell = |r: &str, m: &str| {
            self.get(r, m).map(|a| format_accuracy(a)).unwrap_or_else(|| "-".to_string())
        };
        let mut out = format!("{:<arch_width$}", "Architecture");
        for m in MODE_COLUMNS {
            out.push_str(&format!("  {m:>8}"));
        }
        out.push('\n');
        for r in &rows {
            out.push_str(&format!("{r:<arch_width$}"));
            for m in MODE_COLUMNS {
                out.push_str(&format!("  {:>8}", cell(r, m)));
            }
            out.push('\n');
        }
        out
    }

    /// CSV with the same layout; absent cells are empty fields.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("architecture,VH,VV,VH-VV\n");
        for r in self.row_order() {
            out.push_str(&r);
            for m in MODE_COLUMNS {
                out.push(',');
                if let Some(a) = self.get(&r, m) {
                    out.push_str(&format_accuracy(a));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Parse every `*.json` file in the directory (sorted by name; later files
/// overwrite earlier duplicates of the same cell).
pub fn load_reports(dir: &Path) -> Result<Vec<EvalReport>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CoreError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        reports.push(serde_json::from_str(&text)?);
    }
    Ok(reports)
}

pub fn build_table(reports: &[EvalReport]) -> ReportTable {
    let mut table = ReportTable::default();
    for r in reports {
        table.insert(r);
    }
    table
}

/// Read evaluation JSONs from `input_dir`, write the aligned-text table to
/// `out` and the CSV beside it (same path with `.csv` appended).
pub fn write_report(input_dir: &Path, out: &Path) -> Result<ReportTable> {
    let table = build_table(&load_reports(input_dir)?);
    std::fs::write(out, table.render_text()).map_err(|e| CoreError::io(out, e))?;
    let mut csv_path = out.as_os_str().to_owned();
    csv_path.push(".csv");
    let csv_path = std::path::PathBuf::from(csv_path);
    std::fs::write(&csv_path, table.render_csv()).map_err(|e| CoreError::io(&csv_path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(architecture: &str, mode: &str, accuracy: f64) -> EvalReport {
        EvalReport {
            architecture: architecture.to_string(),
            mode: mode.to_string(),
            accuracy,
            confusion: [[0; 3]; 3],
            precision: [0.0; 3],
            recall: [0.0; 3],
            class_counts: [0; 3],
            seed: 0,
        }
    }

    #[test]
    fn accuracy_renders_with_five_decimals() {
        assert_eq!(format_accuracy(0.650912345), "0.65091");
        assert_eq!(format_accuracy(0.8), "0.80000");
        assert_eq!(format_accuracy(1.0), "1.00000");
    }

    #[test]
    fn single_row_three_modes() {
        let table = build_table(&[
            report("CapsNet", "VH", 0.65091),
            report("CapsNet", "VV", 0.71),
            report("CapsNet", "VH-VV", 0.77),
        ]);
        let text = table.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("Architecture"));
        assert!(lines[1].contains("0.65091"));
        assert!(lines[1].contains("0.71000"));
        assert!(lines[1].contains("0.77000"));
    }

    #[test]
    fn rows_follow_the_fixed_architecture_order() {
        let table = build_table(&[
            report("CNN-L", "VH", 0.5),
            report("CapsNet", "VH", 0.6),
            report("CNN-S", "VH", 0.4),
        ]);
        assert_eq!(table.row_order(), vec!["CapsNet", "CNN-S", "CNN-L"]);
        let csv = table.render_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "architecture,VH,VV,VH-VV");
        assert_eq!(lines[1], "CapsNet,0.60000,,");
        assert_eq!(lines[2], "CNN-S,0.40000,,");
        assert_eq!(lines[3], "CNN-L,0.50000,,");
    }

    #[test]
    fn missing_cells_are_empty_not_errors() {
        let table = build_table(&[report("CNN-S", "VV", 0.9)]);
        let text = table.render_text();
        let row = text.lines().nth(1).unwrap();
        assert!(row.contains('-'));
        assert!(row.contains("0.90000"));
        assert_eq!(table.get("CNN-S", "VH"), None);
    }

    #[test]
    fn files_round_trip_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (i, r) in [
            report("CapsNet", "VH", 0.61),
            report("CNN-S", "VH", 0.52),
            report("CapsNet", "VH", 0.63), // later file overwrites
        ]
        .iter()
        .enumerate()
        {
            let path = dir.path().join(format!("r{i}.json"));
            std::fs::write(&path, serde_json::to_string(r).unwrap()).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();

        let out = dir.path().join("table.txt");
        let table = write_report(dir.path(), &out).unwrap();
        assert_eq!(table.get("CapsNet", "VH"), Some(0.63));
        assert!(out.exists());
        let csv = std::fs::read_to_string(dir.path().join("table.txt.csv")).unwrap();
        assert!(csv.contains("CapsNet,0.63000,,"));
        assert!(csv.contains("CNN-S,0.52000,,"));
    }
}
