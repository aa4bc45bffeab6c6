//! Labeled feature-row ingestion and cleaning.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::features::{STAT_COLUMNS, STAT_COLUMN_COUNT};

pub const UNLABELLED: &str = "unlabelled";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset unusable for training: {0}")]
    EmptyDataset(String),
}

#[derive(Debug, Clone)]
pub struct Row {
    pub features: Vec<f64>,
    pub label: usize,
    pub device: String,
    pub window_index: u64,
}

/// Labeled feature rows. All rows share the same arity; class 0.. indexes
/// into `classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<Row>,
    pub classes: Vec<String>,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Keep only the feature columns at `indices` (used after importance
    /// thresholding).
    pub fn project(&self, indices: &[usize]) -> Dataset {
        Dataset {
            feature_names: indices
                .iter()
                .map(|&i| self.feature_names[i].clone())
                .collect(),
            rows: self
                .rows
                .iter()
                .map(|r| Row {
                    features: indices.iter().map(|&i| r.features[i]).collect(),
                    label: r.label,
                    device: r.device.clone(),
                    window_index: r.window_index,
                })
                .collect(),
            classes: self.classes.clone(),
        }
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted => {
                if chars.peek() == Some(&'"') {
                    chars.next();
                    cur.push('"');
                } else {
                    quoted = false;
                }
            }
            '"' if cur.is_empty() => quoted = true,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

struct ColumnMap {
    device: usize,
    window_start: usize,
    window_end: usize,
    stats: [usize; STAT_COLUMN_COUNT],
}

impl ColumnMap {
    fn from_header(header: &[String]) -> Result<Self, DatasetError> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DatasetError::SchemaMismatch(format!("missing column `{name}`")))
        };
        let mut stats = [0usize; STAT_COLUMN_COUNT];
        for (i, name) in STAT_COLUMNS.iter().enumerate() {
            stats[i] = find(name)?;
        }
        Ok(ColumnMap {
            device: find("device")?,
            window_start: find("window_start_us")?,
            window_end: find("window_end_us")?,
            stats,
        })
    }
}

fn is_iat_column(stat_index: usize) -> bool {
    STAT_COLUMNS[stat_index].contains("iat")
}

/// Load feature CSVs, clean them, and attach labels.
///
/// Cleaning: rows with unparseable numerics are dropped; empty IAT fields are
/// imputed as the window duration (a device with fewer than two packets has
/// an effective gap at least as long as the window); other empty directional
/// fields are imputed as zero. Devices absent from the label map are labeled
/// "unlabelled".
pub fn load_and_clean(
    paths: &[impl AsRef<Path>],
    labels: &HashMap<String, String>,
) -> Result<Dataset, DatasetError> {
    let mut classes: Vec<String> = Vec::new();
    let class_index = |name: &str, classes: &mut Vec<String>| -> usize {
        match classes.iter().position(|c| c == name) {
            Some(i) => i,
            None => {
                classes.push(name.to_string());
                classes.len() - 1
            }
        }
    };
    let mut rows = Vec::new();
    let mut window_counter: HashMap<String, u64> = HashMap::new();

    for path in paths {
        let file = File::open(path.as_ref())?;
        let mut map: Option<ColumnMap> = None;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields = split_csv_line(&line);
            let Some(map) = map.as_ref() else {
                map = Some(ColumnMap::from_header(&fields)?);
                continue;
            };
            let width = map
                .stats
                .iter()
                .chain([&map.device, &map.window_start, &map.window_end])
                .max()
                .unwrap()
                + 1;
            if fields.len() < width {
                continue; // malformed row, dropped
            }
            let parse_u64 = |s: &str| s.parse::<u64>().ok();
            let (Some(start), Some(end)) = (
                parse_u64(&fields[map.window_start]),
                parse_u64(&fields[map.window_end]),
            ) else {
                continue;
            };
            let window_s = end.saturating_sub(start) as f64 / 1e6;
            let mut features = Vec::with_capacity(STAT_COLUMN_COUNT);
            let mut bad = false;
            for (i, &col) in map.stats.iter().enumerate() {
                let raw = fields[col].trim();
                if raw.is_empty() {
                    features.push(if is_iat_column(i) { window_s } else { 0.0 });
                } else {
                    match raw.parse::<f64>() {
                        Ok(v) if v.is_finite() => features.push(v),
                        _ => {
                            bad = true;
                            break;
                        }
                    }
                }
            }
            if bad {
                continue;
            }
            let device = fields[map.device].clone();
            if device.is_empty() {
                continue;
            }
            let label_name = labels
                .get(&device)
                .map(|s| s.as_str())
                .unwrap_or(UNLABELLED);
            let label = class_index(label_name, &mut classes);
            let counter = window_counter.entry(device.clone()).or_insert(0);
            let window_index = *counter;
            *counter += 1;
            rows.push(Row {
                features,
                label,
                device,
                window_index,
            });
        }
    }

    if rows.is_empty() {
        return Err(DatasetError::EmptyDataset("no usable rows".into()));
    }
    if classes.len() < 2 {
        return Err(DatasetError::EmptyDataset(format!(
            "only one class (`{}`) present; training needs at least two",
            classes[0]
        )));
    }
    Ok(Dataset {
        feature_names: STAT_COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::csv_header;
    use std::io::Write;

    fn write_csv(path: &Path, rows: &[String]) {
        let mut f = File::create(path).unwrap();
        writeln!(f, "{}", csv_header()).unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
    }

    fn sample_row(device: &str, start: u64, iat: &str) -> String {
        let mut fields = vec![
            start.to_string(),
            (start + 5_000_000).to_string(),
            device.to_string(),
            "0x1a62".to_string(),
            "3".to_string(),
            "0".to_string(),
            "3".to_string(),
        ];
        for i in 0..STAT_COLUMN_COUNT {
            fields.push(if is_iat_column(i) {
                iat.to_string()
            } else {
                "10.5".to_string()
            });
        }
        fields.push("0".to_string());
        fields.join(",")
    }

    #[test]
    fn malformed_rows_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut rows: Vec<String> = (0..99)
            .map(|i| {
                sample_row(
                    if i % 2 == 0 { "0x0001" } else { "0x0002" },
                    i * 5_000_000,
                    "1.5",
                )
            })
            .collect();
        rows.push(sample_row("0x0001", 0, "not-a-number"));
        write_csv(&path, &rows);
        let labels: HashMap<String, String> = [
            ("0x0001".to_string(), "sensor".to_string()),
            ("0x0002".to_string(), "plug".to_string()),
        ]
        .into();
        let ds = load_and_clean(&[&path], &labels).unwrap();
        assert_eq!(ds.rows.len(), 99);
    }

    #[test]
    fn all_unmapped_is_single_class_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(&path, &[sample_row("0x0001", 0, "1.0")]);
        let err = load_and_clean(&[&path], &HashMap::new()).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyDataset(_)));
    }

    #[test]
    fn empty_iat_imputed_as_window_duration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(
            &path,
            &[sample_row("0x0001", 0, ""), sample_row("0x0002", 0, "2.5")],
        );
        let labels: HashMap<String, String> = [
            ("0x0001".to_string(), "a".to_string()),
            ("0x0002".to_string(), "b".to_string()),
        ]
        .into();
        let ds = load_and_clean(&[&path], &labels).unwrap();
        let iat_col = STAT_COLUMNS
            .iter()
            .position(|c| *c == "mean_iat_all")
            .unwrap();
        let row_a = ds.rows.iter().find(|r| r.device == "0x0001").unwrap();
        assert_eq!(row_a.features[iat_col], 5.0);
    }

    #[test]
    fn window_indices_count_per_device() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_csv(
            &path,
            &[
                sample_row("0x0001", 0, "1.0"),
                sample_row("0x0002", 0, "1.0"),
                sample_row("0x0001", 5_000_000, "1.0"),
            ],
        );
        let labels: HashMap<String, String> = [
            ("0x0001".to_string(), "a".to_string()),
            ("0x0002".to_string(), "b".to_string()),
        ]
        .into();
        let ds = load_and_clean(&[&path], &labels).unwrap();
        let indices: Vec<u64> = ds
            .rows
            .iter()
            .filter(|r| r.device == "0x0001")
            .map(|r| r.window_index)
            .collect();
        assert_eq!(indices, vec![0, 1]);
    }
}
