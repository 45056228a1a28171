//! Pipe-separated ingestion, one file per patient.
//!
//! The header row names the columns; "NaN" or an empty cell is an
//! unobserved entry. The label and demographic columns are configured by
//! name and removed from the time-series variables. A patient's label is
//! the maximum of its per-row label values, or comes from a sidecar file of
//! `id|label` lines.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, PatientRecord, VariableKind, VariableSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsvOptions {
    /// Per-row label column; optional when a sidecar provides labels.
    pub label_column: Option<String>,
    /// `id|label` lines keyed by file stem.
    pub sidecar_labels: Option<PathBuf>,
    pub demographic_columns: Vec<String>,
    /// Variable names declared as labs; everything else starts as a vital.
    pub lab_variables: Vec<String>,
    /// Keep at most this many of the most recent rows.
    pub t_max: usize,
}

impl Default for PsvOptions {
    fn default() -> Self {
        Self {
            label_column: Some("SepsisLabel".to_string()),
            sidecar_labels: None,
            demographic_columns: vec!["Age".to_string(), "Gender".to_string()],
            lab_variables: vec![],
            t_max: 48,
        }
    }
}

struct Layout {
    variables: Vec<VariableSpec>,
    var_cols: Vec<usize>,
    demo_cols: Vec<usize>,
    label_col: Option<usize>,
}

fn parse_cell(raw: &str, file: &str, line: usize, col: &str) -> Result<Option<f64>, DataError> {
    let raw = raw.trim();
    if raw.is_empty() || raw == "NaN" {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| DataError::Parse {
        file: file.to_string(),
        line,
        msg: format!("column {:?}: cannot parse {:?} as a number", col, raw),
    })
}

fn read_sidecar(path: &Path) -> Result<BTreeMap<String, u8>, DataError> {
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: file.clone(), source: e })?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '|');
        let id = parts.next().unwrap_or("").trim();
        let label = parts.next().unwrap_or("").trim();
        let value = match label {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(DataError::Parse {
                    file,
                    line: i + 1,
                    msg: format!("label must be 0 or 1, got {:?}", other),
                })
            }
        };
        if map.insert(id.to_string(), value).is_some() {
            return Err(DataError::Parse {
                file,
                line: i + 1,
                msg: format!("duplicate id {:?}", id),
            });
        }
    }
    Ok(map)
}

fn build_layout(headers: &[String], opts: &PsvOptions, file: &str) -> Result<Layout, DataError> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let label_col = match &opts.label_column {
        Some(name) => Some(find(name).ok_or_else(|| DataError::Parse {
            file: file.to_string(),
            line: 1,
            msg: format!("label column {:?} not in header", name),
        })?),
        None => None,
    };
    let mut demo_cols = Vec::new();
    for name in &opts.demographic_columns {
        demo_cols.push(find(name).ok_or_else(|| DataError::Parse {
            file: file.to_string(),
            line: 1,
            msg: format!("demographic column {:?} not in header", name),
        })?);
    }
    let mut variables = Vec::new();
    let mut var_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if Some(i) == label_col || demo_cols.contains(&i) {
            continue;
        }
        let kind = if opts.lab_variables.iter().any(|l| l == h) {
            VariableKind::Lab
        } else {
            VariableKind::Vital
        };
        variables.push(VariableSpec { name: h.clone(), kind });
        var_cols.push(i);
    }
    if variables.is_empty() {
        return Err(DataError::Parse {
            file: file.to_string(),
            line: 1,
            msg: "no time-series variables left after removing label and demographics".into(),
        });
    }
    Ok(Layout { variables, var_cols, demo_cols, label_col })
}

/// Ingests every `*.psv` file in `dir` (sorted by file name). All files
/// must share the same header.
pub fn ingest_psv_dir(dir: &Path, opts: &PsvOptions) -> Result<Dataset, DataError> {
    if opts.label_column.is_none() && opts.sidecar_labels.is_none() {
        return Err(DataError::Invalid(
            "need a label column or a sidecar label file".into(),
        ));
    }
    if opts.t_max == 0 {
        return Err(DataError::Invalid("t_max must be positive".into()));
    }
    let sidecar = match &opts.sidecar_labels {
        Some(p) => Some(read_sidecar(p)?),
        None => None,
    };

    let dir_str = dir.display().to_string();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io { path: dir_str.clone(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "psv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(DataError::Invalid(format!("no .psv files in {}", dir_str)));
    }

    let mut layout: Option<Layout> = None;
    let mut first_header: Vec<String> = Vec::new();
    let mut records = Vec::new();

    for path in &paths {
        let file = path.display().to_string();
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("patient")
            .to_string();
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(b'|')
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(|e| DataError::Parse { file: file.clone(), line: 1, msg: e.to_string() })?;
        let headers: Vec<String> =
            reader
                .headers()
                .map_err(|e| DataError::Parse { file: file.clone(), line: 1, msg: e.to_string() })?
                .iter()
                .map(|h| h.trim().to_string())
                .collect();
        if layout.is_none() {
            layout = Some(build_layout(&headers, opts, &file)?);
            first_header = headers.clone();
        } else if headers != first_header {
            return Err(DataError::Parse {
                file,
                line: 1,
                msg: format!("header differs from {:?}", paths[0].display().to_string()),
            });
        }
        let layout = layout.as_ref().expect("set above");
        let cols = layout.variables.len();

        let mut values: Vec<f64> = Vec::new();
        let mut mask: Vec<u8> = Vec::new();
        let mut demo: Vec<f64> = vec![f64::NAN; layout.demo_cols.len()];
        let mut label_seen = 0u8;
        let mut rows = 0usize;

        for (ri, result) in reader.records().enumerate() {
            let line = ri + 2; // header is line 1
            let row = result
                .map_err(|e| DataError::Parse { file: file.clone(), line, msg: e.to_string() })?;
            if row.len() != headers.len() {
                return Err(DataError::Parse {
                    file: file.clone(),
                    line,
                    msg: format!("expected {} cells, got {}", headers.len(), row.len()),
                });
            }
            for (&c, spec) in layout.var_cols.iter().zip(&layout.variables) {
                match parse_cell(&row[c], &file, line, &spec.name)? {
                    Some(x) => {
                        values.push(x);
                        mask.push(1);
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(0);
                    }
                }
            }
            for (di, &c) in layout.demo_cols.iter().enumerate() {
                if demo[di].is_nan() {
                    if let Some(x) = parse_cell(&row[c], &file, line, &headers[c])? {
                        demo[di] = x;
                    }
                }
            }
            if let Some(lc) = layout.label_col {
                if let Some(x) = parse_cell(&row[lc], &file, line, &headers[lc])? {
                    if x != 0.0 && x != 1.0 {
                        return Err(DataError::Parse {
                            file: file.clone(),
                            line,
                            msg: format!("label must be 0 or 1, got {}", x),
                        });
                    }
                    label_seen = label_seen.max(x as u8);
                }
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(DataError::Parse {
                file: file.clone(),
                line: 1,
                msg: "file has no data rows".into(),
            });
        }

        // Keep the most recent rows.
        if rows > opts.t_max {
            let drop = rows - opts.t_max;
            values.drain(0..drop * cols);
            mask.drain(0..drop * cols);
            rows = opts.t_max;
        }

        let label = match &sidecar {
            Some(map) => *map.get(&id).ok_or_else(|| DataError::Parse {
                file: opts
                    .sidecar_labels
                    .as_ref()
                    .expect("sidecar path present")
                    .display()
                    .to_string(),
                line: 0,
                msg: format!("no label for patient {:?}", id),
            })?,
            None => label_seen,
        };

        records.push(PatientRecord {
            id,
            rows,
            cols,
            values,
            mask,
            is_padding: vec![false; rows],
            demographics: demo,
            label,
        });
    }

    let layout = layout.expect("at least one file");
    let dataset = Dataset {
        name: dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("psv")
            .to_string(),
        variables: layout.variables,
        demographic_names: opts.demographic_columns.clone(),
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}
