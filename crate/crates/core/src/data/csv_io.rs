//! CSV contract: a header row naming feature columns `x_<j>` and task
//! columns `task:<id>:classification(<C>)` or `task:<id>:regression`.

use std::path::Path;

use super::MultiTaskDataset;
use crate::error::{Error, Result};
use crate::losses::{Labels, LossKind, TaskSpec};
use crate::tensor::Tensor;

enum Column {
    Feature(usize),
    Task(usize),
}

fn parse_header(header: &csv::StringRecord) -> Result<(Vec<Column>, usize, Vec<TaskSpec>)> {
    let mut columns = Vec::with_capacity(header.len());
    let mut features = Vec::new();
    let mut tasks = Vec::new();
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        let bad = |reason: String| Error::Parse { row: 1, column: col + 1, reason };
        if let Some(j) = name.strip_prefix("x_") {
            let j: usize = j.parse().map_err(|_| bad(format!("bad feature column `{name}`")))?;
            features.push(j);
            columns.push(Column::Feature(j));
        } else if let Some(rest) = name.strip_prefix("task:") {
            let (id, kind) = rest.rsplit_once(':').ok_or_else(|| bad(format!("task column `{name}` lacks a kind")))?;
            if id.is_empty() {
                return Err(bad("empty task id".into()));
            }
            let spec = if kind == "regression" {
                TaskSpec::regression(id)
            } else if let Some(c) = kind.strip_prefix("classification(").and_then(|s| s.strip_suffix(')')) {
                let c: usize = c.parse().map_err(|_| bad(format!("bad class count in `{name}`")))?;
                if c < 2 {
                    return Err(bad(format!("`{name}` needs at least two classes")));
                }
                TaskSpec::classification(id, c)
            } else {
                return Err(bad(format!("unknown task kind `{kind}`")));
            };
            columns.push(Column::Task(tasks.len()));
            tasks.push(spec);
        } else {
            return Err(bad(format!("unrecognized column `{name}`")));
        }
    }
    let p = features.len();
    let mut sorted = features.clone();
    sorted.sort_unstable();
    if p == 0 || sorted != (0..p).collect::<Vec<_>>() {
        return Err(Error::Parse { row: 1, column: 0, reason: "feature columns must be x_0..x_{p-1}, each once".into() });
    }
    if tasks.is_empty() {
        return Err(Error::Parse { row: 1, column: 0, reason: "no task columns".into() });
    }
    Ok((columns, p, tasks))
}

pub fn load_csv(path: &Path) -> Result<MultiTaskDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].trim().is_empty()) {
        return Err(Error::Parse { row: 1, column: 0, reason: "empty file".into() });
    }
    let (columns, p, tasks) = parse_header(&header)?;

    let mut inputs = Vec::new();
    let mut raw_labels: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut classes: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let line = r + 2;
        if record.len() != columns.len() {
            return Err(Error::Parse {
                row: line,
                column: record.len().min(columns.len()) + 1,
                reason: format!("expected {} fields, found {}", columns.len(), record.len()),
            });
        }
        let mut row = vec![0.0; p];
        for (c, (field, column)) in record.iter().zip(&columns).enumerate() {
            let field = field.trim();
            let bad = |reason: String| Error::Parse { row: line, column: c + 1, reason };
            match *column {
                Column::Feature(j) => {
                    let v: f64 = field.parse().map_err(|_| bad(format!("`{field}` is not a number")))?;
                    if !v.is_finite() {
                        return Err(bad(format!("`{field}` is not finite")));
                    }
                    row[j] = v;
                }
                Column::Task(k) => match tasks[k].loss {
                    LossKind::SoftmaxCrossEntropy { num_classes } => {
                        let l: usize = field.parse().map_err(|_| bad(format!("`{field}` is not a class index")))?;
                        if l >= num_classes {
                            return Err(bad(format!("class {l} out of range for {num_classes} classes")));
                        }
                        classes[k].push(l);
                    }
                    LossKind::MeanSquaredError => {
                        let v: f64 = field.parse().map_err(|_| bad(format!("`{field}` is not a number")))?;
                        if !v.is_finite() {
                            return Err(bad(format!("`{field}` is not finite")));
                        }
                        raw_labels[k].push(v);
                    }
                },
            }
        }
        inputs.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { row: 2, column: 0, reason: "no data rows".into() });
    }
    let labels = tasks
        .iter()
        .enumerate()
        .map(|(k, t)| match t.loss {
            LossKind::SoftmaxCrossEntropy { .. } => Labels::Classes(std::mem::take(&mut classes[k])),
            LossKind::MeanSquaredError => Labels::Values(std::mem::take(&mut raw_labels[k])),
        })
        .collect();
    MultiTaskDataset::new(Tensor::new(rows, p, inputs)?, labels, tasks)
}

/// Writes the CSV contract; floats use their shortest round-trip form.
pub fn write_csv(dataset: &MultiTaskDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.input_dim()).map(|j| format!("x_{j}")).collect();
    for t in dataset.tasks() {
        header.push(match t.loss {
            LossKind::SoftmaxCrossEntropy { num_classes } => format!("task:{}:classification({num_classes})", t.id),
            LossKind::MeanSquaredError => format!("task:{}:regression", t.id),
        });
    }
    w.write_record(&header)?;
    for r in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.inputs().row_slice(r).iter().map(|v| v.to_string()).collect();
        for l in dataset.labels() {
            fields.push(match l {
                Labels::Classes(c) => c[r].to_string(),
                Labels::Values(v) => v[r].to_string(),
            });
        }
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}
