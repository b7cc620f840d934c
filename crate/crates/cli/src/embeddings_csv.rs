//! `embeddings.csv`: `scene_id,class_id,origin,density,dim_0..dim_{D-1}`.
//!
//! A sidecar `predictions.csv` (`row,model,predicted`) holds the class each
//! row's source model assigns to its region. Floats use Rust's shortest
//! round-trip formatting so a re-read reproduces every value exactly.

use std::fmt::Write as _;
use std::path::Path;

use dacl::cotrain::EmbeddingRecord;
use dacl::geometry::{ClassEmbedding, Origin};

use crate::{CliError, CliResult};

pub fn render(records: &[EmbeddingRecord], dim: usize) -> (String, String) {
    let mut csv = String::from("scene_id,class_id,origin,density");
    for j in 0..dim {
        write!(csv, ",dim_{j}").unwrap();
    }
    csv.push('\n');
    let mut side = String::from("row,model,predicted\n");
    for (i, r) in records.iter().enumerate() {
        let e = &r.embedding;
        let density = e.density.map(|d| d.to_string()).unwrap_or_default();
        write!(csv, "{},{},{},{}", r.scene_id, e.class_id, e.origin.as_str(), density).unwrap();
        for v in &e.vector {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
        writeln!(side, "{i},{},{}", r.model, r.predicted).unwrap();
    }
    (csv, side)
}

pub fn write(path: &Path, records: &[EmbeddingRecord], dim: usize) -> CliResult<std::path::PathBuf> {
    let (csv, side) = render(records, dim);
    std::fs::write(path, csv)?;
    let side_path = path.with_file_name("predictions.csv");
    std::fs::write(&side_path, side)?;
    Ok(side_path)
}

fn bad(line: usize, what: &str) -> CliError {
    CliError::Runtime(format!("embeddings csv line {line}: {what}"))
}

/// Parses an `embeddings.csv` back into `(scene_id, embedding)` rows.
pub fn read(text: &str) -> CliResult<Vec<(u64, ClassEmbedding)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let cols = header.split(',').count();
    if cols < 5 || !header.starts_with("scene_id,class_id,origin,density,dim_0") {
        return Err(bad(1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(bad(i + 2, "wrong column count"));
        }
        let scene: u64 = f[0].parse().map_err(|_| bad(i + 2, "scene_id"))?;
        let class: usize = f[1].parse().map_err(|_| bad(i + 2, "class_id"))?;
        let origin = match f[2] {
            "batch" => Origin::Batch,
            "bank" => Origin::Bank,
            _ => return Err(bad(i + 2, "origin")),
        };
        let density = if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad(i + 2, "density"))?) };
        let vector = f[4..].iter().map(|v| v.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad(i + 2, "value"))?;
        let mut e = ClassEmbedding::new(vector, class, origin, i as u64);
        e.density = density;
        out.push((scene, e));
    }
    Ok(out)
}

/// Predicted classes from a `predictions.csv`, in row order.
pub fn read_predictions(text: &str) -> CliResult<Vec<usize>> {
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(i, l)| {
            l.rsplit(',').next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(i + 2, "predicted"))
        })
        .collect()
}
