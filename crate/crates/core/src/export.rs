//! File exporters: Gram matrices (CSV + PGM heatmap), channel-wise average
//! activations, and per-run similarity loss against test error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::similarity::{activation_gram, LayerPairSet};
use crate::tensor::{Float, Tensor};
use crate::trainer::{self, FINAL_CHECKPOINT, METRICS_FILE};

/// Square matrix stored row-major in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!("{} values for a {n}×{n} matrix", values.len())));
        }
        Ok(Matrix { n, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.n.max(1)) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad matrix entry {c:?}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Format("matrix CSV is not square".into()));
        }
        Ok(Matrix {
            n,
            values: rows.concat(),
        })
    }

    /// Binary P5 graymap with values mapped linearly from `[min, max]` to
    /// `0..=255`. A constant matrix maps to all zeros.
    pub fn to_pgm(&self) -> (Vec<u8>, f64, f64) {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.values.iter().map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        (out, min, max)
    }
}

/// Mean entry inside same-label blocks and across different labels.
pub fn block_means(g: &Matrix, labels: &[usize]) -> (f64, f64) {
    let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..g.n {
        for j in 0..g.n {
            if labels[i] == labels[j] {
                within += g.at(i, j);
                nw += 1;
            } else {
                across += g.at(i, j);
                na += 1;
            }
        }
    }
    (within / nw.max(1) as f64, across / na.max(1) as f64)
}

/// Indices of batch `batch_index` taken sequentially from `data`, optionally
/// ordered by label.
pub fn batch_indices(data: &Dataset, batch_index: usize, batch_size: usize, sort_by_class: bool) -> Result<Vec<usize>> {
    let start = batch_index * batch_size;
    if batch_size == 0 || start >= data.len() {
        return Err(Error::Config(format!(
            "batch {batch_index} of size {batch_size} does not exist in {} records",
            data.len()
        )));
    }
    let idx: Vec<usize> = (start..(start + batch_size).min(data.len())).collect();
    Ok(if sort_by_class { data.class_sorted(&idx) } else { idx })
}

/// Normalized Gram of tap `layer` for the given records, plus their labels.
pub fn network_gram<T: Float>(net: &Network<T>, data: &Dataset, indices: &[usize], layer: &str) -> Result<(Matrix, Vec<usize>)> {
    let (x, y) = data.batch::<T>(indices, None)?;
    let (_, mut taps) = net.infer(&x, &[layer.to_string()])?;
    let a = taps.remove(layer).expect("requested tap");
    let g = Graph::new();
    let gram = activation_gram(&g.constant(a), layer)?.normalized.value();
    Ok((Matrix::new(indices.len(), gram.to_f64_vec())?, y.labels().to_vec()))
}

#[derive(Debug, Clone)]
pub struct GramExport {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub scale: PathBuf,
    pub min: f64,
    pub max: f64,
}

/// Write `<stem>.csv`, `<stem>.pgm` and `<stem>.scale.txt` into `dir`.
pub fn write_gram(g: &Matrix, dir: &Path, stem: &str) -> Result<GramExport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let pgm = dir.join(format!("{stem}.pgm"));
    let scale = dir.join(format!("{stem}.scale.txt"));
    fs::write(&csv, g.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let (bytes, min, max) = g.to_pgm();
    fs::write(&pgm, bytes).map_err(|e| Error::io(&pgm, e))?;
    fs::write(&scale, format!("min = {min:e}\nmax = {max:e}\n")).map_err(|e| Error::io(&scale, e))?;
    Ok(GramExport { csv, pgm, scale, min, max })
}

/// Spatial mean of every channel of a `b×c×h×w` map; one row per sample.
pub fn channel_means<T: Float>(a: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("channel means need a b×c×h×w map, got {s:?}")));
    }
    let hw = s[2] * s[3];
    Ok(a.data()
        .chunks(s[1] * hw)
        .map(|sample| {
            sample
                .chunks(hw)
                .map(|plane| plane.iter().map(|v| v.to_f64()).sum::<f64>() / hw as f64)
                .collect()
        })
        .collect())
}

/// Channel-wise average activations of tap `layer` for every record of
/// `data`, rows ordered by class.
pub fn activation_table<T: Float>(net: &Network<T>, data: &Dataset, layer: &str, batch_size: usize) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if !net.tap_ids().iter().any(|t| t == layer) {
        return Err(Error::Config(format!("network has no layer named {layer:?}")));
    }
    let order = data.class_sorted(&(0..data.len()).collect::<Vec<_>>());
    let mut rows = Vec::with_capacity(order.len());
    for chunk in order.chunks(batch_size.max(1)) {
        let (x, _) = data.batch::<T>(chunk, None)?;
        let (_, mut taps) = net.infer(&x, &[layer.to_string()])?;
        rows.extend(channel_means(&taps.remove(layer).expect("requested tap"))?);
    }
    Ok((order.iter().map(|&i| data.label(i)).collect(), rows))
}

/// `label,c0,c1,...` CSV.
pub fn activations_csv(labels: &[usize], rows: &[Vec<f64>]) -> String {
    let channels = rows.first().map_or(0, Vec::len);
    let mut s = String::from("label");
    for c in 0..channels {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(rows) {
        let _ = write!(s, "{l}");
        for v in row {
            let _ = write!(s, ",{v:e}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LspRow {
    pub run: String,
    pub lsp: f64,
    pub test_error: f64,
}

pub const LSP_HEADER: &str = "run,lsp,test_error";

pub fn lsp_csv(rows: &[LspRow]) -> String {
    let mut s = format!("{LSP_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.run, r.lsp, r.test_error);
    }
    s
}

/// Similarity loss of each run's final student against `teacher`, paired with
/// the last test error in its metrics. Unreadable runs are returned separately.
pub fn lsp_error_rows<T: Float>(
    run_dirs: &[PathBuf],
    teacher: &Network<T>,
    data: &Dataset,
    pairs: &LayerPairSet,
    n_batches: usize,
    batch_size: usize,
) -> (Vec<LspRow>, Vec<(PathBuf, Error)>) {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for dir in run_dirs {
        let row = (|| -> Result<LspRow> {
            let metrics = trainer::read_metrics(&dir.join(METRICS_FILE))?;
            let test_error = metrics
                .iter()
                .rev()
                .find_map(|r| r.test_error)
                .ok_or_else(|| Error::Format(format!("{}: no epoch rows", dir.display())))?;
            let student = crate::checkpoint::load::<T>(&dir.join(FINAL_CHECKPOINT))?;
            let lsp = trainer::measure_lsp(teacher, &student, data, pairs, n_batches, batch_size)?;
            Ok(LspRow {
                run: dir.display().to_string(),
                lsp,
                test_error,
            })
        })();
        match row {
            Ok(r) => rows.push(r),
            Err(e) => skipped.push((dir.clone(), e)),
        }
    }
    (rows, skipped)
}
