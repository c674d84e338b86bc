//! On-disk formats.
//!
//! A dataset directory holds
//!
//! ```text
//! header.json    {"format", "n", "p", "model", "seed", "has_truth"}
//! design.bin     n x p, row-major, little-endian f64
//! response.bin   n, little-endian f64
//! truth.json     {"l", "eta", "noise_sd"}          (synthetic data only)
//! signal.bin     p x L, row-major, little-endian f64
//! noise.bin      n, little-endian f64
//! ```
//!
//! State-evolution trajectories and other records are plain JSON.

use crate::error::{invalid, Result};
use crate::model::{eta_to_psi, ChangePointVector, Dataset, ModelKind, SignalMatrix, Truth};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const DATASET_FORMAT: &str = "cpamp-dataset-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub n: usize,
    pub p: usize,
    pub model: ModelKind,
    pub seed: u64,
    pub has_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthHeader {
    pub l: usize,
    pub eta: Vec<usize>,
    pub noise_sd: Option<f64>,
}

pub fn write_f64s(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return invalid(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), expected * 8));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_f64s(path, (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])))
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_row_slice(rows, cols, &read_f64s(path, rows * cols)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes a dataset directory (created if missing).
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        n: dataset.n(),
        p: dataset.p(),
        model: dataset.model,
        seed: dataset.seed,
        has_truth: dataset.truth.is_some(),
    };
    write_json(&dir.join("header.json"), &header)?;
    write_matrix(&dir.join("design.bin"), &dataset.design)?;
    write_f64s(&dir.join("response.bin"), dataset.response.iter().cloned())?;
    if let Some(truth) = &dataset.truth {
        let th = TruthHeader { l: truth.signal.l(), eta: truth.eta.eta.clone(), noise_sd: dataset.model.noise_sd() };
        write_json(&dir.join("truth.json"), &th)?;
        write_matrix(&dir.join("signal.bin"), &truth.signal.entries)?;
        write_f64s(&dir.join("noise.bin"), truth.noise.iter().cloned())?;
    }
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = read_json(&dir.join("header.json"))?;
    if header.format != DATASET_FORMAT {
        return invalid(format!("unknown dataset format {:?}", header.format));
    }
    header.model.validate()?;
    let design = read_matrix(&dir.join("design.bin"), header.n, header.p)?;
    let response = read_f64s(&dir.join("response.bin"), header.n)?;
    let truth = if header.has_truth {
        let th: TruthHeader = read_json(&dir.join("truth.json"))?;
        let signal = SignalMatrix::new(read_matrix(&dir.join("signal.bin"), header.p, th.l)?)?;
        let eta = ChangePointVector::new(th.eta, header.n)?;
        let config = eta_to_psi(&eta, header.n, th.l)?;
        let noise = read_f64s(&dir.join("noise.bin"), header.n)?;
        Some(Truth { signal, config, eta, noise })
    } else {
        None
    };
    let dataset = Dataset { design, response, model: header.model, seed: header.seed, truth };
    dataset.validate()?;
    Ok(dataset)
}
