//! Tensor-file helpers shared by the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use anchorlab::tensor_io::{read_tensor, write_tensor};
use anchorlab::{DType, Error, Tensor};

use crate::CliResult;

/// `dir/name.vanc` → `dir/name.<tag>.vanc`.
pub fn sibling_path(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.vanc"))
}

pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    Ok(read_tensor(path)?.into_matrix()?)
}

pub fn read_vector(path: &Path) -> CliResult<DVector<f64>> {
    Ok(read_tensor(path)?.into_vector()?)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>, dtype: DType) -> CliResult<()> {
    Ok(write_tensor(path, &Tensor::Matrix(m.clone()), dtype)?)
}

pub fn write_vector(path: &Path, v: &DVector<f64>, dtype: DType) -> CliResult<()> {
    Ok(write_tensor(path, &Tensor::Vector(v.clone()), dtype)?)
}

/// Labels are stored as a float vector of non-negative integer ids.
pub fn labels_to_tensor(labels: &[usize]) -> Tensor {
    Tensor::Vector(DVector::from_iterator(labels.len(), labels.iter().map(|&l| l as f64)))
}

pub fn labels_from_tensor(t: Tensor) -> anchorlab::Result<Vec<usize>> {
    let v = t.into_vector()?;
    v.iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < (1u64 << 53) as f64 {
                Ok(x as usize)
            } else {
                Err(Error::InvalidArgument(format!("label {x} is not a non-negative integer")))
            }
        })
        .collect()
}

pub fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    Ok(labels_from_tensor(read_tensor(path)?)?)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> CliResult<()> {
    // label ids are small integers, exact in either dtype
    Ok(write_tensor(path, &labels_to_tensor(labels), DType::F64)?)
}

/// One line per matrix row (or per vector entry), shortest round-trip decimals.
pub fn tensor_csv(t: &Tensor) -> String {
    let mut out = String::new();
    match t {
        Tensor::Vector(v) => {
            for x in v.iter() {
                let _ = writeln!(out, "{x}");
            }
        }
        Tensor::Matrix(m) => {
            for row in m.row_iter() {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| Error::File { path: path.to_path_buf(), source })?;
    Ok(())
}
