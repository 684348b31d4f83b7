//! Binary matrix files: little-endian f64 payload with an 8-byte-per-dim
//! header (rows, cols). Used for vocabulary embeddings, backbone weights and
//! checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_matrix(w: &mut impl Write, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if rows * cols != data.len() {
        return Err(Error::Contract(format!(
            "write_matrix: {rows}x{cols} header does not match {} values",
            data.len()
        )));
    }
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(cols as u64).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>)> {
    let mut dim = [0u8; 8];
    r.read_exact(&mut dim)?;
    let rows = u64::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let cols = u64::from_le_bytes(dim) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Ok((rows, cols, data))
}

pub fn write_matrix_file(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix(&mut f, rows, cols, data)?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix_file(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_matrix(&mut f)
}
