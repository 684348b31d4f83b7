//! Sliding-window dynamic functional connectomes.

use nalgebra::DMatrix;
use serde::Serialize;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::SubjectRecord;

/// Time-ordered sequence of windowed Pearson correlation matrices.
#[derive(Debug, Clone)]
pub struct ConnectomeSequence {
    pub windows: Vec<DMatrix<f64>>,
    pub window_length: usize,
    pub window_stride: usize,
}

impl ConnectomeSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Expected window count for a series of `t` timepoints.
pub fn window_count(t: usize, w: usize, stride: usize) -> usize {
    (t - w) / stride + 1
}

/// Pearson correlation matrices over sliding windows of length `w` with
/// stride `stride`. A constant ROI within any window is an error, not a
/// silent zero.
pub fn sliding_window_connectomes(
    record: &SubjectRecord,
    w: usize,
    stride: usize,
) -> Result<ConnectomeSequence> {
    let t = record.n_timepoints();
    let n = record.n_rois();
    if w < 2 || w > t {
        return Err(Error::Connectome(format!(
            "window length {w} invalid for series of {t} timepoints"
        )));
    }
    if stride == 0 {
        return Err(Error::Connectome("stride must be >= 1".into()));
    }
    let count = window_count(t, w, stride);
    let mut windows = Vec::with_capacity(count);
    for win_idx in 0..count {
        let start = win_idx * stride;
        // Center each ROI within the window.
        let mut centered = DMatrix::zeros(w, n);
        let mut norms = vec![0.0; n];
        for j in 0..n {
            let mut mean = 0.0;
            for i in 0..w {
                mean += record.roi_series[(start + i, j)];
            }
            mean /= w as f64;
            let mut ss = 0.0;
            for i in 0..w {
                let c = record.roi_series[(start + i, j)] - mean;
                centered[(i, j)] = c;
                ss += c * c;
            }
            if ss == 0.0 {
                return Err(Error::DegenerateWindow {
                    window: win_idx,
                    roi: j,
                });
            }
            norms[j] = ss.sqrt();
        }
        let mut corr = DMatrix::zeros(n, n);
        for j in 0..n {
            corr[(j, j)] = 1.0;
            for k in (j + 1)..n {
                let mut dot = 0.0;
                for i in 0..w {
                    dot += centered[(i, j)] * centered[(i, k)];
                }
                let r = (dot / (norms[j] * norms[k])).clamp(-1.0, 1.0);
                corr[(j, k)] = r;
                corr[(k, j)] = r;
            }
        }
        windows.push(corr);
    }
    Ok(ConnectomeSequence {
        windows,
        window_length: w,
        window_stride: stride,
    })
}

#[derive(Serialize)]
struct WindowIndex {
    subject_id: String,
    window_length: usize,
    window_stride: usize,
    n_windows: usize,
    files: Vec<String>,
}

/// Optional dump: one CSV per window plus an index JSON, under a per-subject
/// directory.
pub fn dump_connectomes(seq: &ConnectomeSequence, subject_id: &str, dir: &Path) -> Result<()> {
    let sub_dir = dir.join(subject_id);
    std::fs::create_dir_all(&sub_dir)?;
    let mut files = Vec::with_capacity(seq.len());
    for (idx, w) in seq.windows.iter().enumerate() {
        let name = format!("window_{idx:04}.csv");
        let mut out = String::new();
        for i in 0..w.nrows() {
            let row: Vec<String> = (0..w.ncols()).map(|j| format!("{}", w[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(sub_dir.join(&name), out)?;
        files.push(name);
    }
    let index = WindowIndex {
        subject_id: subject_id.to_string(),
        window_length: seq.window_length,
        window_stride: seq.window_stride,
        n_windows: seq.len(),
        files,
    };
    std::fs::write(
        sub_dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Diagnosis;
    use nalgebra::DMatrix;

    fn record(rows: usize, cols: usize, data: &[f64]) -> SubjectRecord {
        SubjectRecord {
            subject_id: "t".into(),
            roi_series: DMatrix::from_row_slice(rows, cols, data),
            diagnosis: Diagnosis::Normal,
            target: 0.0,
        }
    }

    #[test]
    fn perfect_positive_correlation() {
        let r = record(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0]);
        let seq = sliding_window_connectomes(&r, 4, 1).unwrap();
        assert_eq!(seq.len(), 1);
        assert!((seq.windows[0][(0, 1)] - 1.0).abs() < 1e-12);
        assert_eq!(seq.windows[0][(0, 0)], 1.0);
    }

    #[test]
    fn perfect_negative_correlation() {
        let r = record(4, 2, &[1.0, 4.0, 2.0, 3.0, 3.0, 2.0, 4.0, 1.0]);
        let seq = sliding_window_connectomes(&r, 4, 1).unwrap();
        assert!((seq.windows[0][(0, 1)] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_count_formula() {
        let data: Vec<f64> = (0..20).map(|i| (i as f64).sin() + i as f64 * 0.1).collect();
        let mut interleaved = Vec::new();
        for i in 0..10 {
            interleaved.push(data[i]);
            interleaved.push(data[i + 10] * data[i] + 0.3);
        }
        let r = record(10, 2, &interleaved);
        let seq = sliding_window_connectomes(&r, 4, 3).unwrap();
        assert_eq!(seq.len(), 3); // starts 0, 3, 6
    }

    #[test]
    fn constant_roi_is_degenerate() {
        let r = record(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]);
        let err = sliding_window_connectomes(&r, 4, 1).unwrap_err();
        assert!(matches!(
            err,
            Error::DegenerateWindow { window: 0, roi: 1 }
        ));
    }

    #[test]
    fn shift_invariance() {
        let base: Vec<f64> = (0..30)
            .map(|i| ((i as f64) * 0.7).sin() + ((i * i) as f64 * 0.01).cos())
            .collect();
        let mut a_data = Vec::new();
        let mut b_data = Vec::new();
        for i in 0..10 {
            for j in 0..3 {
                let v = base[i * 3 + j];
                a_data.push(v);
                b_data.push(v + 100.0);
            }
        }
        let a = sliding_window_connectomes(&record(10, 3, &a_data), 5, 2).unwrap();
        let b = sliding_window_connectomes(&record(10, 3, &b_data), 5, 2).unwrap();
        for (wa, wb) in a.windows.iter().zip(&b.windows) {
            for (x, y) in wa.iter().zip(wb.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn windows_are_valid_correlation_matrices() {
        let mut data = Vec::new();
        for i in 0..40 {
            for j in 0..4 {
                data.push(((i * (j + 1)) as f64 * 0.37).sin() + (i as f64 * 0.05 * (j as f64 + 0.5)).cos());
            }
        }
        let seq = sliding_window_connectomes(&record(40, 4, &data), 10, 5).unwrap();
        for w in &seq.windows {
            for i in 0..4 {
                assert_eq!(w[(i, i)], 1.0);
                for j in 0..4 {
                    assert!((w[(i, j)] - w[(j, i)]).abs() < 1e-12);
                    assert!(w[(i, j)] >= -1.0 && w[(i, j)] <= 1.0);
                }
            }
            // PSD: smallest eigenvalue of a true correlation matrix.
            let eig = w.clone().symmetric_eigen();
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-10, "eigenvalue {ev}");
            }
        }
    }
}
