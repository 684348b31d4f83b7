//! Cohort loading and synthetic cohort generation.
//!
//! A cohort is a set of subjects, each with an ROI time series (rows are
//! timepoints, columns are ROIs), a diagnosis label and a nonnegative
//! severity target. Cohorts come from a JSON manifest plus per-subject CSV
//! files, or from the seeded synthetic generator.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    Normal,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "IMP")]
    Imp,
}

impl Diagnosis {
    pub fn is_impaired(self) -> bool {
        !matches!(self, Diagnosis::Normal)
    }

    pub fn parse(token: &str) -> Result<Diagnosis> {
        match token {
            "Normal" => Ok(Diagnosis::Normal),
            "MCI" => Ok(Diagnosis::Mci),
            "IMP" => Ok(Diagnosis::Imp),
            other => Err(Error::Label(other.to_string())),
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Diagnosis::Normal => "Normal",
            Diagnosis::Mci => "MCI",
            Diagnosis::Imp => "IMP",
        };
        f.write_str(s)
    }
}

/// One subject's ROI time series plus label and severity target.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// n_timepoints x n_rois.
    pub roi_series: DMatrix<f64>,
    pub diagnosis: Diagnosis,
    pub target: f64,
}

impl SubjectRecord {
    pub fn n_timepoints(&self) -> usize {
        self.roi_series.nrows()
    }

    pub fn n_rois(&self) -> usize {
        self.roi_series.ncols()
    }

    fn validate(&self) -> Result<()> {
        if self.n_timepoints() < 2 || self.n_rois() < 2 {
            return Err(Error::Cohort(format!(
                "subject {}: series must be at least 2x2, got {}x{}",
                self.subject_id,
                self.n_timepoints(),
                self.n_rois()
            )));
        }
        if self.roi_series.iter().any(|v| !v.is_finite()) {
            return Err(Error::Cohort(format!(
                "subject {}: non-finite value in ROI series",
                self.subject_id
            )));
        }
        if !self.target.is_finite() || self.target < 0.0 {
            return Err(Error::Cohort(format!(
                "subject {}: target must be nonnegative, got {}",
                self.subject_id, self.target
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    File(String),
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub records: Vec<SubjectRecord>,
    pub n_rois: usize,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_consistency(records: &[SubjectRecord]) -> Result<usize> {
        let mut ids = HashSet::new();
        let mut n_rois = 0;
        for r in records {
            r.validate()?;
            if !ids.insert(r.subject_id.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate subject id '{}'",
                    r.subject_id
                )));
            }
            if n_rois == 0 {
                n_rois = r.n_rois();
            } else if r.n_rois() != n_rois {
                return Err(Error::Cohort(format!(
                    "subject {} has {} ROIs, cohort has {}",
                    r.subject_id,
                    r.n_rois(),
                    n_rois
                )));
            }
        }
        Ok(n_rois)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    csv: String,
    diagnosis: String,
    target: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    subjects: Vec<ManifestSubject>,
}

fn parse_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (row_idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        // Optional header row: skip the first line if it is not fully numeric.
        if row_idx == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let mut row = Vec::with_capacity(cells.len());
        for (col_idx, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                file: file.clone(),
                row: row_idx,
                msg: format!("cell ({row_idx}, {col_idx}): cannot parse '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: file.clone(),
                    row: row_idx,
                    msg: format!("cell ({row_idx}, {col_idx}): non-finite value '{cell}'"),
                });
            }
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    file,
                    row: row_idx,
                    msg: format!("ragged row: expected {w} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    let ncols = width.ok_or_else(|| Error::Parse {
        file: file.clone(),
        row: 0,
        msg: "empty CSV".into(),
    })?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

/// Load a cohort from a JSON manifest. CSV paths are resolved relative to the
/// manifest's directory.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let diagnosis = Diagnosis::parse(&s.diagnosis)?;
        let csv_path: PathBuf = base.join(&s.csv);
        let roi_series = parse_csv(&csv_path)?;
        records.push(SubjectRecord {
            subject_id: s.id.clone(),
            roi_series,
            diagnosis,
            target: s.target,
        });
    }
    let n_rois = Cohort::check_consistency(&records)?;
    Ok(Cohort {
        records,
        n_rois,
        provenance: Provenance::File(manifest_path.display().to_string()),
    })
}

/// Write a cohort as manifest.json plus one CSV per subject. Values use
/// shortest round-trip formatting, so load(save(c)) is exact.
pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut subjects = Vec::with_capacity(cohort.len());
    for r in &cohort.records {
        let csv_name = format!("{}.csv", r.subject_id);
        let mut out = String::new();
        for i in 0..r.n_timepoints() {
            let row: Vec<String> = (0..r.n_rois())
                .map(|j| format!("{}", r.roi_series[(i, j)]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        std::fs::write(dir.join(&csv_name), out)?;
        subjects.push(ManifestSubject {
            id: r.subject_id.clone(),
            csv: csv_name,
            diagnosis: r.diagnosis.to_string(),
            target: r.target,
        });
    }
    let manifest_path = dir.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&Manifest { subjects })?,
    )?;
    Ok(manifest_path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_normal: usize,
    pub n_mci: usize,
    pub n_imp: usize,
    pub n_rois: usize,
    pub n_timepoints: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_normal: 20,
            n_mci: 2,
            n_imp: 2,
            n_rois: 8,
            n_timepoints: 120,
            seed: 0,
        }
    }
}

/// Generate a labeled synthetic cohort.
///
/// Each ROI mixes two shared latent sinusoids plus independent Gaussian
/// noise. Impaired subjects get a coupling shift at T/2 whose magnitude
/// scales with their severity target, so consecutive-window connectivity
/// genuinely changes mid-scan. Targets: Normal uniform [0, 0.5], MCI/IMP
/// uniform [1.0, 4.0]. Deterministic given the seed.
pub fn generate_synthetic_cohort(spec: &SyntheticSpec) -> Result<Cohort> {
    let total = spec.n_normal + spec.n_mci + spec.n_imp;
    if total == 0 {
        return Ok(Cohort {
            records: Vec::new(),
            n_rois: spec.n_rois,
            provenance: Provenance::Synthetic { seed: spec.seed },
        });
    }
    if spec.n_timepoints < 2 {
        return Err(Error::CohortSpec(format!(
            "n_timepoints must be >= 2, got {}",
            spec.n_timepoints
        )));
    }
    if spec.n_rois < 2 {
        return Err(Error::CohortSpec(format!(
            "n_rois must be >= 2, got {}",
            spec.n_rois
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latents = LatentBasis::draw(&mut rng);
    let mut records = Vec::with_capacity(total);
    let groups = [
        (Diagnosis::Normal, spec.n_normal),
        (Diagnosis::Mci, spec.n_mci),
        (Diagnosis::Imp, spec.n_imp),
    ];
    for (diagnosis, count) in groups {
        for k in 0..count {
            let subject_id = format!("sub-{}-{:04}", diagnosis.to_string().to_lowercase(), k);
            let target = if diagnosis.is_impaired() {
                rng.gen_range(1.0..4.0)
            } else {
                rng.gen_range(0.0..0.5)
            };
            let roi_series = synth_series(spec, &latents, diagnosis, target, &mut rng);
            records.push(SubjectRecord {
                subject_id,
                roi_series,
                diagnosis,
                target,
            });
        }
    }
    let n_rois = Cohort::check_consistency(&records)?;
    Ok(Cohort {
        records,
        n_rois,
        provenance: Provenance::Synthetic { seed: spec.seed },
    })
}

/// Latent oscillation frequencies, drawn once per cohort so that connectome
/// dynamics are comparable across subjects. Periods are shorter than a
/// typical analysis window (stable windowed Pearson estimates) and well
/// separated (beats also fit inside a window).
struct LatentBasis {
    f1: f64,
    f2: f64,
    f3: f64,
}

impl LatentBasis {
    fn draw(rng: &mut ChaCha8Rng) -> LatentBasis {
        LatentBasis {
            f1: rng.gen_range(0.06..0.09),
            f2: rng.gen_range(0.15..0.22),
            f3: rng.gen_range(0.10..0.13),
        }
    }
}

fn synth_series(
    spec: &SyntheticSpec,
    latents: &LatentBasis,
    diagnosis: Diagnosis,
    target: f64,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let t_len = spec.n_timepoints;
    let n = spec.n_rois;
    let LatentBasis { f1, f2, f3 } = *latents;
    let phase1 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase2 = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase3 = rng.gen_range(0.0..std::f64::consts::TAU);
    // Per-ROI loadings on the two latents.
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.6..1.2)).collect();
    let b: Vec<f64> = (0..n)
        .map(|j| if j % 2 == 0 { rng.gen_range(0.4..0.9) } else { rng.gen_range(-0.9..-0.4) })
        .collect();
    // Coupling shift strength, proportional to severity (max target 4.0).
    let gamma = if diagnosis.is_impaired() {
        (target / 4.0).clamp(0.25, 1.0)
    } else {
        0.0
    };
    let noise_std = 0.15;
    let mut m = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let s1 = (std::f64::consts::TAU * f1 * t as f64 + phase1).sin();
        let s2 = (std::f64::consts::TAU * f2 * t as f64 + phase2).sin();
        let s3 = (std::f64::consts::TAU * f3 * t as f64 + phase3).sin();
        let shifted = t >= t_len / 2;
        for j in 0..n {
            // After the midpoint, impaired subjects decouple the back half of
            // the ROIs from the shared latents: their drive blends toward an
            // independent third latent with weight gamma, so cross-group
            // correlation degrades monotonically with severity.
            let clean = a[j] * s1 + b[j] * s2;
            let signal = if shifted && j >= n / 2 {
                (1.0 - gamma) * clean + gamma * (a[j] + b[j].abs()) * s3
            } else {
                clean
            };
            let noise: f64 = {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            };
            m[(t, j)] = signal + noise_std * noise;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_deterministic() {
        let spec = SyntheticSpec {
            n_normal: 10,
            n_mci: 1,
            n_imp: 1,
            n_rois: 8,
            n_timepoints: 120,
            seed: 7,
        };
        let a = generate_synthetic_cohort(&spec).unwrap();
        let b = generate_synthetic_cohort(&spec).unwrap();
        assert_eq!(a.len(), 12);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.subject_id, rb.subject_id);
            assert_eq!(ra.target, rb.target);
            assert_eq!(ra.roi_series, rb.roi_series);
        }
    }

    #[test]
    fn synthetic_empty_counts() {
        let spec = SyntheticSpec {
            n_normal: 0,
            n_mci: 0,
            n_imp: 0,
            ..Default::default()
        };
        let c = generate_synthetic_cohort(&spec).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn synthetic_paper_shaped_counts() {
        let spec = SyntheticSpec {
            n_normal: 629,
            n_mci: 21,
            n_imp: 27,
            n_rois: 4,
            n_timepoints: 10,
            seed: 1,
        };
        let c = generate_synthetic_cohort(&spec).unwrap();
        let normal = c.records.iter().filter(|r| r.diagnosis == Diagnosis::Normal).count();
        let mci = c.records.iter().filter(|r| r.diagnosis == Diagnosis::Mci).count();
        let imp = c.records.iter().filter(|r| r.diagnosis == Diagnosis::Imp).count();
        assert_eq!((normal, mci, imp), (629, 21, 27));
    }

    #[test]
    fn synthetic_rejects_short_series() {
        let spec = SyntheticSpec {
            n_normal: 1,
            n_timepoints: 1,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_cohort(&spec),
            Err(Error::CohortSpec(_))
        ));
    }

    #[test]
    fn load_save_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            n_normal: 3,
            n_mci: 1,
            n_imp: 1,
            n_rois: 4,
            n_timepoints: 20,
            seed: 42,
        };
        let cohort = generate_synthetic_cohort(&spec).unwrap();
        let manifest = save_cohort(&cohort, dir.path()).unwrap();
        let loaded = load_cohort(&manifest).unwrap();
        assert_eq!(loaded.len(), cohort.len());
        for (a, b) in cohort.records.iter().zip(&loaded.records) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.diagnosis, b.diagnosis);
            assert_eq!(a.target, b.target);
            assert_eq!(a.roi_series, b.roi_series);
        }
    }

    #[test]
    fn load_small_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.csv"), "1.0,2.0\n3.0,4.0\n5.0,6.0\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[{"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.5}]}"#,
        )
        .unwrap();
        let c = load_cohort(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(c.n_rois, 2);
        assert_eq!(c.records[0].n_timepoints(), 3);
    }

    #[test]
    fn load_rejects_nan_cell() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.csv"), "1.0,2.0\nNaN,4.0\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[{"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.5}]}"#,
        )
        .unwrap();
        let err = load_cohort(&dir.path().join("manifest.json")).unwrap_err();
        match err {
            Error::Parse { row, msg, .. } => {
                assert_eq!(row, 1);
                assert!(msg.contains("(1, 0)"), "msg: {msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn load_rejects_ragged_csv() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.csv"), "1.0,2.0\n3.0\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[{"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.5}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_cohort(&dir.path().join("manifest.json")),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn load_rejects_mixed_roi_counts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.csv"), "1,2\n3,4\n").unwrap();
        std::fs::write(dir.path().join("s2.csv"), "1,2,3\n4,5,6\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[
                {"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.1},
                {"id":"s2","csv":"s2.csv","diagnosis":"MCI","target":2.0}
            ]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_cohort(&dir.path().join("manifest.json")),
            Err(Error::Cohort(_))
        ));
    }

    #[test]
    fn load_rejects_unknown_diagnosis_and_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("s1.csv"), "1,2\n3,4\n").unwrap();
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[{"id":"s1","csv":"s1.csv","diagnosis":"Dementia","target":0.1}]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_cohort(&dir.path().join("manifest.json")),
            Err(Error::Label(_))
        ));
        std::fs::write(
            dir.path().join("manifest.json"),
            r#"{"subjects":[
                {"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.1},
                {"id":"s1","csv":"s1.csv","diagnosis":"Normal","target":0.2}
            ]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_cohort(&dir.path().join("manifest.json")),
            Err(Error::Manifest(_))
        ));
    }
}
