//! Consecutive-window distance metrics between connectivity matrices,
//! including persistent-homology summaries of the descending-threshold
//! graph filtration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::connectome::ConnectomeSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Chebyshev,
    Manhattan,
    Frobenius,
    Spectral,
    Nuclear,
    Wass0,
    Wass1,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Chebyshev,
        Metric::Manhattan,
        Metric::Frobenius,
        Metric::Spectral,
        Metric::Nuclear,
        Metric::Wass0,
        Metric::Wass1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Chebyshev => "chebyshev",
            Metric::Manhattan => "manhattan",
            Metric::Frobenius => "frobenius",
            Metric::Spectral => "spectral",
            Metric::Nuclear => "nuclear",
            Metric::Wass0 => "wass0",
            Metric::Wass1 => "wass1",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Distance(format!("unknown metric '{s}'")))
    }
}

fn check_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Distance(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn manhattan_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum())
}

pub fn chebyshev_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

fn sorted_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = a.clone().symmetric_eigen();
    let mut evs: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    if evs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Distance("eigensolver produced non-finite values".into()));
    }
    evs.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(evs)
}

/// Euclidean distance between descending-sorted eigenvalue vectors.
pub fn spectral_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let ea = sorted_eigenvalues(a)?;
    let eb = sorted_eigenvalues(b)?;
    Ok(ea
        .iter()
        .zip(&eb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Sum of singular values of A - B. For a symmetric difference this is the
/// sum of absolute eigenvalues.
pub fn nuclear_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    check_same_shape(a, b)?;
    let diff = a - b;
    let svd = diff.svd(false, false);
    if svd.singular_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Distance("SVD produced non-finite values".into()));
    }
    Ok(svd.singular_values.iter().sum())
}

/// Birth set of connected components and death set of cycles for the
/// descending-threshold filtration of a complete weighted graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceSummary {
    /// Descending-sorted maximum-spanning-tree edge weights, size n-1.
    pub births: Vec<f64>,
    /// Descending-sorted non-MST edge weights, size n(n-1)/2 - (n-1).
    pub deaths: Vec<f64>,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            self.parent[x] = self.find(self.parent[x]);
        }
        self.parent[x]
    }

    fn union(&mut self, x: usize, y: usize) -> bool {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx == ry {
            return false;
        }
        if self.rank[rx] < self.rank[ry] {
            self.parent[rx] = ry;
        } else {
            self.parent[ry] = rx;
            if self.rank[rx] == self.rank[ry] {
                self.rank[rx] += 1;
            }
        }
        true
    }
}

/// Kruskal on descending edge weights: MST edges are component births,
/// everything else is a cycle death. Ties broken by (i, j) index; the
/// resulting weight multisets are tie-invariant.
pub fn persistence_summary(c: &DMatrix<f64>) -> Result<PersistenceSummary> {
    let n = c.nrows();
    if n < 2 || c.ncols() != n {
        return Err(Error::Distance(format!(
            "persistence_summary needs a square matrix with n >= 2, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            edges.push((c[(i, j)], i, j));
        }
    }
    edges.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut uf = UnionFind::new(n);
    let mut births = Vec::with_capacity(n - 1);
    let mut deaths = Vec::with_capacity(edges.len() - (n - 1));
    for (w, i, j) in edges {
        if uf.union(i, j) {
            births.push(w);
        } else {
            deaths.push(w);
        }
    }
    Ok(PersistenceSummary { births, deaths })
}

/// Sorted-order p-Wasserstein distance between matched persistence sets:
/// births for homology 0, deaths for homology 1.
pub fn wasserstein_distance(
    p_sum: &PersistenceSummary,
    q_sum: &PersistenceSummary,
    homology: u8,
    p: f64,
) -> Result<f64> {
    let (xs, ys) = match homology {
        0 => (&p_sum.births, &q_sum.births),
        1 => (&p_sum.deaths, &q_sum.deaths),
        other => {
            return Err(Error::Distance(format!(
                "homology dimension must be 0 or 1, got {other}"
            )))
        }
    };
    if xs.len() != ys.len() {
        return Err(Error::IncompatibleSummary(xs.len(), ys.len()));
    }
    if p < 1.0 {
        return Err(Error::Distance(format!("Wasserstein order p must be >= 1, got {p}")));
    }
    // Both sets are already sorted descending; sorted order is the optimal
    // matching.
    let sum: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum();
    Ok(sum.powf(1.0 / p))
}

/// Multivariate series of consecutive-window distances, d metrics by T steps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceSeries {
    pub metric_names: Vec<String>,
    /// Row f is metric f over T = windows - 1 consecutive pairs.
    pub values: Vec<Vec<f64>>,
}

impl DistanceSeries {
    pub fn n_features(&self) -> usize {
        self.values.len()
    }

    pub fn n_steps(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Serialized form: {"metrics": [...], "T": int, "X": [[...]]}.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "metrics": self.metric_names,
            "T": self.n_steps(),
            "X": self.values,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<DistanceSeries> {
        let metric_names: Vec<String> = serde_json::from_value(
            v.get("metrics")
                .cloned()
                .ok_or_else(|| Error::Distance("missing 'metrics' field".into()))?,
        )?;
        let values: Vec<Vec<f64>> = serde_json::from_value(
            v.get("X")
                .cloned()
                .ok_or_else(|| Error::Distance("missing 'X' field".into()))?,
        )?;
        Ok(DistanceSeries {
            metric_names,
            values,
        })
    }

    /// Truncate every row to the first `t` steps.
    pub fn truncate(&mut self, t: usize) {
        for row in &mut self.values {
            row.truncate(t);
        }
    }
}

pub fn evaluate_metric(
    metric: Metric,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    wasserstein_p: f64,
) -> Result<f64> {
    match metric {
        Metric::Chebyshev => chebyshev_distance(a, b),
        Metric::Manhattan => manhattan_distance(a, b),
        Metric::Frobenius => frobenius_distance(a, b),
        Metric::Spectral => spectral_distance(a, b),
        Metric::Nuclear => nuclear_distance(a, b),
        Metric::Wass0 => {
            let (pa, pb) = (persistence_summary(a)?, persistence_summary(b)?);
            wasserstein_distance(&pa, &pb, 0, wasserstein_p)
        }
        Metric::Wass1 => {
            let (pa, pb) = (persistence_summary(a)?, persistence_summary(b)?);
            wasserstein_distance(&pa, &pb, 1, wasserstein_p)
        }
    }
}

/// X[f][t] = metric_f(window_t, window_{t+1}).
pub fn distance_series(
    seq: &ConnectomeSequence,
    metrics: &[Metric],
    wasserstein_p: f64,
) -> Result<DistanceSeries> {
    if metrics.is_empty() {
        return Err(Error::Distance("empty metric list".into()));
    }
    if seq.len() < 2 {
        return Err(Error::Distance(format!(
            "need at least 2 windows, got {}",
            seq.len()
        )));
    }
    let t_steps = seq.len() - 1;
    // Persistence summaries are shared by wass0/wass1; compute once per
    // window when either is requested.
    let needs_persistence = metrics
        .iter()
        .any(|m| matches!(m, Metric::Wass0 | Metric::Wass1));
    let summaries: Vec<PersistenceSummary> = if needs_persistence {
        seq.windows
            .iter()
            .map(persistence_summary)
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut values = vec![Vec::with_capacity(t_steps); metrics.len()];
    for t in 0..t_steps {
        let (a, b) = (&seq.windows[t], &seq.windows[t + 1]);
        for (f, metric) in metrics.iter().enumerate() {
            let v = match metric {
                Metric::Wass0 => {
                    wasserstein_distance(&summaries[t], &summaries[t + 1], 0, wasserstein_p)?
                }
                Metric::Wass1 => {
                    wasserstein_distance(&summaries[t], &summaries[t + 1], 1, wasserstein_p)?
                }
                other => evaluate_metric(*other, a, b, wasserstein_p)?,
            };
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Distance(format!(
                    "metric {} produced invalid value {v} at step {t}",
                    metric.name()
                )));
            }
            values[f].push(v);
        }
    }
    Ok(DistanceSeries {
        metric_names: metrics.iter().map(|m| m.name().to_string()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = rng.gen_range(-1.0..1.0);
            for j in (i + 1)..n {
                let v = rng.gen_range(-1.0..1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    #[test]
    fn frobenius_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(frobenius_distance(&a, &a).unwrap(), 0.0);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 5.0, 1.0]);
        assert!((frobenius_distance(&a, &b).unwrap() - 18f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn manhattan_chebyshev_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(manhattan_distance(&a, &b).unwrap(), 4.0);
        let mut c = a.clone();
        c[(1, 0)] = -7.0;
        assert_eq!(chebyshev_distance(&a, &c).unwrap(), 7.0);
    }

    #[test]
    fn elementwise_metrics_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = sym(5, &mut rng);
            let b = sym(5, &mut rng);
            let mut fro = 0.0;
            let mut man = 0.0;
            let mut che = 0.0f64;
            for i in 0..5 {
                for j in 0..5 {
                    let d = a[(i, j)] - b[(i, j)];
                    fro += d * d;
                    man += d.abs();
                    che = che.max(d.abs());
                }
            }
            assert!((frobenius_distance(&a, &b).unwrap() - fro.sqrt()).abs() < 1e-12);
            assert!((manhattan_distance(&a, &b).unwrap() - man).abs() < 1e-12);
            assert!((chebyshev_distance(&a, &b).unwrap() - che).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_diagonal_case() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((spectral_distance(&a, &b).unwrap() - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_orthogonal_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = sym(4, &mut rng);
        // Orthogonalize a random matrix by QR.
        let m = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let qr = m.qr();
        let q = qr.q();
        let rotated = &q * &a * q.transpose();
        assert!(spectral_distance(&a, &rotated).unwrap() < 1e-8);
    }

    #[test]
    fn nuclear_diagonal_case() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let z = DMatrix::zeros(2, 2);
        assert!((nuclear_distance(&a, &z).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn nuclear_matches_eigen_absolute_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = sym(5, &mut rng);
            let b = sym(5, &mut rng);
            let diff = &a - &b;
            let expected: f64 = diff
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .map(|v| v.abs())
                .sum();
            assert!((nuclear_distance(&a, &b).unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn persistence_triangle() {
        let c = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.9, 0.5, 0.9, 1.0, 0.2, 0.5, 0.2, 1.0],
        );
        let s = persistence_summary(&c).unwrap();
        assert_eq!(s.births, vec![0.9, 0.5]);
        assert_eq!(s.deaths, vec![0.2]);
    }

    #[test]
    fn persistence_two_nodes() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]);
        let s = persistence_summary(&c).unwrap();
        assert_eq!(s.births, vec![0.4]);
        assert!(s.deaths.is_empty());
    }

    #[test]
    fn persistence_rejects_tiny_matrix() {
        let c = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(persistence_summary(&c).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let p = PersistenceSummary {
            births: vec![0.9, 0.5],
            deaths: vec![0.2],
        };
        let q = PersistenceSummary {
            births: vec![0.8, 0.4],
            deaths: vec![0.1],
        };
        assert_eq!(wasserstein_distance(&p, &p, 0, 2.0).unwrap(), 0.0);
        assert!((wasserstein_distance(&p, &q, 0, 2.0).unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((wasserstein_distance(&p, &q, 1, 2.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_size_mismatch() {
        let p = PersistenceSummary {
            births: vec![0.9, 0.5],
            deaths: vec![],
        };
        let q = PersistenceSummary {
            births: vec![0.8],
            deaths: vec![],
        };
        assert!(matches!(
            wasserstein_distance(&p, &q, 0, 2.0),
            Err(Error::IncompatibleSummary(2, 1))
        ));
    }

    #[test]
    fn series_shape_and_zero_column() {
        use crate::connectome::ConnectomeSequence;
        let w = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.7, 0.2, 0.7, 1.0]);
        let seq = ConnectomeSequence {
            windows: vec![w.clone(), w.clone(), w],
            window_length: 4,
            window_stride: 2,
        };
        let x = distance_series(&seq, &[Metric::Frobenius, Metric::Wass0], 2.0).unwrap();
        assert_eq!(x.n_features(), 2);
        assert_eq!(x.n_steps(), 2);
        for row in &x.values {
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn empty_metric_list_is_an_error() {
        let w = DMatrix::identity(3, 3);
        let seq = ConnectomeSequence {
            windows: vec![w.clone(), w],
            window_length: 2,
            window_stride: 1,
        };
        assert!(distance_series(&seq, &[], 2.0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let x = DistanceSeries {
            metric_names: vec!["frobenius".into(), "wass1".into()],
            values: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
        };
        let v = x.to_json();
        assert_eq!(v["T"], 2);
        let back = DistanceSeries::from_json(&v).unwrap();
        assert_eq!(back.metric_names, x.metric_names);
        assert_eq!(back.values, x.values);
    }
}
