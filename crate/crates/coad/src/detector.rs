//! Flagging the odd object in a shelf row from its feature vectors.
//!
//! Two routes are provided: quartile fences on row-summed pairwise distances,
//! and a two-cluster Ward split where a singleton minority cluster marks the
//! anomaly.

use serde::{Deserialize, Serialize};

use crate::embed::ObjectFeature;
use crate::error::{Error, Result};

/// Distance used for the pairwise matrix. Features are L2-normalized
/// upstream, so euclidean and cosine induce the same ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::config(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        })
    }
}

/// Outlier-detection route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Boxplot,
    Cluster,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boxplot" => Ok(Method::Boxplot),
            "cluster" => Ok(Method::Cluster),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Boxplot => "boxplot",
            Method::Cluster => "cluster",
        })
    }
}

/// Symmetric pairwise distance matrix with zero diagonal.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    d: Vec<Vec<f64>>,
    metric: Metric,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d.is_empty()
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i][j]
    }

    /// Row sums: the per-object aggregate distance to the rest of the row.
    pub fn row_sums(&self) -> Vec<f64> {
        self.d.iter().map(|row| row.iter().sum()).collect()
    }

    /// Construct from a raw square matrix; validates symmetry and diagonal.
    pub fn from_raw(d: Vec<Vec<f64>>, metric: Metric) -> Result<Self> {
        let n = d.len();
        for (i, row) in d.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if d[i][i] != 0.0 {
                return Err(Error::data(format!("nonzero diagonal at {i}")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::data(format!("invalid distance at ({i},{j}): {v}")));
                }
                if (v - d[j][i]).abs() > 1e-9 {
                    return Err(Error::data(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { d, metric })
    }
}

/// Detection outcome for one row, serializable as a JSON record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_id: Option<String>,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<crate::embed::FeatureSelection>,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anomaly_index: Option<usize>,
    /// Per-object aggregate distances (row sums of the pairwise matrix).
    pub scores: Vec<f64>,
    #[serde(flatten)]
    pub detail: VerdictDetail,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Threshold details per method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerdictDetail {
    Boxplot {
        q1: f64,
        q3: f64,
        iqr: f64,
        fence: f64,
    },
    Cluster {
        cluster_sizes: Vec<usize>,
    },
    Degenerate {},
}

impl AnomalyVerdict {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Full pairwise distance matrix under the configured metric.
pub fn pairwise_distances(features: &[ObjectFeature], metric: Metric) -> Result<DistanceMatrix> {
    if features.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 features, got {}",
            features.len()
        )));
    }
    let dim = features[0].vector().len();
    for (i, f) in features.iter().enumerate() {
        if f.vector().len() != dim {
            return Err(Error::shape(format!(
                "feature {i} has dimension {}, expected {dim}",
                f.vector().len()
            )));
        }
    }
    let n = features.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = match metric {
                Metric::Euclidean => euclidean(features[i].vector(), features[j].vector()),
                Metric::Cosine => cosine_distance(features[i].vector(), features[j].vector()),
            };
            d[i][j] = dist;
            d[j][i] = dist;
        }
    }
    Ok(DistanceMatrix { d, metric })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Linear-interpolation quantile of a sample (the "type 7" rule: index
/// `h = (n-1)p`, interpolate between the bracketing order statistics).
pub fn quantile_linear(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartile fence outlier detection on row-summed distances. The row whose
/// aggregate distance exceeds `Q3 + 1.5 * IQR` (and is the maximum) is
/// flagged; ties on the maximum resolve to the lowest index.
pub fn boxplot_outlier(d: &DistanceMatrix) -> AnomalyVerdict {
    let scores = d.row_sums();
    if scores.len() < 4 {
        return AnomalyVerdict {
            row_id: None,
            method: Method::Boxplot,
            selection: None,
            flagged: false,
            anomaly_index: None,
            scores,
            detail: VerdictDetail::Degenerate {},
            warning: Some("degenerate-row: need at least 4 objects for quartiles".into()),
        };
    }
    let q1 = quantile_linear(&scores, 0.25);
    let q3 = quantile_linear(&scores, 0.75);
    let iqr = q3 - q1;
    let fence = q3 + 1.5 * iqr;
    let (argmax, &max) = scores
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
        .unwrap();
    let flagged = max > fence;
    AnomalyVerdict {
        row_id: None,
        method: Method::Boxplot,
        selection: None,
        flagged,
        anomaly_index: flagged.then_some(argmax),
        scores,
        detail: VerdictDetail::Boxplot { q1, q3, iqr, fence },
        warning: None,
    }
}

/// Ward-objective two-way split of the row. A minority cluster of exactly
/// one member is flagged as the anomaly; any other split leaves the row
/// unflagged (reported via `cluster_sizes`).
///
/// Rows of up to [`EXACT_PARTITION_LIMIT`] objects are split by exhaustive
/// minimization of the within-cluster sum of squares; larger rows fall back
/// to greedy bottom-up Ward agglomeration, which can deviate from the exact
/// optimum on hard instances.
pub fn cluster_outlier(features: &[ObjectFeature]) -> Result<AnomalyVerdict> {
    let n = features.len();
    let scores = if n >= 2 {
        pairwise_distances(features, Metric::Euclidean)?.row_sums()
    } else {
        vec![0.0; n]
    };
    if n < 3 {
        return Ok(AnomalyVerdict {
            row_id: None,
            method: Method::Cluster,
            selection: None,
            flagged: false,
            anomaly_index: None,
            scores,
            detail: VerdictDetail::Degenerate {},
            warning: Some("degenerate-row: need at least 3 objects to cluster".into()),
        });
    }
    let dim = features[0].vector().len();
    for (i, f) in features.iter().enumerate() {
        if f.vector().len() != dim {
            return Err(Error::shape(format!(
                "feature {i} has dimension {}, expected {dim}",
                f.vector().len()
            )));
        }
    }
    let points: Vec<&[f64]> = features.iter().map(|f| f.vector()).collect();
    let (cluster_a, cluster_b) = ward_two_clusters(&points);
    let (small, large) = if cluster_a.len() <= cluster_b.len() {
        (cluster_a, cluster_b)
    } else {
        (cluster_b, cluster_a)
    };
    let flagged = small.len() == 1 && large.len() >= 2;
    let anomaly_index = flagged.then(|| small[0]);
    let mut sizes = vec![small.len(), large.len()];
    sizes.sort_unstable();
    Ok(AnomalyVerdict {
        row_id: None,
        method: Method::Cluster,
        selection: None,
        flagged,
        anomaly_index,
        scores,
        detail: VerdictDetail::Cluster {
            cluster_sizes: sizes,
        },
        warning: None,
    })
}

/// Largest row size split by exhaustive Ward-objective minimization.
pub const EXACT_PARTITION_LIMIT: usize = 16;

/// Two-way split minimizing the Ward objective (total within-cluster sum of
/// squared deviations from the centroid) for small rows; greedy Ward
/// agglomeration beyond [`EXACT_PARTITION_LIMIT`]. Both returned index lists
/// are ascending; the pair order is unspecified.
pub fn ward_two_clusters(points: &[&[f64]]) -> (Vec<usize>, Vec<usize>) {
    if points.len() <= EXACT_PARTITION_LIMIT {
        exact_min_sse_bipartition(points)
    } else {
        greedy_ward_bipartition(points)
    }
}

/// Exhaustive search over all 2^(n-1)-1 bipartitions. Uses the pairwise
/// identity SSE(C) = (1/|C|) * sum_{i<j in C} ||x_i - x_j||^2, so each
/// candidate costs O(|C|^2) with no dependence on the feature dimension.
fn exact_min_sse_bipartition(points: &[&[f64]]) -> (Vec<usize>, Vec<usize>) {
    let n = points.len();
    let mut sq = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            sq[i][j] = d2;
            sq[j][i] = d2;
        }
    }
    let sse = |members: &[usize]| -> f64 {
        if members.len() < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                total += sq[i][j];
            }
        }
        total / members.len() as f64
    };
    // Point 0 always sits in cluster A, halving the search space.
    let mut best = f64::INFINITY;
    let mut best_mask = 1usize;
    for mask in 0..(1usize << (n - 1)) {
        let mask = mask << 1 | 1;
        if mask.count_ones() as usize == n {
            continue;
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..n {
            if mask & (1 << i) != 0 {
                a.push(i);
            } else {
                b.push(i);
            }
        }
        let objective = sse(&a) + sse(&b);
        if objective < best {
            best = objective;
            best_mask = mask;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..n {
        if best_mask & (1 << i) != 0 {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    (a, b)
}

/// Classic bottom-up Ward agglomeration via Lance-Williams updates, stopped
/// at two clusters.
fn greedy_ward_bipartition(points: &[&[f64]]) -> (Vec<usize>, Vec<usize>) {
    let n = points.len();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = points[i]
                .iter()
                .zip(points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut alive = n;
    while alive > 2 {
        let mut best = f64::INFINITY;
        let mut pair = (0, 0);
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                if dist[i][j] < best {
                    best = dist[i][j];
                    pair = (i, j);
                }
            }
        }
        let (s, t) = pair;
        let (ns, nt) = (
            members[s].as_ref().unwrap().len() as f64,
            members[t].as_ref().unwrap().len() as f64,
        );
        // Lance-Williams update for Ward linkage.
        for v in 0..n {
            if v == s || v == t || members[v].is_none() {
                continue;
            }
            let nv = members[v].as_ref().unwrap().len() as f64;
            let total = ns + nt + nv;
            let d2 = ((nv + ns) * dist[v][s] * dist[v][s] + (nv + nt) * dist[v][t] * dist[v][t]
                - nv * dist[s][t] * dist[s][t])
                / total;
            let d = d2.max(0.0).sqrt();
            dist[v][s] = d;
            dist[s][v] = d;
        }
        let absorbed = members[t].take().unwrap();
        members[s].as_mut().unwrap().extend(absorbed);
        alive -= 1;
    }
    let mut clusters: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    for c in &mut clusters {
        c.sort_unstable();
    }
    let b = clusters.pop().unwrap();
    let a = clusters.pop().unwrap();
    (a, b)
}

/// Full row pipeline: encode crops, pool features, run the chosen detector.
/// Runs the chosen outlier route on already-extracted features.
pub fn detect_features(features: &[ObjectFeature], method: Method) -> Result<AnomalyVerdict> {
    match method {
        Method::Boxplot => {
            let d = pairwise_distances(features, Metric::Euclidean)?;
            Ok(boxplot_outlier(&d))
        }
        Method::Cluster => cluster_outlier(features),
    }
}

pub fn detect(
    crops: &[crate::object_image::ObjectImage],
    model: &crate::model::Model,
    selection: crate::embed::FeatureSelection,
    method: Method,
) -> Result<AnomalyVerdict> {
    let features = crate::embed::extract_row_features(crops, model, selection)?;
    let mut verdict = detect_features(&features, method)?;
    verdict.selection = Some(selection);
    Ok(verdict)
}
