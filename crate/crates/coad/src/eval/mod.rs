//! Evaluation harness: manifest-driven dataset indexing, seeded evaluation
//! sets, a detector grid, and success-rate reporting.
//!
//! Real datasets are ingested through manifests (JSON-lines or CSV), keeping
//! the harness independent of any dataset's on-disk layout. A trial plants
//! one off-class object among `n_majority` same-class objects; a detector is
//! correct when the flagged index equals the planted position. Reports cover
//! the full requested model × feature-selection × method grid.

pub mod baseline;
pub mod crop;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{
    detect_features, pairwise_distances, quantile_linear, AnomalyVerdict, Method, Metric,
    VerdictDetail,
};
use crate::embed::{extract_row_features, FeatureSelection, ObjectFeature};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::object_image::ObjectImage;

pub use baseline::{write_synthetic_backbone, PretrainedBackbone};
pub use crop::{crop_row, BoundingBox};
pub use synthetic::{generate as generate_synthetic, SyntheticConfig};

/// One manifest line: an object image and its labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Image path, absolute or relative to the manifest's directory.
    pub path: String,
    /// Class label used for set construction and scoring.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shelf_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_id: Option<String>,
    /// Optional crop applied when the image is loaded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

/// In-memory dataset index built from a manifest.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    root: PathBuf,
    records: Vec<ManifestRecord>,
    by_id: BTreeMap<String, usize>,
    by_class: BTreeMap<String, Vec<usize>>,
}

impl DatasetIndex {
    /// Loads a manifest, dispatching on extension: `.csv` is parsed as CSV
    /// with an `id,path,label[,shelf_id,row_id,bbox]` header, anything else
    /// as JSON-lines. Image paths resolve relative to the manifest.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let records = match manifest.extension().and_then(|e| e.to_str()) {
            Some("csv") => read_csv_manifest(manifest)?,
            _ => read_jsonl_manifest(manifest)?,
        };
        let root = manifest.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Self::from_records(root, records)
    }

    /// Builds an index from already-parsed records; validates id uniqueness.
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("manifest contains no records"));
        }
        let mut by_id = BTreeMap::new();
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.id.is_empty() || r.path.is_empty() || r.label.is_empty() {
                return Err(Error::data(format!(
                    "manifest record {i}: id, path, and label must be non-empty"
                )));
            }
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate object id '{}'", r.id)));
            }
            by_class.entry(r.label.clone()).or_default().push(i);
        }
        Ok(Self { root: root.into(), records, by_id, by_class })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Class labels in sorted order.
    pub fn classes(&self) -> Vec<&str> {
        self.by_class.keys().map(String::as_str).collect()
    }

    /// Record indices belonging to a class (empty if the class is unknown).
    pub fn class_members(&self, label: &str) -> &[usize] {
        self.by_class.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn record(&self, id: &str) -> Option<&ManifestRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Loads (and, when the record carries a bbox, crops) one object image.
    pub fn load_image(&self, id: &str) -> Result<ObjectImage> {
        let record = self
            .record(id)
            .ok_or_else(|| Error::data(format!("unknown object id '{id}'")))?;
        let path = self.root.join(&record.path);
        let image = ObjectImage::from_path(&path)
            .map_err(|e| Error::data(format!("object '{id}' ({}): {e}", path.display())))?;
        match &record.bbox {
            Some(b) => b
                .crop_from(&image)
                .map_err(|e| Error::data(format!("object '{id}' bbox: {e}"))),
            None => Ok(image),
        }
    }

    /// Writes records as JSON-lines (the canonical manifest form).
    pub fn write_jsonl(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn read_jsonl_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    Ok(records)
}

fn read_csv_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .clone();
    let known = ["id", "path", "label", "shelf_id", "row_id", "bbox"];
    for h in headers.iter() {
        if !known.contains(&h) {
            return Err(Error::data(format!(
                "{}: unknown manifest column '{h}'",
                path.display()
            )));
        }
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_c, path_c, label_c) = match (col("id"), col("path"), col("label")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => {
            return Err(Error::data(format!(
                "{}: CSV manifest needs id, path, and label columns",
                path.display()
            )))
        }
    };
    let opt = |record: &csv::StringRecord, c: Option<usize>| {
        c.and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .map(str::to_owned)
    };
    let mut records = Vec::new();
    for (lineno, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let field = |c: usize| row.get(c).unwrap_or("").to_owned();
        let bbox = match opt(&row, col("bbox")) {
            Some(s) => Some(parse_bbox_field(&s).map_err(|e| {
                Error::data(format!("{}:{}: {e}", path.display(), lineno + 2))
            })?),
            None => None,
        };
        records.push(ManifestRecord {
            id: field(id_c),
            path: field(path_c),
            label: field(label_c),
            shelf_id: opt(&row, col("shelf_id")),
            row_id: opt(&row, col("row_id")),
            bbox,
        });
    }
    Ok(records)
}

/// Parses `"x y w h"` (separators: spaces, commas, or semicolons; optional
/// surrounding brackets) into a bounding box.
fn parse_bbox_field(s: &str) -> Result<BoundingBox> {
    let vals: Vec<f64> = s
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::data(format!("bad bbox component '{t}'")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != 4 {
        return Err(Error::data(format!(
            "bbox '{s}' must have 4 components, found {}",
            vals.len()
        )));
    }
    Ok(BoundingBox::from([vals[0], vals[1], vals[2], vals[3]]))
}

/// One trial: `n_majority` objects of one class plus a planted off-class
/// object at a known position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSet {
    pub set_id: String,
    /// Ordered member ids; index `anomaly_position` is the planted object.
    pub object_ids: Vec<String>,
    pub majority_class: String,
    pub anomaly_class: String,
    pub anomaly_position: usize,
    /// Seed of the batch this set was built in (recorded for audit).
    pub seed: u64,
}

impl EvaluationSet {
    pub fn len(&self) -> usize {
        self.object_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_ids.is_empty()
    }

    /// Asserts the set invariants against an index: size ≥ 4, distinct
    /// classes, planted position in range, every member's label as declared.
    pub fn validate(&self, index: &DatasetIndex) -> Result<()> {
        if self.len() < 4 {
            return Err(Error::data(format!(
                "evaluation set {} has {} members; need at least 4",
                self.set_id,
                self.len()
            )));
        }
        if self.majority_class == self.anomaly_class {
            return Err(Error::data(format!(
                "evaluation set {}: majority and anomaly class are both '{}'",
                self.set_id, self.majority_class
            )));
        }
        if self.anomaly_position >= self.len() {
            return Err(Error::data(format!(
                "evaluation set {}: anomaly position {} out of range 0..{}",
                self.set_id,
                self.anomaly_position,
                self.len()
            )));
        }
        for (i, id) in self.object_ids.iter().enumerate() {
            let record = index
                .record(id)
                .ok_or_else(|| Error::data(format!("set {}: unknown id '{id}'", self.set_id)))?;
            let expect = if i == self.anomaly_position {
                &self.anomaly_class
            } else {
                &self.majority_class
            };
            if record.label != *expect {
                return Err(Error::data(format!(
                    "set {}: member {i} ('{id}') has label '{}', expected '{expect}'",
                    self.set_id, record.label
                )));
            }
        }
        Ok(())
    }
}

/// Knobs for [`build_eval_sets_with`]. `class_pairs`, when set, restricts
/// each set's (majority, anomaly) classes to one of the listed pairs —
/// used e.g. to build color-dominated trials where the pair shares a shape.
#[derive(Debug, Clone)]
pub struct EvalSetOptions {
    pub count: usize,
    pub n_majority: usize,
    pub seed: u64,
    pub class_pairs: Option<Vec<(String, String)>>,
}

impl Default for EvalSetOptions {
    fn default() -> Self {
        Self { count: 72, n_majority: 9, seed: 0, class_pairs: None }
    }
}

const SET_BUILD_RETRIES: usize = 100;

/// Builds `count` seeded evaluation sets: majority class uniform over the
/// index's classes, anomaly class uniform over the remaining classes,
/// members sampled without replacement within a set (with replacement
/// across sets), anomaly position uniform. Classes too small for the
/// requested role are resampled with bounded retries.
pub fn build_eval_sets(
    index: &DatasetIndex,
    count: usize,
    n_majority: usize,
    seed: u64,
) -> Result<Vec<EvaluationSet>> {
    build_eval_sets_with(
        index,
        &EvalSetOptions { count, n_majority, seed, class_pairs: None },
    )
}

/// [`build_eval_sets`] with full options.
pub fn build_eval_sets_with(
    index: &DatasetIndex,
    opts: &EvalSetOptions,
) -> Result<Vec<EvaluationSet>> {
    if opts.n_majority < 3 {
        return Err(Error::config(
            "n_majority must be at least 3 (sets must have at least 4 members)",
        ));
    }
    let classes: Vec<String> = index.classes().iter().map(|s| s.to_string()).collect();
    if classes.len() < 2 {
        return Err(Error::data(format!(
            "need at least 2 classes to plant anomalies, found {}",
            classes.len()
        )));
    }
    if !classes
        .iter()
        .any(|c| index.class_members(c).len() >= opts.n_majority)
    {
        return Err(Error::data(format!(
            "no class has the {} images required for a majority group",
            opts.n_majority
        )));
    }
    if let Some(pairs) = &opts.class_pairs {
        if pairs.is_empty() {
            return Err(Error::config("class_pairs, when given, must be non-empty"));
        }
        for (a, b) in pairs {
            if a == b {
                return Err(Error::config(format!(
                    "class pair ('{a}', '{b}') must name two distinct classes"
                )));
            }
            for c in [a, b] {
                if index.class_members(c).is_empty() {
                    return Err(Error::data(format!("class pair names unknown class '{c}'")));
                }
            }
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut sets = Vec::with_capacity(opts.count);
    for k in 0..opts.count {
        let mut built = None;
        for _ in 0..SET_BUILD_RETRIES {
            let (majority, anomaly) = match &opts.class_pairs {
                Some(pairs) => pairs[rng.gen_range(0..pairs.len())].clone(),
                None => {
                    let m = rng.gen_range(0..classes.len());
                    // Uniform over the other classes: draw from len-1 slots
                    // and skip past the majority slot.
                    let mut a = rng.gen_range(0..classes.len() - 1);
                    if a >= m {
                        a += 1;
                    }
                    (classes[m].clone(), classes[a].clone())
                }
            };
            let members = index.class_members(&majority);
            let anomalies = index.class_members(&anomaly);
            if members.len() < opts.n_majority || anomalies.is_empty() {
                continue;
            }
            // Partial Fisher–Yates: first n_majority entries are a uniform
            // sample without replacement.
            let mut pool: Vec<usize> = members.to_vec();
            for i in 0..opts.n_majority {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
            }
            let anomaly_record = anomalies[rng.gen_range(0..anomalies.len())];
            let position = rng.gen_range(0..=opts.n_majority);
            let mut object_ids: Vec<String> = pool[..opts.n_majority]
                .iter()
                .map(|&i| index.records()[i].id.clone())
                .collect();
            object_ids.insert(position, index.records()[anomaly_record].id.clone());
            built = Some(EvaluationSet {
                set_id: format!("set-{k:04}"),
                object_ids,
                majority_class: majority,
                anomaly_class: anomaly,
                anomaly_position: position,
                seed: opts.seed,
            });
            break;
        }
        let set = built.ok_or_else(|| {
            Error::data(format!(
                "could not build evaluation set {k} after {SET_BUILD_RETRIES} retries \
                 (classes too small for n_majority={}?)",
                opts.n_majority
            ))
        })?;
        set.validate(index)?;
        sets.push(set);
    }
    Ok(sets)
}

/// Grid coordinates of one detector configuration.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub model: String,
    pub selection: String,
    pub method: String,
}

impl CellKey {
    pub fn new(
        model: impl Into<String>,
        selection: impl Into<String>,
        method: impl Into<String>,
    ) -> Self {
        Self { model: model.into(), selection: selection.into(), method: method.into() }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.model, self.selection, self.method)
    }
}

/// Anything that can flag the odd object in an ordered row of crops.
///
/// `detect_in_set` exists so reference detectors (the oracle) can consult
/// the planted position; real detectors only see pixels.
pub trait RowDetector {
    fn key(&self) -> CellKey;

    fn detect_row(&self, crops: &[ObjectImage]) -> Result<AnomalyVerdict>;

    fn detect_in_set(&self, set: &EvaluationSet, crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        let _ = set;
        self.detect_row(crops)
    }
}

/// A trained Co-AD model + feature selection + outlier method.
pub struct ModelDetector {
    model: Model,
    selection: FeatureSelection,
    method: Method,
    name: String,
}

impl ModelDetector {
    pub fn new(model: Model, selection: FeatureSelection, method: Method) -> Result<Self> {
        // Surface invalid variant/selection combinations at construction
        // rather than deep inside the evaluation loop.
        selection.kinds_for(model.variant())?;
        let name = model.variant().to_string();
        Ok(Self { model, selection, method, name })
    }

    /// Overrides the model column label (e.g. to distinguish checkpoints).
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl RowDetector for ModelDetector {
    fn key(&self) -> CellKey {
        CellKey::new(&self.name, self.selection.to_string(), self.method.to_string())
    }

    fn detect_row(&self, crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        let size = self.model.config().input_size;
        let resized: Vec<ObjectImage> = crops
            .iter()
            .enumerate()
            .map(|(i, c)| c.resize(size).map_err(|e| e.at_crop(i)))
            .collect::<Result<_>>()?;
        crate::detector::detect(&resized, &self.model, self.selection, self.method)
    }
}

/// Generic pretrained-backbone features + outlier method.
pub struct BaselineDetector {
    backbone: PretrainedBackbone,
    method: Method,
}

impl BaselineDetector {
    pub fn new(backbone: PretrainedBackbone, method: Method) -> Self {
        Self { backbone, method }
    }
}

impl RowDetector for BaselineDetector {
    fn key(&self) -> CellKey {
        CellKey::new("baseline", "backbone", self.method.to_string())
    }

    fn detect_row(&self, crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        let features = self.backbone.features(crops)?;
        detect_features(&features, self.method)
    }
}

/// Flags a fixed index regardless of input — the chance-level reference.
/// Over sets with uniformly random planted positions its success rate
/// converges to `1 / set_size`.
pub struct DummyDetector {
    pub index: usize,
}

impl RowDetector for DummyDetector {
    fn key(&self) -> CellKey {
        CellKey::new("dummy", format!("fixed-{}", self.index), "none")
    }

    fn detect_row(&self, crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        Ok(AnomalyVerdict {
            row_id: None,
            method: Method::Boxplot,
            selection: None,
            flagged: true,
            anomaly_index: Some(self.index.min(crops.len().saturating_sub(1))),
            scores: vec![0.0; crops.len()],
            detail: VerdictDetail::Degenerate {},
            warning: Some("dummy detector: fixed index".into()),
        })
    }
}

/// Always flags the planted position — the upper-bound sanity reference.
pub struct OracleDetector;

impl RowDetector for OracleDetector {
    fn key(&self) -> CellKey {
        CellKey::new("oracle", "planted", "none")
    }

    fn detect_row(&self, _crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        Err(Error::config(
            "the oracle detector needs evaluation-set context; use detect_in_set",
        ))
    }

    fn detect_in_set(&self, set: &EvaluationSet, crops: &[ObjectImage]) -> Result<AnomalyVerdict> {
        let mut scores = vec![0.0; crops.len()];
        if set.anomaly_position < scores.len() {
            scores[set.anomaly_position] = 1.0;
        }
        Ok(AnomalyVerdict {
            row_id: None,
            method: Method::Boxplot,
            selection: None,
            flagged: true,
            anomaly_index: Some(set.anomaly_position),
            scores,
            detail: VerdictDetail::Degenerate {},
            warning: Some("oracle detector: reads the planted position".into()),
        })
    }
}

/// One detector run on one evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub set_id: String,
    pub model: String,
    pub selection: String,
    pub method: String,
    pub expected_index: usize,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<AnomalyVerdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Aggregate for one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub model: String,
    pub selection: String,
    pub method: String,
    pub trials: usize,
    pub correct: usize,
    pub success_rate: f64,
}

/// A set excluded from scoring (e.g. an unreadable image), with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetError {
    pub set_id: String,
    pub error: String,
}

/// Full evaluation outcome: the grid plus per-trial verdicts for audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuccessReport {
    /// Majority group size the sets were built with (set size − 1).
    pub n_majority: usize,
    pub seed: u64,
    pub sets_requested: usize,
    pub sets_evaluated: usize,
    pub cells: Vec<CellReport>,
    pub failed_sets: Vec<SetError>,
    pub trials: Vec<TrialRecord>,
}

impl SuccessReport {
    pub fn cell(&self, model: &str, selection: &str, method: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.model == model && c.selection == selection && c.method == method)
    }

    /// The grid as CSV. Header comments record the set parameters so rates
    /// are interpretable; all formatting is fixed for byte-stable reruns.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str("# co-ad success report\n");
        out.push_str(&format!(
            "# n_majority={} seed={} sets_requested={} sets_evaluated={} sets_failed={}\n",
            self.n_majority,
            self.seed,
            self.sets_requested,
            self.sets_evaluated,
            self.failed_sets.len()
        ));
        out.push_str("model,selection,method,trials,correct,success_rate\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4}\n",
                c.model, c.selection, c.method, c.trials, c.correct, c.success_rate
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Per-trial verdicts as JSON-lines, ordered by set then grid cell.
    pub fn write_trials_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for t in &self.trials {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Runs every detector on every set and aggregates the grid.
///
/// A set whose images cannot be loaded is excluded from all cells and
/// reported in `failed_sets`; an individual detector failure on a readable
/// set records an errored (incorrect) trial for that cell only.
pub fn evaluate(
    index: &DatasetIndex,
    sets: &[EvaluationSet],
    detectors: &[&dyn RowDetector],
) -> Result<SuccessReport> {
    if sets.is_empty() {
        return Err(Error::data("no evaluation sets supplied"));
    }
    if detectors.is_empty() {
        return Err(Error::config("no detectors supplied"));
    }
    let keys: Vec<CellKey> = detectors.iter().map(|d| d.key()).collect();
    for (i, k) in keys.iter().enumerate() {
        if keys[..i].contains(k) {
            return Err(Error::config(format!("duplicate detector grid cell {k}")));
        }
    }

    let mut correct = vec![0usize; detectors.len()];
    let mut trials = Vec::new();
    let mut failed_sets = Vec::new();
    let mut evaluated = 0usize;
    for set in sets {
        let loaded: Result<Vec<ObjectImage>> = set
            .validate(index)
            .and_then(|()| set.object_ids.iter().map(|id| index.load_image(id)).collect());
        let crops = match loaded {
            Ok(crops) => crops,
            Err(e) => {
                failed_sets.push(SetError { set_id: set.set_id.clone(), error: e.to_string() });
                continue;
            }
        };
        evaluated += 1;
        for (d_idx, detector) in detectors.iter().enumerate() {
            let key = &keys[d_idx];
            let mut record = TrialRecord {
                set_id: set.set_id.clone(),
                model: key.model.clone(),
                selection: key.selection.clone(),
                method: key.method.clone(),
                expected_index: set.anomaly_position,
                correct: false,
                verdict: None,
                error: None,
            };
            match detector.detect_in_set(set, &crops) {
                Ok(mut verdict) => {
                    verdict.row_id = Some(set.set_id.clone());
                    record.correct =
                        verdict.flagged && verdict.anomaly_index == Some(set.anomaly_position);
                    record.verdict = Some(verdict);
                }
                Err(e) => record.error = Some(e.to_string()),
            }
            if record.correct {
                correct[d_idx] += 1;
            }
            trials.push(record);
        }
    }

    let cells = keys
        .iter()
        .zip(&correct)
        .map(|(k, &c)| CellReport {
            model: k.model.clone(),
            selection: k.selection.clone(),
            method: k.method.clone(),
            trials: evaluated,
            correct: c,
            success_rate: if evaluated > 0 { c as f64 / evaluated as f64 } else { 0.0 },
        })
        .collect();
    let n_majority = sets[0].len().saturating_sub(1);
    Ok(SuccessReport {
        n_majority,
        seed: sets[0].seed,
        sets_requested: sets.len(),
        sets_evaluated: evaluated,
        cells,
        failed_sets,
        trials,
    })
}

/// One boxplot: normalized per-object distance scores with quartile fences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxplotSeries {
    pub selection: String,
    pub metric: Metric,
    /// Row sums of the pairwise distance matrix, normalized by the maximum
    /// (identical objects yield all-zero scores).
    pub scores: Vec<f64>,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub fence: f64,
    /// Indices of scores strictly beyond the upper fence.
    pub outliers: Vec<usize>,
}

/// Computes one plot series from already-extracted features (≥ 4 objects).
pub fn boxplot_series(
    label: impl Into<String>,
    features: &[ObjectFeature],
    metric: Metric,
) -> Result<BoxplotSeries> {
    if features.len() < 4 {
        return Err(Error::data(format!(
            "boxplot data needs at least 4 objects, got {}",
            features.len()
        )));
    }
    let d = pairwise_distances(features, metric)?;
    let mut scores = d.row_sums();
    let max = scores.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for s in &mut scores {
            *s /= max;
        }
    }
    let q1 = quantile_linear(&scores, 0.25);
    let q3 = quantile_linear(&scores, 0.75);
    let iqr = q3 - q1;
    let fence = q3 + 1.5 * iqr;
    let outliers = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > fence)
        .map(|(i, _)| i)
        .collect();
    Ok(BoxplotSeries {
        selection: label.into(),
        metric,
        scores,
        q1,
        q3,
        iqr,
        fence,
        outliers,
    })
}

/// Embeds one row under each selection and packages plot data (Fig.-style:
/// one boxplot per feature selection over the same objects).
pub fn emit_boxplot_data(
    crops: &[ObjectImage],
    model: &Model,
    selections: &[FeatureSelection],
) -> Result<Vec<BoxplotSeries>> {
    if crops.len() < 4 {
        return Err(Error::data(format!(
            "boxplot data needs at least 4 objects, got {}",
            crops.len()
        )));
    }
    if selections.is_empty() {
        return Err(Error::config("no feature selections given"));
    }
    let size = model.config().input_size;
    let resized: Vec<ObjectImage> = crops
        .iter()
        .enumerate()
        .map(|(i, c)| c.resize(size).map_err(|e| e.at_crop(i)))
        .collect::<Result<_>>()?;
    selections
        .iter()
        .map(|&sel| {
            let features = extract_row_features(&resized, model, sel)?;
            boxplot_series(sel.to_string(), &features, Metric::Euclidean)
        })
        .collect()
}

/// Serializes plot series as a deterministic pretty-printed JSON document.
pub fn write_boxplot_json(path: impl AsRef<Path>, series: &[BoxplotSeries]) -> Result<()> {
    let path = path.as_ref();
    let doc = serde_json::json!({ "series": series });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
