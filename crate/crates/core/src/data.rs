//! Dataset manifests, image loading, subsampling and patient-grouped splitting.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::resize_bilinear;

pub const MANIFEST_HEADER: &str = "image_path,label,patient_id,split";
pub const DEFAULT_IMAGE_SIZE: (usize, usize) = (224, 224);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    fn parse(field: &str) -> Option<Split> {
        match field {
            "" | "unassigned" => Some(Split::Unassigned),
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: Option<u32>,
    pub patient_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub records: Vec<SampleRecord>,
    pub image_size: (usize, usize),
}

/// Records of one fold, as indices into the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_id: usize,
    pub record_indices: Vec<usize>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, records: Vec<SampleRecord>) -> Self {
        Self {
            name: name.into(),
            records,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Labels of every record, failing on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<u32>> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.label
                    .ok_or_else(|| Error::invalid(format!("record {i} has no label")))
            })
            .collect()
    }

    /// `Some(true)` when every record carries a train/val/test tag, `Some(false)` when none do.
    /// Mixed manifests yield `None`.
    pub fn splits_assigned(&self) -> Option<bool> {
        let assigned = self.records.iter().filter(|r| r.split != Split::Unassigned).count();
        if assigned == 0 {
            Some(false)
        } else if assigned == self.records.len() {
            Some(true)
        } else {
            None
        }
    }

    pub fn indices_with_split(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Serialises back to the manifest CSV format. Paths are written as stored.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let label = r.label.map(|l| l.to_string()).unwrap_or_default();
            let split = match r.split {
                Split::Unassigned => "",
                s => s.as_str(),
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_path.display(),
                label,
                r.patient_id,
                split
            ));
        }
        out
    }
}

/// Parses manifest CSV text. Relative image paths are joined onto `base_dir` when given.
pub fn parse_manifest(text: &str, name: &str, base_dir: Option<&Path>) -> Result<DatasetManifest> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("").trim_end_matches('\r');
    if header != MANIFEST_HEADER {
        return Err(Error::ManifestHeader(header.to_string()));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        // Header is line 1, so the first data row is row 2.
        let row = i + 2;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::ManifestRow {
                row,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let path = fields[0].trim();
        if path.is_empty() {
            return Err(Error::ManifestRow {
                row,
                message: "empty image_path".into(),
            });
        }
        let label = match fields[1].trim() {
            "" => None,
            s => Some(s.parse::<u32>().map_err(|_| Error::ManifestRow {
                row,
                message: format!("label `{s}` is not a non-negative integer"),
            })?),
        };
        let patient_id = match fields[2].trim() {
            "" => format!("__record_{}", records.len()),
            s => s.to_string(),
        };
        let split = Split::parse(fields[3].trim()).ok_or_else(|| Error::ManifestRow {
            row,
            message: format!("unknown split `{}`", fields[3].trim()),
        })?;
        let mut image_path = PathBuf::from(path);
        if let Some(base) = base_dir {
            if image_path.is_relative() {
                image_path = base.join(image_path);
            }
        }
        records.push(SampleRecord {
            image_path,
            label,
            patient_id,
            split,
        });
    }
    Ok(DatasetManifest::new(name, records))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_manifest(&text, &name, path.parent())
}

/// Decodes an image file into a `(3, h, w)` tensor with values in `[0, 1]`.
/// Grayscale inputs are replicated across the three channels.
pub fn load_image(record: &SampleRecord, size: (usize, usize)) -> Result<Array3<f32>> {
    let path = &record.image_path;
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.clone(),
            message: "empty raster".into(),
        });
    }
    let raw = rgb.into_raw();
    let tensor = Array3::from_shape_fn((3, h, w), |(c, y, x)| raw[(y * w + x) * 3 + c].clamp(0.0, 1.0));
    Ok(resize_bilinear(&tensor, size.0, size.1))
}

/// Uniform random subset of `ceil(fraction * N)` records, kept in manifest order.
pub fn subsample_fraction(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok(manifest.clone());
    }
    let n = manifest.len();
    let take = subsample_size(n, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
    picked.sort_unstable();
    let mut out = manifest.clone();
    out.records = picked.into_iter().map(|i| manifest.records[i].clone()).collect();
    Ok(out)
}

pub(crate) fn subsample_size(n: usize, fraction: f64) -> usize {
    // Guard against products such as 0.01 * 1000 landing a hair above an integer.
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug, Clone)]
struct PatientGroup {
    records: Vec<usize>,
    class_counts: Vec<usize>,
}

impl PatientGroup {
    fn majority(&self) -> usize {
        let mut best = 0;
        for (c, &n) in self.class_counts.iter().enumerate() {
            if n > self.class_counts[best] {
                best = c;
            }
        }
        best
    }
}

/// Groups the given record indices by patient, in first-seen order.
fn patient_groups(manifest: &DatasetManifest, indices: &[usize], n_classes: usize) -> Vec<PatientGroup> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_patient: BTreeMap<&str, PatientGroup> = BTreeMap::new();
    for &i in indices {
        let rec = &manifest.records[i];
        let group = by_patient.entry(rec.patient_id.as_str()).or_insert_with(|| {
            order.push(rec.patient_id.as_str());
            PatientGroup {
                records: Vec::new(),
                class_counts: vec![0; n_classes],
            }
        });
        group.records.push(i);
        let class = rec.label.map(|l| l as usize).unwrap_or(0);
        if class < n_classes {
            group.class_counts[class] += 1;
        }
    }
    order
        .into_iter()
        .map(|p| by_patient.remove(p).expect("patient recorded"))
        .collect()
}

const TIE_EPS: f64 = 1e-9;

fn cmp_deficit(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= TIE_EPS {
        Ordering::Equal
    } else {
        a.partial_cmp(&b).unwrap_or(Ordering::Equal)
    }
}

/// Greedy assignment of patient groups to bins with target fractions.
///
/// Groups are shuffled by `seed`, then visited largest first. Each group goes to the bin
/// most deficient in the group's majority class (when `stratify`), then most deficient
/// overall, then lowest bin index.
fn assign_groups(
    mut groups: Vec<PatientGroup>,
    n_classes: usize,
    fractions: &[f64],
    stratify: bool,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    groups.sort_by(|a, b| b.records.len().cmp(&a.records.len()));

    let total: usize = groups.iter().map(|g| g.records.len()).sum();
    let mut class_totals = vec![0usize; n_classes];
    for g in &groups {
        for (c, n) in g.class_counts.iter().enumerate() {
            class_totals[c] += n;
        }
    }
    let bins = fractions.len();
    let mut counts = vec![0usize; bins];
    let mut class_counts = vec![vec![0usize; n_classes]; bins];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];

    for g in groups {
        let class = g.majority();
        let overall = |b: usize| fractions[b] * total as f64 - counts[b] as f64;
        let by_class = |b: usize| fractions[b] * class_totals[class] as f64 - class_counts[b][class] as f64;
        let mut best = 0;
        for b in 1..bins {
            let primary = if stratify {
                cmp_deficit(by_class(b), by_class(best))
            } else {
                Ordering::Equal
            };
            let ord = primary.then_with(|| cmp_deficit(overall(b), overall(best)));
            if ord == Ordering::Greater {
                best = b;
            }
        }
        counts[best] += g.records.len();
        for (c, n) in g.class_counts.iter().enumerate() {
            class_counts[best][c] += n;
        }
        members[best].extend_from_slice(&g.records);
    }
    for m in &mut members {
        m.sort_unstable();
    }
    members
}

/// Number of classes `max_label + 1`, requiring every class to occur and at least two classes.
fn class_count(manifest: &DatasetManifest, indices: &[usize]) -> Result<usize> {
    let mut seen = BTreeSet::new();
    for &i in indices {
        let label = manifest.records[i]
            .label
            .ok_or_else(|| Error::invalid(format!("record {i} has no label")))?;
        seen.insert(label as usize);
    }
    let n_classes = seen.iter().next_back().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::invalid("at least two classes are required"));
    }
    if let Some(missing) = (0..n_classes).find(|c| !seen.contains(c)) {
        return Err(Error::invalid(format!("class {missing} is absent from all records")));
    }
    Ok(n_classes)
}

/// Patient-grouped, class-stratified k-fold partition of the whole manifest.
pub fn stratified_group_kfold(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<Vec<FoldAssignment>> {
    let all: Vec<usize> = (0..manifest.len()).collect();
    stratified_group_kfold_subset(manifest, &all, k, seed)
}

pub(crate) fn stratified_group_kfold_subset(
    manifest: &DatasetManifest,
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<FoldAssignment>> {
    if k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    let n_classes = class_count(manifest, indices)?;
    let groups = patient_groups(manifest, indices, n_classes);
    if groups.len() < k {
        return Err(Error::invalid(format!(
            "{} distinct patients cannot fill {k} folds",
            groups.len()
        )));
    }
    let fractions = vec![1.0 / k as f64; k];
    Ok(assign_groups(groups, n_classes, &fractions, true, seed)
        .into_iter()
        .enumerate()
        .map(|(fold_id, record_indices)| FoldAssignment {
            fold_id,
            record_indices,
        })
        .collect())
}

fn validate_ratios(ratios: &[f64]) -> Result<()> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::invalid(format!("ratios must be non-negative, got {ratios:?}")));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("ratios must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Assigns train/val/test tags by patient group with the given (train, val, test) ratios.
///
/// Refuses manifests that already carry split tags; those splits are meant to be used verbatim.
pub fn holdout_split(manifest: &DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    validate_ratios(&ratios)?;
    if manifest.records.iter().any(|r| r.split != Split::Unassigned) {
        return Err(Error::invalid(
            "manifest already carries split tags; use the given splits instead of re-splitting",
        ));
    }
    let all: Vec<usize> = (0..manifest.len()).collect();
    let groups = patient_groups(manifest, &all, 1);
    let bins = assign_groups(groups, 1, &ratios, false, seed);
    let mut out = manifest.clone();
    for (bin, split) in bins.iter().zip([Split::Train, Split::Val, Split::Test]) {
        for &i in bin {
            out.records[i].split = split;
        }
    }
    Ok(out)
}

/// Patient-grouped, class-stratified split of a subset of records into bins with the given
/// fractions. Used to carve train/validation sets out of non-test data.
pub fn grouped_stratified_split(
    manifest: &DatasetManifest,
    indices: &[usize],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    validate_ratios(fractions)?;
    let n_classes = class_count(manifest, indices)?;
    let groups = patient_groups(manifest, indices, n_classes);
    Ok(assign_groups(groups, n_classes, fractions, true, seed))
}

/// Fails if any patient appears in more than one of the given index sets.
pub fn check_patient_disjoint(manifest: &DatasetManifest, sets: &[(&str, &[usize])]) -> Result<()> {
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    for (role, set) in sets {
        for &i in set.iter() {
            let pid = manifest.records[i].patient_id.as_str();
            match owner.get(pid) {
                Some(prev) if prev != role => {
                    return Err(Error::Leakage(format!(
                        "patient `{pid}` appears in both {prev} and {role}"
                    )))
                }
                _ => {
                    owner.insert(pid, role);
                }
            }
        }
    }
    Ok(())
}

/// `record_index,fold_id` CSV, sorted by record index.
pub fn folds_to_csv(folds: &[FoldAssignment]) -> String {
    let mut rows: Vec<(usize, usize)> = folds
        .iter()
        .flat_map(|f| f.record_indices.iter().map(move |&i| (i, f.fold_id)))
        .collect();
    rows.sort_unstable();
    let mut out = String::from("record_index,fold_id\n");
    for (i, f) in rows {
        out.push_str(&format!("{i},{f}\n"));
    }
    out
}

pub fn write_folds_csv(folds: &[FoldAssignment], path: &Path) -> Result<()> {
    std::fs::write(path, folds_to_csv(folds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(path: &str, label: Option<u32>, pid: &str) -> SampleRecord {
        SampleRecord {
            image_path: PathBuf::from(path),
            label,
            patient_id: pid.to_string(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn parses_three_full_rows() {
        let text = "image_path,label,patient_id,split\na.png,0,p1,train\nb.png,1,p2,val\nc.png,1,p3,test\n";
        let m = parse_manifest(text, "t", None).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.records[1].image_path, PathBuf::from("b.png"));
        assert_eq!(m.records[1].label, Some(1));
        assert_eq!(m.records[1].patient_id, "p2");
        assert_eq!(m.records[2].split, Split::Test);
        assert_eq!(m.image_size, (224, 224));
    }

    #[test]
    fn empty_fields_follow_optional_rules() {
        let text = "image_path,label,patient_id,split\na.png,,,\nb.png,,,\n";
        let m = parse_manifest(text, "t", None).unwrap();
        assert_eq!(m.records[0].label, None);
        assert_eq!(m.records[0].split, Split::Unassigned);
        assert!(!m.records[0].patient_id.is_empty());
        assert_ne!(m.records[0].patient_id, m.records[1].patient_id);
    }

    #[test]
    fn duplicate_paths_are_kept() {
        let text = "image_path,label,patient_id,split\na.png,0,p1,\na.png,0,p2,\n";
        let m = parse_manifest(text, "t", None).unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn errors_name_the_row() {
        let err = parse_manifest(
            "image_path,label,patient_id,split\na.png,0,p1,\nb.png,x,p2,\n",
            "t",
            None,
        )
        .unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
        assert!(matches!(
            parse_manifest("path,label\n", "t", None),
            Err(Error::ManifestHeader(_))
        ));
        let err = parse_manifest("image_path,label,patient_id,split\na.png,0\n", "t", None).unwrap_err();
        assert!(err.to_string().contains("row 2"));
    }

    #[test]
    fn missing_manifest_file_is_io_error() {
        assert!(matches!(
            load_manifest(Path::new("/nonexistent/manifest.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn relative_paths_join_base_dir() {
        let m = parse_manifest(
            "image_path,label,patient_id,split\nimgs/a.png,0,p,\n/abs/b.png,0,q,\n",
            "t",
            Some(Path::new("/data")),
        )
        .unwrap();
        assert_eq!(m.records[0].image_path, PathBuf::from("/data/imgs/a.png"));
        assert_eq!(m.records[1].image_path, PathBuf::from("/abs/b.png"));
    }

    #[test]
    fn csv_roundtrip() {
        let text = "image_path,label,patient_id,split\na.png,0,p1,train\nb.png,,p2,\n";
        let m = parse_manifest(text, "t", None).unwrap();
        assert_eq!(m.to_csv(), text);
    }

    #[test]
    fn subsample_sizes_and_determinism() {
        let records = (0..1000)
            .map(|i| rec(&format!("{i}.png"), None, &format!("p{i}")))
            .collect();
        let m = DatasetManifest::new("big", records);
        assert_eq!(subsample_fraction(&m, 1.0, 3).unwrap(), m);
        let a = subsample_fraction(&m, 0.01, 7).unwrap();
        let b = subsample_fraction(&m, 0.01, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert!(subsample_fraction(&m, 0.0, 1).is_err());
        assert!(subsample_fraction(&m, 1.5, 1).is_err());
        // ceil(0.10 * 224316) = ceil(22431.6)
        assert_eq!(subsample_size(224_316, 0.10), 22_432);
        assert_eq!(subsample_size(224_316, 0.01), 2_244);
    }

    #[test]
    fn kfold_perfectly_balanced_instance() {
        let records = (0..10)
            .map(|i| rec(&format!("{i}.png"), Some((i % 2) as u32), &format!("p{i}")))
            .collect();
        let m = DatasetManifest::new("bal", records);
        let folds = stratified_group_kfold(&m, 5, 11).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert_eq!(f.record_indices.len(), 2);
            let pos: u32 = f.record_indices.iter().map(|&i| m.records[i].label.unwrap()).sum();
            assert_eq!(pos, 1);
        }
    }

    #[test]
    fn kfold_keeps_patient_together() {
        let records = vec![
            rec("a", Some(0), "same"),
            rec("b", Some(1), "same"),
            rec("c", Some(0), "same"),
            rec("d", Some(1), "x"),
            rec("e", Some(0), "y"),
        ];
        let m = DatasetManifest::new("g", records);
        let folds = stratified_group_kfold(&m, 2, 0).unwrap();
        let owner: Vec<usize> = [0, 1, 2]
            .iter()
            .map(|i| folds.iter().position(|f| f.record_indices.contains(i)).unwrap())
            .collect();
        assert!(owner.iter().all(|&f| f == owner[0]));
    }

    #[test]
    fn kfold_40_60_split_stays_near_global_proportion() {
        // 50 patients, 2 records each, patients labelled consistently: 20 positive, 30 negative.
        let mut records = Vec::new();
        for p in 0..50 {
            let label = u32::from(p < 20);
            for j in 0..2 {
                records.push(rec(&format!("{p}_{j}"), Some(label), &format!("p{p}")));
            }
        }
        let m = DatasetManifest::new("s", records);
        let folds = stratified_group_kfold(&m, 5, 5).unwrap();
        for f in &folds {
            let pos = f
                .record_indices
                .iter()
                .filter(|&&i| m.records[i].label == Some(1))
                .count();
            let prop = pos as f64 / f.record_indices.len() as f64;
            assert!((prop - 0.4).abs() <= 0.10, "fold {} proportion {prop}", f.fold_id);
        }
    }

    #[test]
    fn kfold_rejections() {
        let few: Vec<_> = (0..3).map(|i| rec("a", Some(i % 2), &format!("p{i}"))).collect();
        assert!(stratified_group_kfold(&DatasetManifest::new("f", few), 5, 0).is_err());
        let one_class: Vec<_> = (0..10).map(|i| rec("a", Some(1), &format!("p{i}"))).collect();
        assert!(stratified_group_kfold(&DatasetManifest::new("c", one_class), 5, 0).is_err());
        let unlabeled: Vec<_> = (0..10).map(|i| rec("a", None, &format!("p{i}"))).collect();
        assert!(stratified_group_kfold(&DatasetManifest::new("u", unlabeled), 5, 0).is_err());
        let ok: Vec<_> = (0..10).map(|i| rec("a", Some(i % 2), &format!("p{i}"))).collect();
        assert!(stratified_group_kfold(&DatasetManifest::new("k", ok), 1, 0).is_err());
    }

    #[test]
    fn holdout_ten_singletons() {
        let records = (0..10).map(|i| rec("a", Some(i % 2), &format!("p{i}"))).collect();
        let m = holdout_split(&DatasetManifest::new("h", records), (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!(m.indices_with_split(Split::Train).len(), 7);
        assert_eq!(m.indices_with_split(Split::Val).len(), 1);
        assert_eq!(m.indices_with_split(Split::Test).len(), 2);
    }

    #[test]
    fn holdout_refuses_preassigned() {
        let mut r = rec("a", Some(0), "p");
        r.split = Split::Train;
        let m = DatasetManifest::new("h", vec![r]);
        assert!(holdout_split(&m, (0.7, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn holdout_keeps_big_patient_whole() {
        let mut records: Vec<_> = (0..5).map(|i| rec(&i.to_string(), Some(0), "big")).collect();
        records.extend((0..5).map(|i| rec("x", Some(1), &format!("p{i}"))));
        let m = holdout_split(&DatasetManifest::new("h", records), (0.7, 0.1, 0.2), 9).unwrap();
        let s = m.records[0].split;
        assert!(m.records[..5].iter().all(|r| r.split == s));
    }

    #[test]
    fn folds_csv_is_sorted() {
        let folds = vec![
            FoldAssignment {
                fold_id: 0,
                record_indices: vec![2, 0],
            },
            FoldAssignment {
                fold_id: 1,
                record_indices: vec![1],
            },
        ];
        assert_eq!(folds_to_csv(&folds), "record_index,fold_id\n0,0\n1,1\n2,0\n");
    }

    fn arb_manifest() -> impl Strategy<Value = DatasetManifest> {
        (6usize..40, 2usize..12)
            .prop_flat_map(|(n, patients)| (prop::collection::vec((0..patients, 0u32..2), n), Just(patients)))
            .prop_map(|(rows, _)| {
                let mut records: Vec<SampleRecord> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, (p, l))| rec(&format!("{i}.png"), Some(*l), &format!("p{p}")))
                    .collect();
                // Ensure both classes appear.
                records[0].label = Some(0);
                records[1].label = Some(1);
                DatasetManifest::new("prop", records)
            })
    }

    proptest! {
        #[test]
        fn kfold_partition_and_leakage(m in arb_manifest(), seed in any::<u64>()) {
            let patients: BTreeSet<_> = m.records.iter().map(|r| r.patient_id.clone()).collect();
            prop_assume!(patients.len() >= 2);
            let k = patients.len().min(5);
            let folds = stratified_group_kfold(&m, k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flat_map(|f| f.record_indices.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..m.len()).collect::<Vec<_>>());
            let sets: Vec<(String, Vec<usize>)> = folds.iter().map(|f| (format!("fold{}", f.fold_id), f.record_indices.clone())).collect();
            let refs: Vec<(&str, &[usize])> = sets.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
            prop_assert!(check_patient_disjoint(&m, &refs).is_ok());
            prop_assert_eq!(folds.clone(), stratified_group_kfold(&m, k, seed).unwrap());
            prop_assert!(folds.iter().all(|f| !f.record_indices.is_empty()));
        }

        #[test]
        fn holdout_close_to_targets(m in arb_manifest(), seed in any::<u64>()) {
            let out = holdout_split(&m, (0.7, 0.1, 0.2), seed).unwrap();
            let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
            for r in &m.records { *sizes.entry(r.patient_id.as_str()).or_default() += 1; }
            let largest = *sizes.values().max().unwrap() as f64;
            for (split, frac) in [(Split::Train, 0.7), (Split::Val, 0.1), (Split::Test, 0.2)] {
                let got = out.indices_with_split(split).len() as f64;
                prop_assert!((got - frac * m.len() as f64).abs() <= largest + 1e-9);
            }
        }
    }
}
