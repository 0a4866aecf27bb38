//! Strict image/mask pairing manifests and patient-level splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{SampleRecord, SampleSource, Split};

/// Mask suffixes removed by [`normalize_stem`]. At most one is stripped.
pub const MASK_SUFFIXES: [&str; 3] = ["_mask", "_gt", "_seg"];

/// Recognized data file extensions, longest first.
pub const DATA_EXTENSIONS: [&str; 3] = [".nii.gz", ".nii", ".png"];

/// Column order of `manifest.csv`.
pub const CSV_HEADER: [&str; 6] = ["image_path", "mask_path", "source", "weight", "patient_id", "split"];

fn strip_extension(name: &str) -> &str {
    for ext in DATA_EXTENSIONS {
        if let Some(base) = name.strip_suffix(ext) {
            return base;
        }
    }
    match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    }
}

/// File name without its extension (`.nii.gz` counts as one extension).
pub fn file_stem_of(path: &Path) -> Option<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| strip_extension(n).to_string())
}

fn has_data_extension(name: &str) -> bool {
    DATA_EXTENSIONS.iter().any(|ext| name.ends_with(ext))
}

fn mask_suffix(stem: &str) -> Option<&'static str> {
    MASK_SUFFIXES.iter().copied().find(|s| stem.ends_with(s))
}

/// Removes the extension and exactly one trailing `_mask`, `_gt` or `_seg`.
///
/// Case-sensitive. `scan_gt_mask.png` becomes `scan_gt`: only the outermost
/// suffix goes, so distinct files are never merged by repeated stripping.
pub fn normalize_stem(filename: &str) -> String {
    let base = strip_extension(filename);
    match mask_suffix(base) {
        Some(suffix) => base[..base.len() - suffix.len()].to_string(),
        None => base.to_string(),
    }
}

/// Patient identifier of a file stem.
///
/// With an override pattern, capture group 1 (or the whole match) is used.
/// Otherwise a leading `patientNNNN` token is taken, falling back to the text
/// before the first underscore.
pub fn parse_patient_id(stem: &str, pattern: Option<&Regex>) -> String {
    if let Some(re) = pattern {
        if let Some(caps) = re.captures(stem) {
            return caps
                .get(1)
                .or_else(|| caps.get(0))
                .map(|m| m.as_str().to_string())
                .unwrap_or_default();
        }
    }
    if let Some(rest) = stem.strip_prefix("patient") {
        let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 {
            return stem[..7 + digits].to_string();
        }
    }
    stem.split('_').next().unwrap_or(stem).to_string()
}

/// Options for building a manifest from directories.
#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub source: SampleSource,
    pub weight: Option<f64>,
    pub patient_pattern: Option<Regex>,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            source: SampleSource::GroundTruth,
            weight: None,
            patient_pattern: None,
        }
    }
}

/// An ordered list of paired samples plus files that found no partner.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that relative record paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub orphans: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_path: String,
    mask_path: String,
    source: SampleSource,
    weight: f64,
    patient_id: String,
    split: Split,
}

fn list_data_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::IoRead {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        let is_data = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(has_data_extension);
        if is_data && entry.file_type()?.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn key_by_stem(files: Vec<PathBuf>, collisions: &mut Vec<(String, Vec<PathBuf>)>) -> BTreeMap<String, PathBuf> {
    let mut groups: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        groups.entry(normalize_stem(&name)).or_default().push(f);
    }
    let mut keyed = BTreeMap::new();
    for (stem, mut paths) in groups {
        if paths.len() > 1 {
            collisions.push((stem, paths));
        } else {
            keyed.insert(stem, paths.pop().expect("non-empty group"));
        }
    }
    keyed
}

/// Pairs images with masks whose normalized stems are equal.
pub fn build_manifest(image_dir: &Path, mask_dir: &Path) -> Result<Manifest> {
    build_manifest_with(image_dir, mask_dir, &ManifestOptions::default())
}

/// [`build_manifest`] with explicit source, weight and patient parsing.
///
/// When both directories are the same, files whose stem ends in a mask suffix
/// are treated as masks and the rest as images.
pub fn build_manifest_with(image_dir: &Path, mask_dir: &Path, opts: &ManifestOptions) -> Result<Manifest> {
    let (images, masks) = if same_dir(image_dir, mask_dir) {
        list_data_files(image_dir)?.into_iter().partition(|p| {
            file_stem_of(p).is_none_or(|s| mask_suffix(&s).is_none())
        })
    } else {
        (list_data_files(image_dir)?, list_data_files(mask_dir)?)
    };

    let mut collisions = Vec::new();
    let images = key_by_stem(images, &mut collisions);
    let mut masks = key_by_stem(masks, &mut collisions);
    if !collisions.is_empty() {
        return Err(Error::DuplicateStem(collisions));
    }

    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for (stem, image) in images {
        match masks.remove(&stem) {
            Some(mask) => {
                let patient = parse_patient_id(&stem, opts.patient_pattern.as_ref());
                let mut rec = SampleRecord::new(image, mask, opts.source, patient);
                if let Some(w) = opts.weight {
                    rec = rec.with_weight(w)?;
                }
                records.push(rec);
            }
            None => orphans.push(image),
        }
    }
    orphans.extend(masks.into_values());
    records.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    orphans.sort();
    Ok(Manifest {
        root: common_root(image_dir, mask_dir),
        records,
        orphans,
    })
}

/// Pairs images and masks purely by sorted listing position, without any
/// name check. This is the "loose" baseline the strict manifest guards
/// against; surplus files on either side become orphans.
pub fn build_loose_manifest(image_dir: &Path, mask_dir: &Path) -> Result<Manifest> {
    let (images, masks): (Vec<_>, Vec<_>) = if same_dir(image_dir, mask_dir) {
        list_data_files(image_dir)?.into_iter().partition(|p| {
            file_stem_of(p).is_none_or(|s| mask_suffix(&s).is_none())
        })
    } else {
        (list_data_files(image_dir)?, list_data_files(mask_dir)?)
    };
    let n = images.len().min(masks.len());
    let records = images
        .iter()
        .zip(&masks)
        .map(|(img, mask)| {
            let stem = file_stem_of(img).unwrap_or_default();
            SampleRecord::new(img.clone(), mask.clone(), SampleSource::GroundTruth, parse_patient_id(&stem, None))
        })
        .collect();
    let orphans = images[n..].iter().chain(&masks[n..]).cloned().collect();
    Ok(Manifest {
        root: common_root(image_dir, mask_dir),
        records,
        orphans,
    })
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn common_root(a: &Path, b: &Path) -> PathBuf {
    let mut root = PathBuf::new();
    for (x, y) in a.components().zip(b.components()) {
        if x != y {
            break;
        }
        root.push(x);
    }
    root
}

fn patient_rank(patient_id: &str, seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    h.finalize().into()
}

/// Assigns whole patients to train/val/test.
///
/// Patients are ordered by a SHA-256 hash of `(seed, patient_id)`; the first
/// `round(n * train)` go to train, the next `round(n * val)` to val and the
/// rest to test. The result depends only on the patient set and the seed.
pub fn split_by_patient(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest> {
    let (train, val, test) = ratios;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    if manifest.records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let patients: BTreeSet<&str> = manifest.records.iter().map(|r| r.patient_id.as_str()).collect();
    let mut ordered: Vec<(&str, [u8; 32])> = patients.iter().map(|p| (*p, patient_rank(p, seed))).collect();
    ordered.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));

    let n = ordered.len();
    let n_train = ((n as f64 * train).round() as usize).min(n);
    let n_val = ((n as f64 * val).round() as usize).min(n - n_train);
    let assignment: BTreeMap<&str, Split> = ordered
        .iter()
        .enumerate()
        .map(|(i, (p, _))| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (*p, split)
        })
        .collect();

    let mut out = manifest.clone();
    for rec in &mut out.records {
        rec.split = assignment[rec.patient_id.as_str()];
    }
    Ok(out)
}

impl Manifest {
    pub fn empty(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            records: Vec::new(),
            orphans: Vec::new(),
        }
    }

    /// Absolute (or root-joined) location of a record path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Appends another manifest's records, re-rooting their paths.
    pub fn merge(&self, other: &Manifest) -> Result<Manifest> {
        let mut out = self.clone();
        for rec in &other.records {
            let mut rec = rec.clone();
            rec.image_path = other.resolve(&rec.image_path);
            rec.mask_path = other.resolve(&rec.mask_path);
            out.records.push(rec);
        }
        out.orphans.extend(other.orphans.iter().map(|p| other.resolve(p)));
        out.check_unique_paths()?;
        Ok(out)
    }

    fn check_unique_paths(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for rec in &self.records {
            for p in [&rec.image_path, &rec.mask_path] {
                if !seen.insert(self.resolve(p)) {
                    return Err(Error::MalformedManifest(format!(
                        "{} appears in more than one record",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that files exist, paths are unique, weights match sources
    /// and no patient spans two splits.
    pub fn validate(&self) -> Result<()> {
        self.check_unique_paths()?;
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for rec in &self.records {
            rec.validate()?;
            for p in [&rec.image_path, &rec.mask_path] {
                if !self.resolve(p).is_file() {
                    return Err(Error::MalformedManifest(format!("{} does not exist", p.display())));
                }
            }
            if let Some(prev) = split_of.insert(&rec.patient_id, rec.split) {
                if prev != rec.split {
                    return Err(Error::MalformedManifest(format!(
                        "patient {} appears in both {prev} and {}",
                        rec.patient_id, rec.split
                    )));
                }
            }
        }
        Ok(())
    }

    fn relative(&self, p: &Path, base: &Path) -> String {
        let abs = self.resolve(p);
        abs.strip_prefix(base)
            .map(Path::to_path_buf)
            .unwrap_or(abs)
            .display()
            .to_string()
    }

    /// CSV text with paths relative to `base` where possible.
    pub fn to_csv_string(&self, base: &Path) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for rec in &self.records {
            w.serialize(CsvRow {
                image_path: self.relative(&rec.image_path, base),
                mask_path: self.relative(&rec.mask_path, base),
                source: rec.source,
                weight: rec.weight,
                patient_id: rec.patient_id.clone(),
                split: rec.split,
            })
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(CSV_HEADER).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::MalformedManifest(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `manifest.csv`-style output; paths become relative to the file's directory.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = base.canonicalize().unwrap_or(base);
        let rooted = Manifest {
            root: self.root.canonicalize().unwrap_or_else(|_| self.root.clone()),
            ..self.clone()
        };
        std::fs::write(path, rooted.to_csv_string(&base)?).map_err(|e| Error::IoWrite {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::IoRead {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::MalformedManifest(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != CSV_HEADER {
            return Err(Error::MalformedManifest(format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row.map_err(|e| Error::MalformedManifest(e.to_string()))?;
            let rec = SampleRecord {
                image_path: row.image_path.into(),
                mask_path: row.mask_path.into(),
                source: row.source,
                weight: row.weight,
                patient_id: row.patient_id,
                split: row.split,
            };
            rec.validate()?;
            records.push(rec);
        }
        Ok(Manifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            records,
            orphans: Vec::new(),
        })
    }

    /// SHA-256 over the manifest's CSV form (paths relative to its root).
    pub fn fingerprint(&self) -> String {
        let text = self.to_csv_string(&self.root).unwrap_or_default();
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn normalize_stem_examples() {
        assert_eq!(normalize_stem("patient0001_2CH_ED_mask.png"), "patient0001_2CH_ED");
        assert_eq!(normalize_stem("patient0001_4CH_ES.png"), "patient0001_4CH_ES");
        assert_eq!(normalize_stem("scan_gt_mask.png"), "scan_gt");
        assert_eq!(normalize_stem("patient0001_2CH_ED_gt.nii.gz"), "patient0001_2CH_ED");
        assert_eq!(normalize_stem("a_MASK.png"), "a_MASK");
    }

    #[test]
    fn patient_ids() {
        assert_eq!(parse_patient_id("patient0042_4CH_ED", None), "patient0042");
        assert_eq!(parse_patient_id("case7_frame3", None), "case7");
        let re = Regex::new(r"frame(\d+)").unwrap();
        assert_eq!(parse_patient_id("case7_frame3", Some(&re)), "3");
    }

    #[test]
    fn single_pair() {
        let img = tempfile::tempdir().unwrap();
        let msk = tempfile::tempdir().unwrap();
        touch(img.path(), "a.png");
        touch(msk.path(), "a_mask.png");
        let m = build_manifest(img.path(), msk.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert!(m.orphans.is_empty());
        assert_eq!(m.records[0].weight, 1.0);
    }

    #[test]
    fn unmatched_image_is_orphan() {
        let img = tempfile::tempdir().unwrap();
        let msk = tempfile::tempdir().unwrap();
        touch(img.path(), "a.png");
        touch(img.path(), "b.png");
        touch(msk.path(), "a_gt.png");
        let m = build_manifest(img.path(), msk.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.orphans, vec![img.path().join("b.png")]);
    }

    #[test]
    fn two_masks_with_one_stem_collide() {
        let img = tempfile::tempdir().unwrap();
        let msk = tempfile::tempdir().unwrap();
        touch(img.path(), "a.png");
        touch(msk.path(), "a_mask.png");
        touch(msk.path(), "a_gt.png");
        match build_manifest(img.path(), msk.path()) {
            Err(Error::DuplicateStem(c)) => {
                assert_eq!(c.len(), 1);
                assert_eq!(c[0].0, "a");
                assert_eq!(c[0].1.len(), 2);
            }
            other => panic!("expected DuplicateStem, got {other:?}"),
        }
    }

    #[test]
    fn shared_directory_separates_masks_by_suffix() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "patient0001_2CH_ED.nii.gz");
        touch(dir.path(), "patient0001_2CH_ED_gt.nii.gz");
        touch(dir.path(), "notes.txt");
        let m = build_manifest(dir.path(), dir.path()).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].patient_id, "patient0001");
    }

    #[test]
    fn csv_roundtrip_uses_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("images");
        let msk = dir.path().join("masks");
        std::fs::create_dir_all(&img).unwrap();
        std::fs::create_dir_all(&msk).unwrap();
        for p in ["patient0001_2CH_ED", "patient0002_4CH_ES"] {
            touch(&img, &format!("{p}.png"));
            touch(&msk, &format!("{p}_mask.png"));
        }
        let m = build_manifest(&img, &msk).unwrap();
        let path = dir.path().join("manifest.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("image_path,mask_path,source,weight,patient_id,split\n"));
        assert!(text.contains("images/patient0001_2CH_ED.png,masks/patient0001_2CH_ED_mask.png,ground_truth,1.0,patient0001,train"));
        let back = Manifest::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        back.validate().unwrap();
        assert_eq!(back.fingerprint(), Manifest::read_csv(&path).unwrap().fingerprint());
    }

    #[test]
    fn split_single_patient_and_determinism() {
        let mut m = Manifest::empty("/");
        for i in 0..4 {
            m.records.push(SampleRecord::new(format!("p_{i}.png"), format!("p_{i}_gt.png"), SampleSource::GroundTruth, "patient0001"));
        }
        let s = split_by_patient(&m, (0.8, 0.1, 0.1), 3).unwrap();
        let splits: BTreeSet<Split> = s.records.iter().map(|r| r.split).collect();
        assert_eq!(splits.len(), 1);
        assert_eq!(s, split_by_patient(&m, (0.8, 0.1, 0.1), 3).unwrap());
        assert!(matches!(split_by_patient(&Manifest::empty("/"), (0.8, 0.1, 0.1), 0), Err(Error::EmptyManifest)));
        assert!(split_by_patient(&m, (0.8, 0.3, 0.1), 0).is_err());
    }

    #[test]
    fn merge_rejects_repeated_paths() {
        let mut a = Manifest::empty("/data");
        a.records.push(SampleRecord::new("x.png", "x_gt.png", SampleSource::GroundTruth, "p"));
        assert!(a.merge(&a).is_err());
    }
}
