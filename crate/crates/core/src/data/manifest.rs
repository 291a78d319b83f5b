use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::BLUR_LABEL;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_HEADER: [&str; 6] = ["image_path", "dataset_id", "camera_id", "label", "quality", "source_record"];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum DatasetId {
    Eyepacs,
    Messidor1,
    Messidor2,
    Aptos,
    Synthetic,
    Other(String),
}

impl DatasetId {
    pub fn as_str(&self) -> &str {
        match self {
            DatasetId::Eyepacs => "eyepacs",
            DatasetId::Messidor1 => "messidor1",
            DatasetId::Messidor2 => "messidor2",
            DatasetId::Aptos => "aptos",
            DatasetId::Synthetic => "synthetic",
            DatasetId::Other(name) => name,
        }
    }

    /// Column title used in rendered tables.
    pub fn display_name(&self) -> &str {
        match self {
            DatasetId::Eyepacs => "EyePACS",
            DatasetId::Messidor1 => "Messidor-1",
            DatasetId::Messidor2 => "Messidor-2",
            DatasetId::Aptos => "APTOS",
            DatasetId::Synthetic => "Synthetic",
            DatasetId::Other(name) => name,
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err("dataset id must not be empty".into());
        }
        if s.contains(',') || s.chars().any(char::is_whitespace) {
            return Err(format!("dataset id `{s}` must not contain commas or whitespace"));
        }
        Ok(match s.to_ascii_lowercase().as_str() {
            "eyepacs" => DatasetId::Eyepacs,
            "messidor1" => DatasetId::Messidor1,
            "messidor2" => DatasetId::Messidor2,
            "aptos" => DatasetId::Aptos,
            "synthetic" => DatasetId::Synthetic,
            _ => DatasetId::Other(s.to_string()),
        })
    }
}

impl From<DatasetId> for String {
    fn from(d: DatasetId) -> Self {
        d.as_str().to_string()
    }
}

impl TryFrom<String> for DatasetId {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CameraId {
    A,
    B,
    C,
    D,
    E,
    #[serde(rename = "unknown")]
    Unknown,
}

impl CameraId {
    pub fn as_str(self) -> &'static str {
        match self {
            CameraId::A => "A",
            CameraId::B => "B",
            CameraId::C => "C",
            CameraId::D => "D",
            CameraId::E => "E",
            CameraId::Unknown => "unknown",
        }
    }
}

impl FromStr for CameraId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(CameraId::A),
            "B" | "b" => Ok(CameraId::B),
            "C" | "c" => Ok(CameraId::C),
            "D" | "d" => Ok(CameraId::D),
            "E" | "e" => Ok(CameraId::E),
            "unknown" => Ok(CameraId::Unknown),
            other => Err(format!("unknown camera id `{other}` (expected A-E or unknown)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Good,
    Usable,
    Reject,
    Unknown,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Usable => "usable",
            Quality::Reject => "reject",
            Quality::Unknown => "unknown",
        }
    }
}

impl FromStr for Quality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "good" => Ok(Quality::Good),
            "usable" => Ok(Quality::Usable),
            "reject" => Ok(Quality::Reject),
            "unknown" => Ok(Quality::Unknown),
            other => Err(format!("unknown quality `{other}`")),
        }
    }
}

/// One fundus image. Label 5 marks a blurred derivative of `source_record`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub dataset_id: DatasetId,
    pub camera_id: Option<CameraId>,
    pub label: u8,
    pub quality: Option<Quality>,
    pub source_record: Option<PathBuf>,
}

impl ImageRecord {
    pub fn is_blurred(&self) -> bool {
        usize::from(self.label) == BLUR_LABEL
    }

    pub fn check_invariants(&self) -> Result<()> {
        if usize::from(self.label) > BLUR_LABEL {
            return Err(Error::Manifest(format!("{}: label {} outside 0..={BLUR_LABEL}", self.image_path.display(), self.label)));
        }
        if self.is_blurred() != self.source_record.is_some() {
            return Err(Error::Manifest(format!(
                "{}: label 5 must be paired with source_record and vice versa",
                self.image_path.display()
            )));
        }
        Ok(())
    }
}

/// Per-dataset mapping from native grade tokens to the 0-4 scale.
///
/// The key set doubles as the manifest's declared dataset set.
pub type LabelMaps = BTreeMap<String, BTreeMap<String, u8>>;

/// Identity maps for the five-grade datasets; Messidor-1 maps its four
/// native levels onto grades 0-3.
pub fn default_label_maps() -> LabelMaps {
    let identity = |n: u8| -> BTreeMap<String, u8> { (0..n).map(|g| (g.to_string(), g)).collect() };
    let mut maps = LabelMaps::new();
    for id in ["eyepacs", "messidor2", "aptos", "synthetic"] {
        maps.insert(id.to_string(), identity(5));
    }
    maps.insert("messidor1".to_string(), identity(4));
    maps
}

pub fn map_labels(native_grade: &str, dataset: &DatasetId, maps: &LabelMaps) -> Result<u8> {
    let unmapped = || Error::UnmappedLabel { dataset: dataset.to_string(), token: native_grade.to_string() };
    let grade = *maps.get(dataset.as_str()).ok_or_else(unmapped)?.get(native_grade.trim()).ok_or_else(unmapped)?;
    if usize::from(grade) >= BLUR_LABEL {
        return Err(Error::Manifest(format!("label map for `{dataset}` sends `{native_grade}` to {grade}, outside 0-4")));
    }
    Ok(grade)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub label_maps: LabelMaps,
    pub schema_version: u32,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, label_maps: LabelMaps) -> Result<Self> {
        let m = Self { records, label_maps, schema_version: MANIFEST_SCHEMA_VERSION };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut originals = HashSet::new();
        for r in &self.records {
            r.check_invariants()?;
            if !self.label_maps.contains_key(r.dataset_id.as_str()) {
                return Err(Error::Manifest(format!("dataset `{}` is not declared in the label maps", r.dataset_id)));
            }
            if !seen.insert((&r.image_path, r.label)) {
                return Err(Error::Manifest(format!("duplicate record ({}, {})", r.image_path.display(), r.label)));
            }
            if !r.is_blurred() {
                originals.insert(&r.image_path);
            }
        }
        for r in self.records.iter().filter(|r| r.is_blurred()) {
            let src = r.source_record.as_ref().expect("checked above");
            if !originals.contains(src) {
                return Err(Error::Manifest(format!(
                    "{}: source_record {} does not resolve to an original in this manifest",
                    r.image_path.display(),
                    src.display()
                )));
            }
        }
        Ok(())
    }

    pub fn label_histogram(&self) -> [usize; 6] {
        let mut h = [0; 6];
        for r in &self.records {
            h[usize::from(r.label)] += 1;
        }
        h
    }
}

fn absolute_parent(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::path::absolute(parent).map_err(|e| Error::io(parent, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load a manifest using [`default_label_maps`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, &default_label_maps())
}

/// Load and validate a manifest CSV. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest_with(path: &Path, label_maps: &LabelMaps) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = absolute_parent(path)?;
    let base = base.as_path();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Manifest(format!(
            "{}: header must be `{}`, found `{}`",
            path.display(),
            MANIFEST_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::ManifestRow { row: row_no, column: "*", message: e.to_string() })?;
        records.push(parse_row(&row, row_no, base, label_maps)?);
    }
    DatasetManifest::new(records, label_maps.clone())
}

fn parse_row(row: &csv::StringRecord, row_no: usize, base: &Path, label_maps: &LabelMaps) -> Result<ImageRecord> {
    let bad = |column: &'static str, message: String| Error::ManifestRow { row: row_no, column, message };
    let field = |i: usize| row.get(i).unwrap_or("").trim();

    let raw_path = field(0);
    if raw_path.is_empty() {
        return Err(bad("image_path", "empty path".into()));
    }
    let image_path = resolve(base, raw_path);
    if !image_path.is_file() {
        return Err(bad("image_path", format!("{} does not exist", image_path.display())));
    }

    let dataset_id: DatasetId = field(1).parse().map_err(|e| bad("dataset_id", e))?;
    if !label_maps.contains_key(dataset_id.as_str()) {
        return Err(bad("dataset_id", format!("unknown dataset `{dataset_id}` has no label_map entry")));
    }

    let camera_id = match field(2) {
        "" => None,
        s => Some(s.parse().map_err(|e| bad("camera_id", e))?),
    };
    let quality = match field(4) {
        "" => None,
        s => Some(s.parse().map_err(|e| bad("quality", e))?),
    };
    let source_record = match field(5) {
        "" => None,
        s => Some(resolve(base, s)),
    };

    let token = field(3);
    if let Ok(n) = token.parse::<i64>() {
        if !(0..=BLUR_LABEL as i64).contains(&n) {
            return Err(bad("label", format!("label {n} outside valid range 0..={BLUR_LABEL}")));
        }
    }
    let label = if source_record.is_some() {
        if token != BLUR_LABEL.to_string() {
            return Err(bad("label", format!("record with source_record must carry label {BLUR_LABEL}, got `{token}`")));
        }
        BLUR_LABEL as u8
    } else if token == BLUR_LABEL.to_string() {
        return Err(bad("source_record", format!("label {BLUR_LABEL} requires a source_record")));
    } else {
        map_labels(token, &dataset_id, label_maps).map_err(|e| bad("label", e.to_string()))?
    };

    Ok(ImageRecord { image_path, dataset_id, camera_id, label, quality, source_record })
}

fn relative_to(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

/// Write a manifest in the CSV schema, with paths relative to the output
/// file's directory when possible. Labels are written on the 0-5 scale.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = absolute_parent(path)?;
    let base = base.as_path();
    fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let mut out = String::new();
    out.push_str(&MANIFEST_HEADER.join(","));
    out.push('\n');
    let mut w = csv::WriterBuilder::new().has_headers(false).terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in &manifest.records {
        w.write_record([
            relative_to(base, &r.image_path),
            r.dataset_id.to_string(),
            r.camera_id.map(|c| c.as_str().to_string()).unwrap_or_default(),
            r.label.to_string(),
            r.quality.map(|q| q.as_str().to_string()).unwrap_or_default(),
            r.source_record.as_deref().map(|s| relative_to(base, s)).unwrap_or_default(),
        ])?;
    }
    let body = w.into_inner().map_err(|e| Error::Manifest(format!("csv flush failed: {e}")))?;
    out.push_str(&String::from_utf8_lossy(&body));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, b"x").unwrap();
        p
    }

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        fs::write(&p, format!("{}\n{body}", MANIFEST_HEADER.join(","))).unwrap();
        p
    }

    #[test]
    fn parses_well_formed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a.png", "b.png", "c.png", "d.png"] {
            touch(dir.path(), n);
        }
        let p = write(dir.path(), "a.png,eyepacs,A,0,good,\nb.png,eyepacs,D,4,,\nc.png,messidor1,,3,reject,\nd.png,aptos,,2,,\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.records[1].camera_id, Some(CameraId::D));
        assert_eq!(m.records[2].label, 3);
        assert_eq!(m.records[2].quality, Some(Quality::Reject));
        assert_eq!(m.records[0].image_path, dir.path().join("a.png"));
    }

    #[test]
    fn out_of_range_label_names_row_and_range() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "b.png");
        let p = write(dir.path(), "a.png,eyepacs,,1,,\nb.png,eyepacs,,7,,\n");
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("row 2"), "{err}");
        assert!(err.contains("`label`"), "{err}");
        assert!(err.contains("0..=5"), "{err}");
    }

    #[test]
    fn messidor1_native_grade_maps_through_identity() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "m.png");
        let p = write(dir.path(), "m.png,messidor1,,3,,\n");
        assert_eq!(load_manifest(&p).unwrap().records[0].label, 3);
        // Messidor-1 has only four native levels.
        let p = write(dir.path(), "m.png,messidor1,,4,,\n");
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn map_labels_cases() {
        let maps = default_label_maps();
        assert_eq!(map_labels("4", &DatasetId::Eyepacs, &maps).unwrap(), 4);
        let mut custom = maps.clone();
        custom.insert(
            "messidor1".into(),
            [("0", 0), ("1", 1), ("2", 3), ("3", 4)].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        );
        assert_eq!(map_labels("3", &DatasetId::Messidor1, &custom).unwrap(), 4);
        assert!(matches!(map_labels("NA", &DatasetId::Eyepacs, &maps), Err(Error::UnmappedLabel { .. })));
    }

    #[test]
    fn rejects_unknown_dataset_missing_file_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        let p = write(dir.path(), "a.png,mystery,,1,,\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("label_map"));
        let p = write(dir.path(), "missing.png,eyepacs,,1,,\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("image_path"));
        let p = write(dir.path(), "a.png,eyepacs,,1,,\na.png,eyepacs,,1,,\n");
        assert!(load_manifest(&p).unwrap_err().to_string().contains("duplicate"));
        assert!(load_manifest(&dir.path().join("nope.csv")).is_err());
    }

    #[test]
    fn blurred_records_need_sources() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "a_blur.png");
        let p = write(dir.path(), "a.png,eyepacs,,1,,\na_blur.png,eyepacs,,5,,\n");
        assert!(load_manifest(&p).is_err());
        let p = write(dir.path(), "a.png,eyepacs,,1,,\na_blur.png,eyepacs,,5,,a.png\n");
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records[1].source_record.as_deref(), Some(dir.path().join("a.png").as_path()));
        let p = write(dir.path(), "a_blur.png,eyepacs,,5,,zzz.png\n");
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "path,dataset\n").unwrap();
        assert!(load_manifest(&p).unwrap_err().to_string().contains("header"));
    }

    #[test]
    fn write_then_load_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.png");
        touch(dir.path(), "b.png");
        let p = write(dir.path(), "a.png,eyepacs,B,2,usable,\nb.png,eyepacs,,5,,a.png\n");
        let m = load_manifest(&p).unwrap();
        let out = dir.path().join("copy.csv");
        write_manifest(&m, &out).unwrap();
        let text = fs::read_to_string(&out).unwrap();
        assert!(text.starts_with("image_path,dataset_id,camera_id,label,quality,source_record\n"));
        assert!(text.contains("b.png,eyepacs,,5,,a.png\n"));
        assert_eq!(load_manifest(&out).unwrap().records, m.records);
    }
}
