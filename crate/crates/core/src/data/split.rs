use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{CameraId, DatasetId, DatasetManifest, ImageRecord, Quality};
use crate::error::{Error, Result};

/// Predicate over `(dataset_id, camera_id)`. `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Selector {
    pub datasets: Option<Vec<DatasetId>>,
    pub cameras: Option<Vec<CameraId>>,
}

impl Selector {
    pub fn datasets(ids: impl IntoIterator<Item = DatasetId>) -> Self {
        Self { datasets: Some(ids.into_iter().collect()), cameras: None }
    }

    pub fn matches(&self, r: &ImageRecord) -> bool {
        let ds_ok = self.datasets.as_ref().is_none_or(|ds| ds.contains(&r.dataset_id));
        let cam_ok = self.cameras.as_ref().is_none_or(|cs| r.camera_id.is_some_and(|c| cs.contains(&c)));
        ds_ok && cam_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitMode {
    /// Train on cameras A, B, C; test sets "D" and "E".
    CameraSplit {
        #[serde(default)]
        dataset: Option<DatasetId>,
    },
    /// Train on one dataset, one test set per target dataset.
    SingleSource {
        source: DatasetId,
        targets: Vec<DatasetId>,
    },
    /// Train on `pool` minus `held_out`; test on `held_out`.
    LeaveOneOut {
        held_out: DatasetId,
        pool: Vec<DatasetId>,
    },
    Explicit {
        train: Selector,
        tests: Vec<(String, Selector)>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the training pool held out as an "in_domain" test set.
    #[serde(default)]
    pub in_domain_test_fraction: f64,
    /// Drop records whose quality label is `reject` from every selection.
    #[serde(default)]
    pub drop_reject_quality: bool,
}

fn default_val_fraction() -> f64 {
    0.1
}

impl SplitSpec {
    pub fn new(mode: SplitMode) -> Self {
        Self { mode, val_fraction: default_val_fraction(), seed: 0, in_domain_test_fraction: 0.0, drop_reject_quality: false }
    }

    pub fn camera_split() -> Self {
        Self::new(SplitMode::CameraSplit { dataset: None })
    }

    pub fn single_source(source: DatasetId, targets: Vec<DatasetId>) -> Self {
        Self::new(SplitMode::SingleSource { source, targets })
    }

    pub fn leave_one_out(held_out: DatasetId, pool: Vec<DatasetId>) -> Self {
        Self::new(SplitMode::LeaveOneOut { held_out, pool })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("split.val_fraction", format!("must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(0.0..1.0).contains(&self.in_domain_test_fraction) || self.in_domain_test_fraction + self.val_fraction >= 1.0 {
            return Err(Error::config("split.in_domain_test_fraction", "must lie in [0, 1) and leave room for training data"));
        }
        Ok(())
    }

    /// Short label used for directory and table names.
    pub fn name(&self) -> String {
        match &self.mode {
            SplitMode::CameraSplit { .. } => "camera_split".into(),
            SplitMode::SingleSource { source, .. } => format!("single_source_{source}"),
            SplitMode::LeaveOneOut { held_out, .. } => format!("leave_out_{held_out}"),
            SplitMode::Explicit { .. } => "explicit".into(),
        }
    }

    fn selectors(&self) -> (Selector, Vec<(String, Selector)>) {
        match &self.mode {
            SplitMode::CameraSplit { dataset } => {
                let cams = |c: &[CameraId]| Selector { datasets: dataset.clone().map(|d| vec![d]), cameras: Some(c.to_vec()) };
                (
                    cams(&[CameraId::A, CameraId::B, CameraId::C]),
                    vec![("D".to_string(), cams(&[CameraId::D])), ("E".to_string(), cams(&[CameraId::E]))],
                )
            }
            SplitMode::SingleSource { source, targets } => (
                Selector::datasets([source.clone()]),
                targets.iter().map(|t| (t.to_string(), Selector::datasets([t.clone()]))).collect(),
            ),
            SplitMode::LeaveOneOut { held_out, pool } => (
                Selector::datasets(pool.iter().filter(|d| *d != held_out).cloned()),
                vec![(held_out.to_string(), Selector::datasets([held_out.clone()]))],
            ),
            SplitMode::Explicit { train, tests } => (train.clone(), tests.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedSet {
    pub name: String,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    /// Training originals plus the blurred twins of those originals.
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub tests: Vec<NamedSet>,
}

impl Splits {
    pub fn test(&self, name: &str) -> Option<&[ImageRecord]> {
        self.tests.iter().find(|t| t.name == name).map(|t| t.records.as_slice())
    }
}

/// Partition a manifest according to `spec`.
///
/// Originals are selected by the mode's selectors; the in-domain test set and
/// the validation set are carved from the training pool by one seeded
/// shuffle. Blurred twins join the training set when their source did and are
/// dropped otherwise. Every output set keeps manifest order.
pub fn build_splits(manifest: &DatasetManifest, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if manifest.is_empty() {
        return Err(Error::Split("manifest is empty".into()));
    }
    let keep = |r: &ImageRecord| !(spec.drop_reject_quality && r.quality == Some(Quality::Reject));
    let originals: Vec<&ImageRecord> = manifest.records.iter().filter(|r| !r.is_blurred() && keep(r)).collect();

    let (train_sel, test_sels) = spec.selectors();
    let mut names = HashSet::new();
    for (name, _) in &test_sels {
        if !names.insert(name.as_str()) || name == "in_domain" {
            return Err(Error::Split(format!("duplicate test set name `{name}`")));
        }
    }
    for r in &originals {
        let hits = usize::from(train_sel.matches(r)) + test_sels.iter().filter(|(_, s)| s.matches(r)).count();
        if hits > 1 {
            return Err(Error::Split(format!("selector overlap: {} is selected by more than one set", r.image_path.display())));
        }
    }

    let pool: Vec<usize> = (0..originals.len()).filter(|&i| train_sel.matches(originals[i])).collect();
    if pool.is_empty() {
        return Err(Error::Split("training selector matched no records".into()));
    }

    let mut order = pool.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = order.len();
    let n_in = (spec.in_domain_test_fraction * n as f64).round() as usize;
    let n_val = ((spec.val_fraction * n as f64).round() as usize).max(1);
    if n_in + n_val >= n {
        return Err(Error::Split(format!("training pool of {n} records is too small for the requested held-out fractions")));
    }
    let mut role = vec![0u8; originals.len()]; // 1 train, 2 val, 3 in-domain test
    for (k, &i) in order.iter().enumerate() {
        role[i] = if k < n_in {
            3
        } else if k < n_in + n_val {
            2
        } else {
            1
        };
    }
    let pick =
        |want: u8| -> Vec<ImageRecord> { pool.iter().filter(|&&i| role[i] == want).map(|&i| originals[i].clone()).collect() };
    let val = pick(2);
    let in_domain = pick(3);

    let train_paths: HashSet<&PathBuf> = pool.iter().filter(|&&i| role[i] == 1).map(|&i| &originals[i].image_path).collect();
    let train: Vec<ImageRecord> = manifest
        .records
        .iter()
        .filter(|r| {
            if r.is_blurred() {
                r.source_record.as_ref().is_some_and(|s| train_paths.contains(s))
            } else {
                train_paths.contains(&r.image_path)
            }
        })
        .cloned()
        .collect();

    let mut tests = Vec::new();
    if n_in > 0 {
        tests.push(NamedSet { name: "in_domain".into(), records: in_domain });
    }
    for (name, sel) in test_sels {
        tests.push(NamedSet { name, records: originals.iter().filter(|r| sel.matches(r)).map(|r| (*r).clone()).collect() });
    }
    Ok(Splits { train, val, tests })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::default_label_maps;

    fn rec(name: &str, ds: DatasetId, cam: Option<CameraId>, label: u8) -> ImageRecord {
        ImageRecord { image_path: PathBuf::from(name), dataset_id: ds, camera_id: cam, label, quality: None, source_record: None }
    }

    fn camera_manifest() -> DatasetManifest {
        let cams = [CameraId::A, CameraId::B, CameraId::C, CameraId::D, CameraId::E];
        let mut records = Vec::new();
        for i in 0..100 {
            records.push(rec(&format!("e{i}.png"), DatasetId::Eyepacs, Some(cams[i % 5]), (i % 5) as u8));
        }
        DatasetManifest::new(records, default_label_maps()).unwrap()
    }

    fn multi_manifest() -> DatasetManifest {
        let mut records = Vec::new();
        for (k, ds) in [DatasetId::Eyepacs, DatasetId::Messidor1, DatasetId::Messidor2, DatasetId::Aptos].into_iter().enumerate()
        {
            for i in 0..20 {
                records.push(rec(&format!("{k}_{i}.png"), ds.clone(), None, (i % 4) as u8));
            }
        }
        let mut twin = rec("0_0_blur.png", DatasetId::Eyepacs, None, 5);
        twin.source_record = Some(PathBuf::from("0_0.png"));
        records.push(twin);
        DatasetManifest::new(records, default_label_maps()).unwrap()
    }

    #[test]
    fn camera_split_excludes_test_cameras_from_training() {
        let s = build_splits(&camera_manifest(), &SplitSpec::camera_split()).unwrap();
        assert!(s.train.iter().chain(&s.val).all(|r| matches!(r.camera_id, Some(CameraId::A | CameraId::B | CameraId::C))));
        assert_eq!(s.tests.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["D", "E"]);
        assert!(s.test("D").unwrap().iter().all(|r| r.camera_id == Some(CameraId::D)));
        assert_eq!(s.train.len() + s.val.len(), 60);
        assert_eq!(s.val.len(), 6);
    }

    #[test]
    fn single_source_yields_three_named_tests() {
        let spec =
            SplitSpec::single_source(DatasetId::Eyepacs, vec![DatasetId::Messidor1, DatasetId::Messidor2, DatasetId::Aptos]);
        let s = build_splits(&multi_manifest(), &spec).unwrap();
        let names: Vec<_> = s.tests.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["messidor1", "messidor2", "aptos"]);
        assert!(s.train.iter().all(|r| r.dataset_id == DatasetId::Eyepacs));
    }

    #[test]
    fn leave_one_out_trains_on_the_rest() {
        let spec = SplitSpec::leave_one_out(
            DatasetId::Aptos,
            vec![DatasetId::Eyepacs, DatasetId::Messidor1, DatasetId::Messidor2, DatasetId::Aptos],
        );
        let s = build_splits(&multi_manifest(), &spec).unwrap();
        let train_ds: HashSet<_> = s.train.iter().chain(&s.val).map(|r| r.dataset_id.clone()).collect();
        assert_eq!(train_ds, [DatasetId::Eyepacs, DatasetId::Messidor1, DatasetId::Messidor2].into_iter().collect());
        assert_eq!(s.test("aptos").unwrap().len(), 20);
    }

    #[test]
    fn twins_follow_their_source() {
        let spec = SplitSpec::single_source(DatasetId::Eyepacs, vec![DatasetId::Aptos]);
        let s = build_splits(&multi_manifest(), &spec).unwrap();
        let src_in_train = s.train.iter().any(|r| r.image_path.as_path() == std::path::Path::new("0_0.png"));
        let twin_in_train = s.train.iter().any(|r| r.is_blurred());
        assert_eq!(src_in_train, twin_in_train);
        assert!(s.val.iter().chain(s.tests.iter().flat_map(|t| &t.records)).all(|r| !r.is_blurred()));
    }

    #[test]
    fn overlap_and_empty_train_are_errors() {
        let spec = SplitSpec::single_source(DatasetId::Eyepacs, vec![DatasetId::Eyepacs]);
        assert!(build_splits(&multi_manifest(), &spec).unwrap_err().to_string().contains("overlap"));
        let spec = SplitSpec::single_source(DatasetId::Other("nothing".into()), vec![]);
        assert!(build_splits(&multi_manifest(), &spec).is_err());
    }

    #[test]
    fn reject_quality_can_be_dropped() {
        let mut m = camera_manifest();
        for r in m.records.iter_mut().take(50) {
            r.quality = Some(Quality::Reject);
        }
        let mut spec = SplitSpec::camera_split();
        spec.drop_reject_quality = true;
        let s = build_splits(&m, &spec).unwrap();
        assert!(s.train.iter().chain(&s.val).all(|r| r.quality != Some(Quality::Reject)));
        assert_eq!(s.train.len() + s.val.len(), 30);
    }

    #[test]
    fn in_domain_test_is_carved_from_pool() {
        let mut spec = SplitSpec::camera_split();
        spec.in_domain_test_fraction = 0.2;
        let s = build_splits(&camera_manifest(), &spec).unwrap();
        assert_eq!(s.tests[0].name, "in_domain");
        assert_eq!(s.tests[0].records.len(), 12);
        assert_eq!(s.train.len() + s.val.len(), 48);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn splits_disjoint_and_deterministic(
                seed in 0u64..1000,
                val in 0.05f64..0.5,
                cams in proptest::collection::vec(0usize..5, 20..80),
            ) {
                let all = [CameraId::A, CameraId::B, CameraId::C, CameraId::D, CameraId::E];
                let records: Vec<_> = cams.iter().enumerate()
                    .map(|(i, &c)| rec(&format!("r{i}"), DatasetId::Eyepacs, Some(all[c]), (i % 5) as u8))
                    .collect();
                let m = DatasetManifest::new(records, default_label_maps()).unwrap();
                let mut spec = SplitSpec::camera_split();
                spec.seed = seed;
                spec.val_fraction = val;
                match build_splits(&m, &spec) {
                    Ok(s) => {
                        let again = build_splits(&m, &spec).unwrap();
                        prop_assert_eq!(&s, &again);
                        for a in &s.train {
                            prop_assert!(a.check_invariants().is_ok());
                            prop_assert!(!s.val.iter().any(|b| b.image_path == a.image_path));
                            for t in &s.tests {
                                prop_assert!(!t.records.iter().any(|b| b.image_path == a.image_path));
                            }
                        }
                    }
                    Err(e) => prop_assert!(matches!(e, Error::Split(_))),
                }
            }
        }
    }
}
