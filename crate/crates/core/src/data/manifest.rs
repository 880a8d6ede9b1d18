use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Relative to the dataset directory, `/`-separated.
    pub path: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// Image list of a dataset plus the per-channel statistics used to
/// normalize pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl DatasetManifest {
    /// Checks the retrieval protocol: train and test identities are disjoint
    /// and every query identity has a gallery image from another camera.
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data(format!(
                "invalid channel statistics mean={:?} std={:?}",
                self.mean, self.std
            )));
        }
        let train: BTreeSet<u32> = self.ids_in(Split::Train).collect();
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.split != Split::Train && train.contains(&r.identity))
        {
            return Err(Error::Data(format!(
                "identity {} appears in both train and {} ({})",
                r.identity,
                r.split.as_str(),
                r.path
            )));
        }
        let mut gallery_cams: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.split == Split::Gallery) {
            gallery_cams.entry(r.identity).or_default().insert(r.camera);
        }
        for q in self.records.iter().filter(|r| r.split == Split::Query) {
            let ok = gallery_cams
                .get(&q.identity)
                .is_some_and(|cams| cams.iter().any(|&c| c != q.camera));
            if !ok {
                return Err(Error::Data(format!(
                    "query {} (identity {}, camera {}) has no gallery match from another camera",
                    q.path, q.identity, q.camera
                )));
            }
        }
        Ok(())
    }

    fn ids_in(&self, split: Split) -> impl Iterator<Item = u32> + '_ {
        self.records
            .iter()
            .filter(move |r| r.split == split)
            .map(|r| r.identity)
    }

    /// Indices of the records in `split`, in manifest order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sorted distinct training identities; position = classifier label.
    pub fn train_identities(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.ids_in(Split::Train).collect();
        set.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn rec(id: u32, cam: u32, split: Split) -> ManifestRecord {
        ManifestRecord {
            path: format!("{}/{id}_{cam}.ppm", split.as_str()),
            identity: id,
            camera: cam,
            split,
        }
    }

    fn manifest(records: Vec<ManifestRecord>) -> DatasetManifest {
        DatasetManifest {
            records,
            mean: [0.5; 3],
            std: [0.2; 3],
        }
    }

    #[test]
    fn valid_manifest_passes() {
        let m = manifest(vec![
            rec(0, 0, Split::Train),
            rec(0, 1, Split::Train),
            rec(5, 0, Split::Query),
            rec(5, 1, Split::Gallery),
        ]);
        m.validate().unwrap();
        assert_eq!(m.train_identities(), vec![0]);
        assert_eq!(m.indices(Split::Gallery), vec![3]);
    }

    #[test]
    fn overlapping_identities_are_rejected() {
        let m = manifest(vec![rec(0, 0, Split::Train), rec(0, 0, Split::Query), rec(0, 1, Split::Gallery)]);
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("identity 0"), "{e}");
    }

    #[test]
    fn same_camera_only_gallery_is_rejected() {
        let m = manifest(vec![rec(1, 0, Split::Train), rec(5, 0, Split::Query), rec(5, 0, Split::Gallery)]);
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }
}
