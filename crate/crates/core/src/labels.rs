//! Mapping of dataset taxonomies onto the 15 classes shared by Cityscapes,
//! ApolloScape and CamVid. Source ids without a shared class map to
//! [`IGNORE`].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mtc::LabelVideo;
use crate::IGNORE;

pub const NUM_OVERLAP_CLASSES: usize = 15;

pub const OVERLAP_CLASSES: [&str; NUM_OVERLAP_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "sky",
    "person",
    "rider",
    "car",
    "truck_bus",
    "motorcycle",
];

/// `(overlap id, cityscapes train ids, apolloscape train ids, camvid ids)`.
type Row = (u8, &'static [u8], &'static [u8], &'static [u8]);

const TABLE: [Row; NUM_OVERLAP_CLASSES] = [
    (0, &[0], &[9], &[17]),
    (1, &[1], &[10], &[19]),
    (2, &[2], &[20], &[4]),
    (3, &[3], &[17], &[30]),
    (4, &[4], &[13], &[9]),
    (5, &[5], &[15], &[8]),
    (6, &[6], &[14], &[24]),
    (7, &[7], &[16], &[20]),
    (8, &[8], &[21], &[26, 29]),
    (9, &[10], &[0], &[21]),
    (10, &[11], &[4], &[16]),
    (11, &[12], &[5], &[2]),
    (12, &[13], &[1], &[5]),
    (13, &[14, 15], &[6, 7], &[27]),
    (14, &[17], &[2], &[13]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Cityscapes,
    ApolloScape,
    CamVid,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Cityscapes, Dataset::ApolloScape, Dataset::CamVid];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Cityscapes => "cityscapes",
            Dataset::ApolloScape => "apolloscape",
            Dataset::CamVid => "camvid",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownDataset(name.to_string()))
    }
}

/// Lookup from source ids to overlap ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    pub dataset: String,
    map: [u8; 256],
}

impl MappingTable {
    /// Builds a table from `(source id, overlap id)` pairs. Overlap ids must be
    /// below 15 or the ignore id; a source id may appear only once.
    pub fn from_pairs(dataset: impl Into<String>, pairs: &[(u8, u8)]) -> Result<Self> {
        let mut map = [IGNORE; 256];
        let mut seen = [false; 256];
        for &(src, dst) in pairs {
            if dst != IGNORE && dst as usize >= NUM_OVERLAP_CLASSES {
                return Err(Error::InvalidArgument(format!(
                    "source id {src} maps to {dst}, outside the {NUM_OVERLAP_CLASSES} shared classes"
                )));
            }
            if seen[src as usize] {
                return Err(Error::InvalidArgument(format!("source id {src} mapped twice")));
            }
            seen[src as usize] = true;
            map[src as usize] = dst;
        }
        Ok(Self {
            dataset: dataset.into(),
            map,
        })
    }

    /// Maps each of the 15 shared classes to itself.
    pub fn identity() -> Self {
        let pairs: Vec<(u8, u8)> = (0..NUM_OVERLAP_CLASSES as u8).map(|k| (k, k)).collect();
        Self::from_pairs("overlap", &pairs).expect("identity table")
    }

    #[inline]
    pub fn lookup(&self, src: u8) -> u8 {
        self.map[src as usize]
    }

    /// Whether `src` has an explicit entry (including the ignore id itself).
    pub fn contains(&self, src: u8) -> bool {
        src == IGNORE || self.map[src as usize] != IGNORE
    }

    /// Explicit entries in source-id order.
    pub fn pairs(&self) -> Vec<(u8, u8)> {
        (0..=255u8)
            .filter(|&s| s != IGNORE && self.map[s as usize] != IGNORE)
            .map(|s| (s, self.map[s as usize]))
            .collect()
    }
}

/// The built-in table for a dataset.
pub fn builtin_mapping(dataset: Dataset) -> MappingTable {
    let pairs: Vec<(u8, u8)> = TABLE
        .iter()
        .flat_map(|&(overlap, cs, ap, cv)| {
            let ids = match dataset {
                Dataset::Cityscapes => cs,
                Dataset::ApolloScape => ap,
                Dataset::CamVid => cv,
            };
            ids.iter().map(move |&s| (s, overlap))
        })
        .collect();
    MappingTable::from_pairs(dataset.name(), &pairs).expect("built-in table is valid")
}

pub fn builtin_mapping_by_name(name: &str) -> Result<MappingTable> {
    Dataset::from_name(name).map(builtin_mapping)
}

/// Remaps every label; ids without an entry become [`IGNORE`].
pub fn remap_labels(labels: &[u8], table: &MappingTable) -> Vec<u8> {
    labels.iter().map(|&l| table.lookup(l)).collect()
}

/// Like [`remap_labels`] but fails on the first id without an entry.
pub fn remap_labels_strict(labels: &[u8], table: &MappingTable) -> Result<Vec<u8>> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if table.contains(l) {
                Ok(table.lookup(l))
            } else {
                Err(Error::InvalidArgument(format!(
                    "label {l} at pixel {i} has no entry in the {} table",
                    table.dataset
                )))
            }
        })
        .collect()
}

pub fn remap(video: &LabelVideo, table: &MappingTable) -> LabelVideo {
    LabelVideo {
        labels: remap_labels(&video.labels, table),
        ..video.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cityscapes_examples() {
        let t = builtin_mapping(Dataset::Cityscapes);
        assert_eq!(t.lookup(0), 0);
        assert_eq!(t.lookup(14), 13);
        assert_eq!(t.lookup(15), 13);
        assert_eq!(t.lookup(10), 9);
        // terrain, train, bicycle have no shared class
        assert_eq!(t.lookup(9), IGNORE);
        assert_eq!(t.lookup(16), IGNORE);
        assert_eq!(t.lookup(18), IGNORE);
    }

    #[test]
    fn merges() {
        let a = builtin_mapping(Dataset::ApolloScape);
        assert_eq!((a.lookup(6), a.lookup(7)), (13, 13));
        let c = builtin_mapping(Dataset::CamVid);
        assert_eq!((c.lookup(26), c.lookup(29)), (8, 8));
    }

    #[test]
    fn remap_video() {
        let t = builtin_mapping(Dataset::Cityscapes);
        let v = LabelVideo::new(2, 1, 3, vec![IGNORE; 6]).unwrap();
        assert_eq!(remap(&v, &t), v);
        let v = LabelVideo::new(1, 1, 3, vec![10, 10, 10]).unwrap();
        assert_eq!(remap(&v, &t).labels, vec![9, 9, 9]);
    }

    #[test]
    fn strict_mode_rejects_unknown() {
        let t = builtin_mapping(Dataset::CamVid);
        assert!(remap_labels_strict(&[17, IGNORE], &t).is_ok());
        assert!(remap_labels_strict(&[17, 3], &t).is_err());
    }

    #[test]
    fn identity_is_idempotent() {
        let id = MappingTable::identity();
        let v: Vec<u8> = (0..15).chain([IGNORE]).collect();
        assert_eq!(remap_labels(&v, &id), v);
        assert_eq!(remap_labels(&remap_labels(&v, &id), &id), v);
    }

    #[test]
    fn from_pairs_validation() {
        assert!(MappingTable::from_pairs("x", &[(3, 15)]).is_err());
        assert!(MappingTable::from_pairs("x", &[(3, 1), (3, 2)]).is_err());
        assert!(MappingTable::from_pairs("x", &[(3, IGNORE)]).is_ok());
        assert!(builtin_mapping_by_name("kitti360").is_err());
        assert_eq!(builtin_mapping_by_name("CamVid").unwrap().dataset, "camvid");
    }
}
