use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{tzf, Example, Split, ZslDataset};
use crate::decoder::SemanticAttributeMatrix;
use crate::error::{Error, Result};
use crate::geometry::GridLayout;
use crate::objectives::ClassAttributeMatrix;

pub const MANIFEST_FILE: &str = "manifest";
const Z_FILE: &str = "Z.bin";
const VA_FILE: &str = "vA.bin";
const FEATURE_DIR: &str = "features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub feature_file: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<SplitEntry>,
    pub test_seen: Vec<SplitEntry>,
    pub test_unseen: Vec<SplitEntry>,
}

impl Splits {
    fn get(&self, split: Split) -> &[SplitEntry] {
        match split {
            Split::Train => &self.train,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseen => &self.test_unseen,
        }
    }
}

/// Dataset directory manifest (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n_classes: usize,
    pub n_seen: usize,
    #[serde(rename = "A")]
    pub n_attributes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub d_in: usize,
    pub d_a: usize,
    pub seen_ids: Vec<usize>,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_cells: Option<Vec<usize>>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &ZslDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    create_dir(&dir.join(FEATURE_DIR))?;
    tzf::write(&dir.join(Z_FILE), ds.classes.matrix())?;
    tzf::write(&dir.join(VA_FILE), ds.v_a.matrix())?;

    let write_split = |split: Split| -> Result<Vec<SplitEntry>> {
        ds.split(split)
            .iter()
            .enumerate()
            .map(|(i, ex)| {
                let rel = format!("{FEATURE_DIR}/{}_{i:05}.bin", split.name());
                tzf::write(&dir.join(&rel), &ex.features)?;
                Ok(SplitEntry {
                    feature_file: rel,
                    label: ex.label,
                })
            })
            .collect()
    };
    let splits = Splits {
        train: write_split(Split::Train)?,
        test_seen: write_split(Split::TestSeen)?,
        test_unseen: write_split(Split::TestUnseen)?,
    };
    let manifest = Manifest {
        version: 1,
        n_classes: ds.classes.num_classes(),
        n_seen: ds.classes.seen_ids().len(),
        n_attributes: ds.num_attributes(),
        grid_rows: ds.layout.rows(),
        grid_cols: ds.layout.cols(),
        d_in: ds.d_in(),
        d_a: ds.v_a.dim(),
        seen_ids: ds.classes.seen_ids().to_vec(),
        splits,
        planted_cells: ds.planted_cells.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_dataset(dir: &Path) -> Result<ZslDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: Manifest = read_json(&manifest_path)?;
    if m.version != 1 {
        return Err(Error::format(&manifest_path, format!("unsupported version {}", m.version)));
    }

    let z_path = dir.join(Z_FILE);
    let z = tzf::read(&z_path)?;
    if z.rows() != m.n_classes || z.cols() != m.n_attributes {
        return Err(Error::format(
            &z_path,
            format!(
                "shape {:?} disagrees with manifest ({} classes, {} attributes)",
                z.shape(),
                m.n_classes,
                m.n_attributes
            ),
        ));
    }
    let va_path = dir.join(VA_FILE);
    let va = tzf::read(&va_path)?;
    if va.shape() != (m.n_attributes, m.d_a) {
        return Err(Error::format(
            &va_path,
            format!("shape {:?}, manifest expects {:?}", va.shape(), (m.n_attributes, m.d_a)),
        ));
    }
    if m.seen_ids.len() != m.n_seen {
        return Err(Error::format(
            &manifest_path,
            format!("n_seen = {} but {} seen_ids listed", m.n_seen, m.seen_ids.len()),
        ));
    }
    let classes = ClassAttributeMatrix::new(z, m.seen_ids.clone())?;
    let v_a = SemanticAttributeMatrix::new(va)?;

    let cells = m.grid_rows * m.grid_cols;
    let load_split = |split: Split| -> Result<Vec<Example>> {
        m.splits
            .get(split)
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                if entry.label >= m.n_classes {
                    return Err(Error::format(
                        &manifest_path,
                        format!(
                            "{} entry {i}: label {} out of range ({} classes)",
                            split.name(),
                            entry.label,
                            m.n_classes
                        ),
                    ));
                }
                let path: PathBuf = dir.join(&entry.feature_file);
                let features = tzf::read(&path)?;
                if features.shape() != (cells, m.d_in) {
                    return Err(Error::format(
                        &path,
                        format!("shape {:?}, manifest expects {:?}", features.shape(), (cells, m.d_in)),
                    ));
                }
                Ok(Example {
                    features,
                    label: entry.label,
                })
            })
            .collect()
    };

    let ds = ZslDataset {
        train: load_split(Split::Train)?,
        test_seen: load_split(Split::TestSeen)?,
        test_unseen: load_split(Split::TestUnseen)?,
        classes,
        v_a,
        layout: GridLayout::unit(m.grid_rows, m.grid_cols),
        planted_cells: m.planted_cells,
    };
    ds.validate()?;
    Ok(ds)
}
