//! Zero-shot datasets: types, synthetic generation, on-disk format, batching.

mod io;
mod synthetic;
pub mod tzf;

pub use io::{load_dataset, save_dataset, Manifest, SplitEntry, Splits, MANIFEST_FILE};
pub(crate) use io::{read_json as read_json_file, write_json as write_json_file};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::decoder::SemanticAttributeMatrix;
use crate::error::{Error, Result};
use crate::geometry::GridLayout;
use crate::numeric::{Matrix, Rng};
use crate::objectives::ClassAttributeMatrix;

/// One image: flattened `HW x D_in` grid features and its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    pub train: Vec<Example>,
    pub test_seen: Vec<Example>,
    pub test_unseen: Vec<Example>,
    pub classes: ClassAttributeMatrix,
    pub v_a: SemanticAttributeMatrix,
    pub layout: GridLayout,
    /// Grid cell carrying each attribute's signal, when known.
    pub planted_cells: Option<Vec<usize>>,
}

impl ZslDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::TestSeen => &self.test_seen,
            Split::TestUnseen => &self.test_unseen,
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.classes.num_attributes()
    }

    pub fn d_in(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test_seen)
            .chain(&self.test_unseen)
            .next()
            .map_or(0, |e| e.features.cols())
    }

    /// Checks every structural invariant of the dataset.
    pub fn validate(&self) -> Result<()> {
        let a = self.classes.num_attributes();
        if self.v_a.num_attributes() != a {
            return Err(Error::invalid(format!(
                "v_A has {} rows but Z has {a} attributes",
                self.v_a.num_attributes()
            )));
        }
        let cells = self.layout.num_cells();
        let d_in = self.d_in();
        let n_classes = self.classes.num_classes();
        let mut has_test = vec![false; n_classes];
        for split in [Split::Train, Split::TestSeen, Split::TestUnseen] {
            for (i, ex) in self.split(split).iter().enumerate() {
                if ex.features.shape() != (cells, d_in) {
                    return Err(Error::invalid(format!(
                        "{} example {i}: features {:?}, expected {:?}",
                        split.name(),
                        ex.features.shape(),
                        (cells, d_in)
                    )));
                }
                if ex.label >= n_classes {
                    return Err(Error::invalid(format!(
                        "{} example {i}: label {} out of range ({n_classes} classes)",
                        split.name(),
                        ex.label
                    )));
                }
                let unseen = self.classes.is_unseen(ex.label);
                let wants_unseen = split == Split::TestUnseen;
                if unseen != wants_unseen {
                    return Err(Error::invalid(format!(
                        "{} example {i}: class {} is {}",
                        split.name(),
                        ex.label,
                        if unseen { "unseen" } else { "seen" }
                    )));
                }
                if split != Split::Train {
                    has_test[ex.label] = true;
                }
            }
        }
        if let Some(c) = has_test.iter().position(|&t| !t) {
            return Err(Error::invalid(format!("class {c} has no test example")));
        }
        if let Some(planted) = &self.planted_cells {
            if planted.len() != a || planted.iter().any(|&c| c >= cells) {
                return Err(Error::invalid("planted cells do not match attributes and grid"));
            }
        }
        Ok(())
    }
}

/// Shuffled index batches over `n` examples; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
