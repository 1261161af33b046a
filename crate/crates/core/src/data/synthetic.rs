use serde::{Deserialize, Serialize};

use super::{tzf::quantize, Example, ZslDataset};
use crate::decoder::SemanticAttributeMatrix;
use crate::error::{Error, Result};
use crate::geometry::GridLayout;
use crate::numeric::{Matrix, Rng};
use crate::objectives::ClassAttributeMatrix;

/// Parameters of the planted-attribute benchmark.
///
/// Attribute `a` owns one grid cell and one random unit direction `u_a` in
/// feature space. An image of class `c` carries `signal * z^c_a * u_a` plus
/// Gaussian noise in that cell and pure noise everywhere else. Class
/// signatures are binary with `active_per_class` ones and pairwise Hamming
/// distance at least `min_hamming`, so unseen classes are new combinations of
/// the same attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub n_attributes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub d_in: usize,
    pub d_a: usize,
    /// Training images per seen class.
    pub examples_per_class: usize,
    /// Test images per class, seen and unseen alike.
    pub test_per_class: usize,
    pub active_per_class: usize,
    pub min_hamming: usize,
    pub signal: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_seen: 8,
            n_unseen: 4,
            n_attributes: 12,
            grid_rows: 4,
            grid_cols: 4,
            d_in: 64,
            d_a: 16,
            examples_per_class: 50,
            test_per_class: 10,
            active_per_class: 6,
            min_hamming: 4,
            signal: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_rows * self.grid_cols;
        if self.n_attributes == 0 || self.n_attributes > cells {
            return Err(Error::invalid(format!(
                "{} attributes need distinct cells but the grid has {cells}",
                self.n_attributes
            )));
        }
        if self.n_seen < 2 {
            return Err(Error::invalid("at least two seen classes are required"));
        }
        if self.active_per_class > self.n_attributes {
            return Err(Error::invalid("active_per_class exceeds attribute count"));
        }
        if self.d_in == 0 || self.d_a == 0 || self.test_per_class == 0 || self.examples_per_class == 0 {
            return Err(Error::invalid("dimensions and per-class counts must be positive"));
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::invalid("signal and noise must be finite, noise >= 0"));
        }
        Ok(())
    }
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn signatures(spec: &SyntheticSpec, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    const MAX_DRAWS: usize = 100_000;
    let n = spec.n_seen + spec.n_unseen;
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(n);
    let mut draws = 0;
    while out.len() < n {
        draws += 1;
        if draws > MAX_DRAWS {
            return Err(Error::invalid(format!(
                "could not draw {n} signatures with {} active attributes at Hamming distance {}",
                spec.active_per_class, spec.min_hamming
            )));
        }
        let mut idx: Vec<usize> = (0..spec.n_attributes).collect();
        rng.shuffle(&mut idx);
        let mut sig = vec![false; spec.n_attributes];
        for &a in &idx[..spec.active_per_class] {
            sig[a] = true;
        }
        let far = out
            .iter()
            .all(|o| o.iter().zip(&sig).filter(|(x, y)| x != y).count() >= spec.min_hamming.max(1));
        if far {
            out.push(sig);
        }
    }
    Ok(out
        .into_iter()
        .map(|s| s.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
        .collect())
}

fn image(spec: &SyntheticSpec, signature: &[f64], cells: &[usize], dirs: &[Vec<f64>], rng: &mut Rng) -> Matrix {
    let n_cells = spec.grid_rows * spec.grid_cols;
    let mut m = Matrix::from_fn(n_cells, spec.d_in, |_, _| spec.noise * rng.next_normal());
    for (a, (&cell, dir)) in cells.iter().zip(dirs).enumerate() {
        let amp = spec.signal * signature[a];
        for (v, d) in m.row_mut(cell).iter_mut().zip(dir) {
            *v += amp * d;
        }
    }
    quantize(&m)
}

/// Draws a dataset; identical specs give bit-identical datasets.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<ZslDataset> {
    spec.validate()?;
    let mut root = Rng::new(spec.seed);
    let mut structure = root.fork(1);
    let mut pixels = root.fork(2);

    let mut cells: Vec<usize> = (0..spec.grid_rows * spec.grid_cols).collect();
    structure.shuffle(&mut cells);
    cells.truncate(spec.n_attributes);

    let dirs: Vec<Vec<f64>> = (0..spec.n_attributes)
        .map(|_| unit_vector(spec.d_in, &mut structure))
        .collect();
    let v_rows: Vec<Vec<f64>> = (0..spec.n_attributes)
        .map(|_| unit_vector(spec.d_a, &mut structure))
        .collect();
    let sigs = signatures(spec, &mut structure)?;

    let n_classes = spec.n_seen + spec.n_unseen;
    let z = Matrix::from_rows(&sigs)?;
    let classes = ClassAttributeMatrix::new(z, (0..spec.n_seen).collect())?;
    let v_a = SemanticAttributeMatrix::new(quantize(&Matrix::from_rows(&v_rows)?))?;

    let mut train = Vec::new();
    let mut test_seen = Vec::new();
    let mut test_unseen = Vec::new();
    for c in 0..n_classes {
        let unseen = c >= spec.n_seen;
        if !unseen {
            for _ in 0..spec.examples_per_class {
                let features = image(spec, &sigs[c], &cells, &dirs, &mut pixels);
                train.push(Example { features, label: c });
            }
        }
        for _ in 0..spec.test_per_class {
            let features = image(spec, &sigs[c], &cells, &dirs, &mut pixels);
            let target = if unseen { &mut test_unseen } else { &mut test_seen };
            target.push(Example { features, label: c });
        }
    }

    let ds = ZslDataset {
        train,
        test_seen,
        test_unseen,
        classes,
        v_a,
        layout: GridLayout::unit(spec.grid_rows, spec.grid_cols),
        planted_cells: Some(cells),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            examples_per_class: 3,
            test_per_class: 2,
            d_in: 16,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_probe_recovers_signature() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let ds = generate_synthetic(&spec).unwrap();
        let cells = ds.planted_cells.clone().unwrap();
        // Without noise the planted cell is exactly signal * z_a * u_a, so a
        // projection onto the cell's own content normalizes back to z_a.
        for ex in ds.train.iter().chain(&ds.test_unseen) {
            let z = ds.classes.signature(ex.label);
            for (a, &cell) in cells.iter().enumerate() {
                let row = ex.features.row(cell);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm / spec.signal - z[a]).abs() < 1e-6);
            }
            let planted: std::collections::HashSet<_> = cells.iter().collect();
            for cell in 0..16 {
                if !planted.contains(&cell) {
                    assert!(ex.features.row(cell).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn signatures_are_distinct_and_far_apart() {
        let ds = generate_synthetic(&small()).unwrap();
        let z = ds.classes.matrix();
        for i in 0..z.rows() {
            assert_eq!(z.row(i).iter().sum::<f64>(), 6.0);
            for j in 0..i {
                let d = z.row(i).iter().zip(z.row(j)).filter(|(a, b)| a != b).count();
                assert!(d >= 4, "classes {i} and {j} at distance {d}");
            }
        }
        for &s in ds.classes.seen_ids() {
            for &u in ds.classes.unseen_ids() {
                assert_ne!(z.row(s), z.row(u));
            }
        }
    }

    #[test]
    fn split_membership() {
        let ds = generate_synthetic(&small()).unwrap();
        assert_eq!(ds.train.len(), 8 * 3);
        assert_eq!(ds.test_seen.len(), 8 * 2);
        assert_eq!(ds.test_unseen.len(), 4 * 2);
        assert!(ds.train.iter().all(|e| !ds.classes.is_unseen(e.label)));
        assert!(ds.test_unseen.iter().all(|e| ds.classes.is_unseen(e.label)));
        let cells = ds.planted_cells.unwrap();
        let mut sorted = cells.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
    }

    #[test]
    fn rejects_too_many_attributes() {
        let spec = SyntheticSpec { n_attributes: 17, active_per_class: 6, ..small() };
        assert!(generate_synthetic(&spec).is_err());
        let spec = SyntheticSpec { n_seen: 1, ..small() };
        assert!(generate_synthetic(&spec).is_err());
    }
}
