//! Pairwise region geometry bias for the encoder attention.
//!
//! Each grid cell is treated as a box with corners `(v_min, t_min)` and
//! `(v_max, t_max)`. For a pair of cells the relative geometry is
//! `r_ij = (log(|Δv_cen| / w_i), log(|Δt_cen| / h_i))`, with the absolute
//! center offsets clamped from below so aligned cells stay finite. The bias is
//! `G_ij = ReLU(w_gᵀ ReLU(FC(r_ij)))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Rng, Var};

/// Width of the relative geometry feature `r_ij`.
pub const GEOMETRY_FEATURES: usize = 2;

pub const DEFAULT_CLAMP_EPS: f64 = 1e-3;

/// Corner coordinates of one cell in lattice units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellBox {
    pub v_min: f64,
    pub t_min: f64,
    pub v_max: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry {
    pub v_cen: f64,
    pub t_cen: f64,
    pub width: f64,
    pub height: f64,
}

/// Row-major lattice of cells; cell `i` sits at `(i / cols, i % cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    rows: usize,
    cols: usize,
    boxes: Vec<CellBox>,
}

impl GridLayout {
    /// Unit cells: cell `(r, c)` spans `v = c`, `t = r`, so `w = h = 1`.
    pub fn unit(rows: usize, cols: usize) -> Self {
        let boxes = (0..rows * cols)
            .map(|i| {
                let (r, c) = ((i / cols) as f64, (i % cols) as f64);
                CellBox {
                    v_min: c,
                    t_min: r,
                    v_max: c,
                    t_max: r,
                }
            })
            .collect();
        Self { rows, cols, boxes }
    }

    pub fn with_boxes(rows: usize, cols: usize, boxes: Vec<CellBox>) -> Result<Self> {
        if boxes.len() != rows * cols {
            return Err(Error::invalid(format!(
                "layout {rows}x{cols} needs {} boxes, got {}",
                rows * cols,
                boxes.len()
            )));
        }
        if let Some((i, _)) = boxes
            .iter()
            .enumerate()
            .find(|(_, b)| !(b.v_min <= b.v_max && b.t_min <= b.t_max))
        {
            return Err(Error::invalid(format!("cell {i} has inverted corners")));
        }
        Ok(Self { rows, cols, boxes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_cells(&self) -> usize {
        self.boxes.len()
    }

    pub fn center_and_size(&self, i: usize) -> Result<CellGeometry> {
        let b = self.boxes.get(i).ok_or(Error::Index {
            what: "grid cell",
            index: i,
            len: self.boxes.len(),
        })?;
        Ok(CellGeometry {
            v_cen: (b.v_min + b.v_max) / 2.0,
            t_cen: (b.t_min + b.t_max) / 2.0,
            width: b.v_max - b.v_min + 1.0,
            height: b.t_max - b.t_min + 1.0,
        })
    }

    pub fn relative_geometry(&self, i: usize, j: usize, clamp_eps: f64) -> Result<[f64; GEOMETRY_FEATURES]> {
        let a = self.center_and_size(i)?;
        let b = self.center_and_size(j)?;
        let dv = (a.v_cen - b.v_cen).abs().max(clamp_eps);
        let dt = (a.t_cen - b.t_cen).abs().max(clamp_eps);
        Ok([(dv / a.width).ln(), (dt / a.height).ln()])
    }

    /// All `r_ij` stacked as rows in `(i, j)` row-major order: `(HW·HW) x 2`.
    pub fn pair_features(&self, clamp_eps: f64) -> Matrix {
        let n = self.num_cells();
        let mut out = Matrix::zeros(n * n, GEOMETRY_FEATURES);
        for i in 0..n {
            for j in 0..n {
                let r = self.relative_geometry(i, j, clamp_eps).expect("indices in range");
                out.row_mut(i * n + j).copy_from_slice(&r);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryParams {
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub w_g: ParamId,
    pub d_g: usize,
}

impl GeometryParams {
    pub fn init(store: &mut ParamStore, d_g: usize, rng: &mut Rng) -> Self {
        Self {
            fc_weight: store.add_xavier("geometry.fc_weight", GEOMETRY_FEATURES, d_g, rng),
            fc_bias: store.add_zeros("geometry.fc_bias", 1, d_g),
            w_g: store.add_xavier("geometry.w_g", d_g, 1, rng),
            d_g,
        }
    }

    /// Records `G` (`HW x HW`) on the graph from precomputed pair features.
    pub fn forward(&self, g: &mut Graph, pair_features: &Matrix) -> Result<Var> {
        let n = (pair_features.rows() as f64).sqrt().round() as usize;
        if n * n != pair_features.rows() || pair_features.cols() != GEOMETRY_FEATURES {
            return Err(Error::shape(
                "geometry_matrix",
                pair_features.shape(),
                (n * n, GEOMETRY_FEATURES),
            ));
        }
        let r = g.constant(pair_features.clone());
        let w = g.param(self.fc_weight);
        let b = g.param(self.fc_bias);
        let wg = g.param(self.w_g);
        let h = g.matmul(r, w)?;
        let h = g.add_row(h, b)?;
        let h = g.relu(h);
        let s = g.matmul(h, wg)?;
        let s = g.relu(s);
        g.reshape(s, n, n)
    }
}

/// Evaluates `G` for a layout outside any training graph.
pub fn geometry_matrix(layout: &GridLayout, store: &ParamStore, params: &GeometryParams, clamp_eps: f64) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let out = params.forward(&mut g, &layout.pair_features(clamp_eps))?;
    Ok(g.value(out).clone())
}
