//! Visual-semantic embedding, the training losses and calibrated prediction.
//!
//! Each loss exists twice: as a graph builder used during training and as a
//! plain function over `f64` slices. Tests check one against the other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, Graph, Matrix, ParamId, ParamStore, Rng, Var};

/// Embedding matrix `W` (`d_a x d_model`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsenParams {
    pub w: ParamId,
}

impl VsenParams {
    pub fn init(store: &mut ParamStore, d_a: usize, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.add_xavier("vsen.w", d_a, d_model, rng),
        }
    }

    /// `ψ[a] = v_aᵀ W f_a` as an `A x 1` column.
    pub fn forward(&self, g: &mut Graph, features: Var, v_a: Var) -> Result<Var> {
        let w = g.param(self.w);
        let projected = g.matmul(v_a, w)?;
        g.row_dot(projected, features)
    }
}

pub fn embed_psi(features: &Matrix, v_a: &Matrix, store: &ParamStore, params: &VsenParams) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let f = g.constant(features.clone());
    let v = g.constant(v_a.clone());
    let psi = params.forward(&mut g, f, v)?;
    Ok(g.value(psi).data().to_vec())
}

/// Class signatures `z^c` with a disjoint seen/unseen partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAttributeMatrix {
    z: Matrix,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl ClassAttributeMatrix {
    /// Every class not listed in `seen` is unseen.
    pub fn new(z: Matrix, seen: Vec<usize>) -> Result<Self> {
        let n = z.rows();
        let mut is_seen = vec![false; n];
        for &c in &seen {
            if c >= n {
                return Err(Error::invalid(format!("seen class {c} out of range ({n} classes)")));
            }
            if is_seen[c] {
                return Err(Error::invalid(format!("seen class {c} listed twice")));
            }
            is_seen[c] = true;
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("class attribute matrix".into()));
        }
        let mut seen = seen;
        seen.sort_unstable();
        let unseen = (0..n).filter(|&c| !is_seen[c]).collect();
        Ok(Self { z, seen, unseen })
    }

    pub fn num_classes(&self) -> usize {
        self.z.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.z.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.z
    }

    pub fn signature(&self, class: usize) -> &[f64] {
        self.z.row(class)
    }

    pub fn seen_ids(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen_ids(&self) -> &[usize] {
        &self.unseen
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.binary_search(&class).is_ok()
    }

    /// `+1` for unseen classes, `-1` for seen ones.
    pub fn indicator(&self, class: usize) -> f64 {
        if self.is_unseen(class) {
            1.0
        } else {
            -1.0
        }
    }

    fn seen_position(&self, class: usize) -> Result<usize> {
        self.seen
            .binary_search(&class)
            .map_err(|_| Error::invalid(format!("label {class} is not a seen class")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ar: f64,
    pub lambda_sc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ar: 0.005,
            lambda_sc: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ace: f64,
    pub ar: f64,
    pub sc: f64,
}

pub fn loss_total(components: &LossComponents, weights: &LossWeights) -> f64 {
    components.ace + weights.lambda_ar * components.ar + weights.lambda_sc * components.sc
}

/// `‖ψ − z‖²` for one sample.
pub fn loss_ar(psi: &[f64], z: &[f64]) -> Result<f64> {
    if psi.len() != z.len() {
        return Err(Error::shape("loss_ar", (1, psi.len()), (1, z.len())));
    }
    Ok(psi.iter().zip(z).map(|(p, t)| (p - t) * (p - t)).sum())
}

fn logits(psi: &[f64], classes: &ClassAttributeMatrix, ids: &[usize]) -> Result<Vec<f64>> {
    if psi.len() != classes.num_attributes() {
        return Err(Error::shape("class logits", (1, psi.len()), (1, classes.num_attributes())));
    }
    Ok(ids
        .iter()
        .map(|&c| crate::numeric::dot(psi, classes.signature(c)))
        .collect())
}

/// Cross-entropy over seen classes, averaged over the batch.
pub fn loss_ace(psi_batch: &[Vec<f64>], labels: &[usize], classes: &ClassAttributeMatrix) -> Result<f64> {
    check_batch(psi_batch, labels)?;
    let mut total = 0.0;
    for (psi, &label) in psi_batch.iter().zip(labels) {
        let pos = classes.seen_position(label)?;
        let l = logits(psi, classes, classes.seen_ids())?;
        total += log_sum_exp(&l) - l[pos];
    }
    Ok(total / psi_batch.len() as f64)
}

/// Self-calibration: negative log-probability of every unseen class under a
/// softmax over all classes with `±1` added to the logits.
pub fn loss_sc(psi_batch: &[Vec<f64>], classes: &ClassAttributeMatrix) -> Result<f64> {
    if classes.unseen_ids().is_empty() {
        return Err(Error::invalid("self-calibration needs at least one unseen class"));
    }
    if psi_batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let all: Vec<usize> = (0..classes.num_classes()).collect();
    let mut total = 0.0;
    for psi in psi_batch {
        let l: Vec<f64> = logits(psi, classes, &all)?
            .into_iter()
            .zip(&all)
            .map(|(v, &c)| v + classes.indicator(c))
            .collect();
        let lse = log_sum_exp(&l);
        total += classes.unseen_ids().iter().map(|&c| lse - l[c]).sum::<f64>();
    }
    Ok(total / psi_batch.len() as f64)
}

fn check_batch(psi_batch: &[Vec<f64>], labels: &[usize]) -> Result<()> {
    if psi_batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if psi_batch.len() != labels.len() {
        return Err(Error::shape("labels", (psi_batch.len(), 1), (labels.len(), 1)));
    }
    Ok(())
}

/// Graph form of the three losses for a batch `Ψ` (`n x A`).
///
/// Returned vars are `(L_ACE, L_AR, L_SC)`; `L_SC` is `None` when there are
/// no unseen classes.
pub fn loss_graph(
    g: &mut Graph,
    psi: Var,
    labels: &[usize],
    classes: &ClassAttributeMatrix,
) -> Result<(Var, Var, Option<Var>)> {
    let (n, a) = g.shape(psi);
    if n != labels.len() || n == 0 {
        return Err(Error::shape("labels", (n, 1), (labels.len(), 1)));
    }
    if a != classes.num_attributes() {
        return Err(Error::shape("class logits", (n, a), classes.matrix().shape()));
    }
    let inv_n = 1.0 / n as f64;

    let z_seen = classes.matrix().select_rows(classes.seen_ids())?;
    let mut onehot = Matrix::zeros(n, z_seen.rows());
    for (i, &label) in labels.iter().enumerate() {
        onehot.set(i, classes.seen_position(label)?, -inv_n);
    }
    let zs = g.constant(z_seen);
    let seen_logits = g.matmul_t(psi, zs)?;
    let seen_log_probs = g.log_softmax_rows(seen_logits);
    let ace = g.sum_mul_const(seen_log_probs, onehot)?;

    let targets = classes.matrix().select_rows(labels)?;
    let t = g.constant(targets);
    let diff = g.sub(psi, t)?;
    let ar = g.sum_squares(diff);
    let ar = g.scale(ar, inv_n);

    let sc = if classes.unseen_ids().is_empty() {
        None
    } else {
        let c = classes.num_classes();
        let zall = g.constant(classes.matrix().clone());
        let all_logits = g.matmul_t(psi, zall)?;
        let offsets = Matrix::from_fn(1, c, |_, k| classes.indicator(k));
        let off = g.constant(offsets);
        let calibrated = g.add_row(all_logits, off)?;
        let log_probs = g.log_softmax_rows(calibrated);
        let mask = Matrix::from_fn(n, c, |_, k| if classes.is_unseen(k) { -inv_n } else { 0.0 });
        Some(g.sum_mul_const(log_probs, mask)?)
    };
    Ok((ace, ar, sc))
}

/// `argmax_c ψ·z^c + γ·I[c ∈ C^u]` over `candidates`; ties go to the smallest id.
pub fn predict(psi: &[f64], classes: &ClassAttributeMatrix, candidates: &[usize], gamma: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate classes"));
    }
    let scores = logits(psi, classes, candidates)?;
    let mut best: Option<(usize, f64)> = None;
    for (&c, s) in candidates.iter().zip(scores) {
        let s = s + gamma * classes.indicator(c);
        best = match best {
            Some((bc, bs)) if bs > s || (bs == s && bc < c) => Some((bc, bs)),
            _ => Some((c, s)),
        };
    }
    Ok(best.expect("non-empty").0)
}
