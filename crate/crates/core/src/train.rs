//! Optimizer, training loop, evaluation metrics and attention dumps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{batches, tzf, Example, ZslDataset};
use crate::error::{Error, Result};
use crate::model::{DataDims, Model};
use crate::numeric::{Graph, Matrix, ParamStore, Rng, Var};
use crate::objectives::{loss_graph, predict, ClassAttributeMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &RunConfig) -> Self {
        Self::new(store, cfg.lr, cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self, index: usize) -> &Matrix {
        &self.velocity[index]
    }
}

/// Momentum SGD with coupled weight decay. Gradients are zeroed afterwards.
/// Nothing is updated if any trainable gradient is non-finite.
pub fn sgd_step(store: &mut ParamStore, opt: &mut OptimizerState) -> Result<()> {
    if opt.velocity.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && !p.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    for (p, v) in store.iter_mut().zip(&mut opt.velocity) {
        if p.frozen {
            continue;
        }
        let (m, wd, lr) = (opt.momentum, opt.weight_decay, opt.lr);
        for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(p.grad.data()).zip(p.value.data_mut()) {
            *vi = m * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    store.zero_grads();
    Ok(())
}

/// One row of the training log; accuracies in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ace: f64,
    pub loss_ar: f64,
    pub loss_sc: f64,
    pub acc: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,loss_total,loss_ace,loss_ar,loss_sc,acc,U,S,H";

pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            l.epoch, l.loss_total, l.loss_ace, l.loss_ar, l.loss_sc, l.acc, l.u, l.s, l.h
        );
    }
    out
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    fs::write(path, epoch_log_csv(logs)).map_err(|e| Error::io(path, e))
}

/// Per-batch loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub ace: f64,
    pub ar: f64,
    pub sc: f64,
}

/// Loss nodes recorded by [`batch_loss_graph`].
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ace: Var,
    pub ar: Var,
    pub sc: Option<Var>,
}

/// Records `L_ACE + λ_AR·L_AR + λ_SC·L_SC` for a batch on `g`. The graph may
/// be backed by any store laid out like the model's.
pub fn batch_loss_graph(
    model: &Model,
    g: &mut Graph,
    examples: &[&Example],
    classes: &ClassAttributeMatrix,
    rng: &mut Rng,
    training: bool,
) -> Result<LossVars> {
    let weights = model.config.loss_weights();
    let bias = model.geometry_bias(g)?;
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = model.forward_image(g, &ex.features, bias, rng, training)?;
        rows.push(g.transpose(out.psi));
    }
    let psi = g.concat_rows(&rows)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let (ace, ar, sc) = loss_graph(g, psi, &labels, classes)?;
    let ar_term = g.scale(ar, weights.lambda_ar);
    let mut total = g.add(ace, ar_term)?;
    if let Some(sc) = sc {
        let term = g.scale(sc, weights.lambda_sc);
        total = g.add(total, term)?;
    }
    Ok(LossVars { total, ace, ar, sc })
}

/// Builds the batch graph, backpropagates `L_total` and adds the gradients to
/// the model's store.
pub fn accumulate_batch_gradients(
    model: &mut Model,
    examples: &[&Example],
    classes: &ClassAttributeMatrix,
    rng: &mut Rng,
    training: bool,
) -> Result<BatchLoss> {
    let (grads, values) = {
        let mut g = Graph::new(&model.store);
        let vars = batch_loss_graph(model, &mut g, examples, classes, rng, training)?;
        let values = BatchLoss {
            total: g.scalar(vars.total),
            ace: g.scalar(vars.ace),
            ar: g.scalar(vars.ar),
            sc: vars.sc.map_or(0.0, |v| g.scalar(v)),
        };
        if !values.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = g.backward(vars.total)?;
        (g.param_gradients(grads), values)
    };
    grads.accumulate_into(&mut model.store);
    Ok(values)
}

/// Trains from a fresh initialization. Returns the model and one log row per
/// epoch; zero epochs returns the initialization.
pub fn train(ds: &ZslDataset, cfg: &RunConfig) -> Result<(Model, Vec<EpochLog>)> {
    ds.validate()?;
    if ds.train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.fork(1);
    let mut shuffle_rng = root.fork(2);
    let mut dropout_rng = root.fork(3);

    let mut model = Model::new(cfg, DataDims::of(ds), &ds.v_a, &mut init_rng)?;
    let mut opt = OptimizerState::from_config(&model.store, cfg);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 4];
        for (b, batch) in batches(ds.train.len(), cfg.batch_size, &mut shuffle_rng)?.iter().enumerate() {
            let examples: Vec<&Example> = batch.iter().map(|&i| &ds.train[i]).collect();
            let loss = accumulate_batch_gradients(&mut model, &examples, &ds.classes, &mut dropout_rng, true)
                .map_err(|e| annotate(e, epoch, b))?;
            sgd_step(&mut model.store, &mut opt).map_err(|e| annotate(e, epoch, b))?;
            let n = examples.len() as f64;
            for (s, v) in sums.iter_mut().zip([loss.total, loss.ace, loss.ar, loss.sc]) {
                *s += n * v;
            }
        }
        let n = ds.train.len() as f64;
        let m = evaluate(&model, ds)?;
        logs.push(EpochLog {
            epoch: epoch + 1,
            loss_total: sums[0] / n,
            loss_ace: sums[1] / n,
            loss_ar: sums[2] / n,
            loss_sc: sums[3] / n,
            acc: m.acc,
            u: m.u,
            s: m.s,
            h: m.h,
        });
    }
    Ok((model, logs))
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GzslMetrics {
    /// CZSL per-class top-1 accuracy over unseen classes.
    pub acc: f64,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Czsl,
    Gzsl,
    Both,
}

impl Setting {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "czsl" => Ok(Setting::Czsl),
            "gzsl" => Ok(Setting::Gzsl),
            "both" => Ok(Setting::Both),
            _ => Err(Error::invalid(format!("unknown setting {name:?}; expected czsl, gzsl or both"))),
        }
    }
}

impl GzslMetrics {
    /// The metric line printed by `eval`.
    pub fn line(&self, setting: Setting) -> String {
        match setting {
            Setting::Czsl => format!("acc={:.1}", self.acc),
            Setting::Gzsl => format!("U={:.1} S={:.1} H={:.1}", self.u, self.s, self.h),
            Setting::Both => format!("acc={:.1} U={:.1} S={:.1} H={:.1}", self.acc, self.u, self.s, self.h),
        }
    }
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s == 0.0 {
        0.0
    } else {
        2.0 * u * s / (u + s)
    }
}

/// Mean over classes of per-class top-1 accuracy, in percent.
/// `pairs` holds `(true label, predicted label)`.
pub fn per_class_accuracy(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no samples to score"));
    }
    let mut tally: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for &(label, pred) in pairs {
        let t = tally.entry(label).or_default();
        t.0 += usize::from(label == pred);
        t.1 += 1;
    }
    let sum: f64 = tally.values().map(|&(hit, n)| hit as f64 / n as f64).sum();
    Ok(100.0 * sum / tally.len() as f64)
}

fn scores(model: &Model, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    examples.iter().map(|e| model.psi(&e.features)).collect()
}

fn score_split(
    psi: &[Vec<f64>],
    examples: &[Example],
    classes: &ClassAttributeMatrix,
    candidates: &[usize],
    gamma: f64,
) -> Result<f64> {
    let pairs = psi
        .iter()
        .zip(examples)
        .map(|(p, e)| Ok((e.label, predict(p, classes, candidates, gamma)?)))
        .collect::<Result<Vec<_>>>()?;
    per_class_accuracy(&pairs)
}

/// CZSL accuracy and GZSL U/S/H on the test splits.
pub fn evaluate(model: &Model, ds: &ZslDataset) -> Result<GzslMetrics> {
    let unseen = scores(model, &ds.test_unseen)?;
    let seen = scores(model, &ds.test_seen)?;
    metrics_from_scores(&unseen, &seen, ds, model.config.gamma)
}

/// Same as [`evaluate`] but only computes what `setting` needs; the other
/// fields are left at zero.
pub fn evaluate_setting(model: &Model, ds: &ZslDataset, setting: Setting) -> Result<GzslMetrics> {
    let gamma = model.config.gamma;
    let classes = &ds.classes;
    let mut m = GzslMetrics::default();
    if ds.test_unseen.is_empty() {
        return Err(Error::invalid("test_unseen split is empty"));
    }
    let unseen = scores(model, &ds.test_unseen)?;
    if setting != Setting::Gzsl {
        m.acc = score_split(&unseen, &ds.test_unseen, classes, classes.unseen_ids(), gamma)?;
    }
    if setting != Setting::Czsl {
        if ds.test_seen.is_empty() {
            return Err(Error::invalid("test_seen split is empty"));
        }
        let seen = scores(model, &ds.test_seen)?;
        let all: Vec<usize> = (0..classes.num_classes()).collect();
        m.u = score_split(&unseen, &ds.test_unseen, classes, &all, gamma)?;
        m.s = score_split(&seen, &ds.test_seen, classes, &all, gamma)?;
        m.h = harmonic_mean(m.u, m.s);
    }
    Ok(m)
}

/// Metrics from precomputed attribute scores for each test split.
pub fn metrics_from_scores(
    unseen_psi: &[Vec<f64>],
    seen_psi: &[Vec<f64>],
    ds: &ZslDataset,
    gamma: f64,
) -> Result<GzslMetrics> {
    if ds.test_unseen.is_empty() || ds.test_seen.is_empty() {
        return Err(Error::invalid("both test splits must be nonempty"));
    }
    let classes = &ds.classes;
    let all: Vec<usize> = (0..classes.num_classes()).collect();
    let acc = score_split(unseen_psi, &ds.test_unseen, classes, classes.unseen_ids(), gamma)?;
    let u = score_split(unseen_psi, &ds.test_unseen, classes, &all, gamma)?;
    let s = score_split(seen_psi, &ds.test_seen, classes, &all, gamma)?;
    Ok(GzslMetrics {
        acc,
        u,
        s,
        h: harmonic_mean(u, s),
    })
}

/// Test images in dump order: seen split first, then unseen.
fn test_images(ds: &ZslDataset) -> impl Iterator<Item = (&'static str, &Example)> {
    ds.test_seen
        .iter()
        .map(|e| ("test_seen", e))
        .chain(ds.test_unseen.iter().map(|e| ("test_unseen", e)))
}

fn argmax(row: &[f64]) -> (usize, f64) {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// Fraction of (test image, active attribute) pairs whose decoder attention
/// peaks at the attribute's planted cell.
pub fn localization_accuracy(model: &Model, ds: &ZslDataset) -> Result<f64> {
    let planted = ds
        .planted_cells
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no planted cells"))?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (_, ex) in test_images(ds) {
        let attn = model
            .infer(&ex.features)?
            .decoder_attention
            .ok_or_else(|| Error::invalid("model has no decoder attention"))?;
        for (a, &cell) in planted.iter().enumerate() {
            if ds.classes.signature(ex.label)[a] > 0.0 {
                total += 1;
                hits += usize::from(argmax(attn.row(a)).0 == cell);
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no active attributes in the test splits"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub image_id: usize,
    pub split: String,
    pub label: usize,
    pub decoder_file: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub encoder_file: Option<String>,
}

pub const DUMP_INDEX_FILE: &str = "index.json";
pub const DUMP_ARGMAX_FILE: &str = "argmax.csv";

fn check_rows_sum_to_one(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Writes decoder (`A x HW`) and encoder (`HW x HW`) attention for up to
/// `limit` test images, an index, and the per-attribute argmax table.
pub fn dump_attention(model: &Model, ds: &ZslDataset, out_dir: &Path, limit: Option<usize>) -> Result<Vec<DumpEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = Vec::new();
    let mut csv = String::from("image_id,attribute_id,argmax_cell,max_weight\n");
    for (id, (split, ex)) in test_images(ds).take(limit.unwrap_or(usize::MAX)).enumerate() {
        let inf = model.infer(&ex.features)?;
        let dec = inf
            .decoder_attention
            .ok_or_else(|| Error::invalid("model has no decoder attention to dump"))?;
        check_rows_sum_to_one(&dec, "decoder attention")?;
        let decoder_file = format!("decoder_{id:05}.bin");
        tzf::write(&out_dir.join(&decoder_file), &dec)?;
        let encoder_file = match inf.encoder_attention {
            Some(enc) => {
                check_rows_sum_to_one(&enc, "encoder attention")?;
                let f = format!("encoder_{id:05}.bin");
                tzf::write(&out_dir.join(&f), &enc)?;
                Some(f)
            }
            None => None,
        };
        for a in 0..dec.rows() {
            let (cell, w) = argmax(dec.row(a));
            let _ = writeln!(csv, "{id},{a},{cell},{w}");
        }
        index.push(DumpEntry {
            image_id: id,
            split: split.to_string(),
            label: ex.label,
            decoder_file,
            encoder_file,
        });
    }
    crate::data::write_json_file(&out_dir.join(DUMP_INDEX_FILE), &index)?;
    let csv_path = out_dir.join(DUMP_ARGMAX_FILE);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(index)
}
