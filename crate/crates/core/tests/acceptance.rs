//! Acceptance suite. Runs every exit criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any of them fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use attrformer::config::RunConfig;
use attrformer::data::{generate_synthetic, load_dataset, save_dataset, tzf, Example, SyntheticSpec, ZslDataset};
use attrformer::decoder::{decode, DecoderDims, DecoderParams, SemanticAttributeMatrix};
use attrformer::encoder::{bypass_fa, encode, EncoderLayer, EncoderParams};
use attrformer::geometry::{geometry_matrix, GeometryParams, GridLayout};
use attrformer::model::{DataDims, Model};
use attrformer::numeric::{grad_check, Matrix, ParamStore, Rng};
use attrformer::objectives::{predict, ClassAttributeMatrix};
use attrformer::train::{
    batch_loss_graph, epoch_log_csv, evaluate, harmonic_mean, localization_accuracy, train, EpochLog, GzslMetrics,
};
use attrformer::Ablation;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {id} {name}: {} [{:.1?}]", o.detail, start.elapsed());
        if !o.pass {
            failed += 1;
        }
    };

    report(1, "harmonic mean", &mut metric_oracle);
    report(2, "gradient soundness", &mut gradient_soundness);
    report(3, "normalization", &mut normalization_suite);
    report(4, "reductions and invariances", &mut reductions_and_invariances);

    let ds = generate_synthetic(&SyntheticSpec::default()).expect("synthetic defaults");
    let cfg = synthetic_config();
    let start = Instant::now();
    let trained = train(&ds, &cfg).expect("training");
    let train_time = start.elapsed();
    let full = evaluate(&trained.0, &ds).expect("evaluation");

    report(5, "synthetic learning", &mut || synthetic_learning(&full, &trained.1, train_time));
    report(6, "ablation directions", &mut || ablation_directions(&ds, &cfg, &full));
    report(7, "attribute localization", &mut || attribute_localization(&trained.0, &ds));
    report(8, "determinism and formats", &mut determinism_and_formats);

    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

/// Training settings for the synthetic benchmark runs.
fn synthetic_config() -> RunConfig {
    RunConfig {
        lr: 0.01,
        epochs: 30,
        seed: 0,
        ..RunConfig::default()
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let rows = [(69.3, 68.3, 68.8), (52.6, 33.4, 40.8), (61.3, 82.3, 70.2)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (u, s, expected) in rows {
        let h = harmonic_mean(u, s);
        let within = (h - expected).abs() <= 0.05;
        pass &= within;
        parts.push(format!(
            "({u},{s})->{h:.3} vs {expected} {}, inputs-rounding interval [{:.3},{:.3}]",
            if within { "ok" } else { "off" },
            harmonic_mean(u - 0.05, s - 0.05),
            harmonic_mean(u + 0.05, s + 0.05)
        ));
    }
    let elapsed = start.elapsed();
    outcome(pass && elapsed < Duration::from_secs(1), parts.join("; "))
}

fn tiny_model(seen: Vec<usize>, seed: u64) -> (Model, Vec<Example>, ClassAttributeMatrix) {
    let mut rng = Rng::new(seed);
    let (cells, d_in, a, d_a) = (4, 6, 3, 3);
    let z = Matrix::from_fn(2, a, |_, _| rng.uniform(0.0, 1.0));
    let classes = ClassAttributeMatrix::new(z, seen.clone()).unwrap();
    let v_a = SemanticAttributeMatrix::new(Matrix::from_fn(a, d_a, |_, _| rng.next_normal())).unwrap();
    let cfg = RunConfig {
        d_model: 4,
        d_g: 3,
        dropout_rate: 0.0,
        batch_size: 2,
        train_va: true,
        ..RunConfig::default()
    };
    let dims = DataDims {
        d_in,
        d_a,
        n_attributes: a,
        grid_rows: 2,
        grid_cols: 2,
    };
    let mut model = Model::new(&cfg, dims, &v_a, &mut rng).unwrap();
    // Move zero-initialized biases off the ReLU kink.
    for p in model.store.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.next_normal();
        }
    }
    let examples = (0..2)
        .map(|i| Example {
            features: Matrix::from_fn(cells, d_in, |_, _| rng.next_normal()),
            label: seen[i % seen.len()],
        })
        .collect();
    (model, examples, classes)
}

fn gradient_soundness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    // Two seen classes exercise the class cross-entropy; one seen and one
    // unseen exercise the calibration term.
    for (seen, seed) in [(vec![0, 1], 11), (vec![0], 12)] {
        let (model, examples, classes) = tiny_model(seen, seed);
        let refs: Vec<&Example> = examples.iter().collect();
        let report = grad_check(&model.store, 1e-5, |g| {
            Ok(batch_loss_graph(&model, g, &refs, &classes, &mut Rng::new(0), false)?.total)
        })
        .expect("grad check");
        worst = worst.max(report.max_rel_error);
        checked += report.entries_checked;
    }
    let elapsed = start.elapsed();
    outcome(
        worst < 1e-4 && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.3e} over {checked} entries"),
    )
}

/// Plain-loop attention: `U + softmax(UW_q (UW_k)ᵀ / √d_k)·UW_v`.
fn reference_attention(u: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Matrix {
    let mm = |a: &Matrix, b: &Matrix| {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
    };
    let (q, k, v) = (mm(u, wq), mm(u, wk), mm(u, wv));
    let scale = (wq.cols() as f64).sqrt();
    let n = u.rows();
    let mut out = u.clone();
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / scale)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = e.iter().sum();
        for c in 0..v.cols() {
            let z: f64 = (0..n).map(|j| e[j] / total * v.get(j, c)).sum();
            out.set(i, c, out.get(i, c) + z);
        }
    }
    out
}

struct Instance {
    store: ParamStore,
    layout: GridLayout,
    geometry: GeometryParams,
    layer: EncoderLayer,
    decoder: DecoderParams,
    u: Matrix,
    v_a: SemanticAttributeMatrix,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let rows = 1 + rng.below(4);
    let cols = 1 + rng.below(4);
    let d_model = 2 + rng.below(5);
    let d_k = 1 + rng.below(5);
    let a = 1 + rng.below(5);
    let d_a = 1 + rng.below(4);
    let mut store = ParamStore::new();
    let geometry = GeometryParams::init(&mut store, 1 + rng.below(8), &mut rng);
    let enc = EncoderParams::init(&mut store, 3, d_model, d_k, 1, 0.0, &mut rng).unwrap();
    let decoder = DecoderParams::init(
        &mut store,
        &DecoderDims {
            d_a,
            d_model,
            d_k,
            d_ff: 1 + rng.below(8),
            heads: 1 + rng.below(3),
            layers: 1 + rng.below(2),
        },
        rng.below(2) == 1,
        &mut rng,
    )
    .unwrap();
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let n = rows * cols;
    Instance {
        store,
        layout: GridLayout::unit(rows, cols),
        geometry,
        layer: enc.layers[0],
        decoder,
        u: Matrix::from_fn(n, d_model, |_, _| 2.0 * rng.next_normal()),
        v_a: SemanticAttributeMatrix::new(Matrix::from_fn(a, d_a, |_, _| rng.next_normal())).unwrap(),
    }
}

fn max_row_sum_error(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn normalization_suite() -> Outcome {
    let (mut row_err, mut min_g, mut ref_err): (f64, f64, f64) = (0.0, f64::INFINITY, 0.0);
    for seed in 0..100 {
        let inst = random_instance(1000 + seed);
        let g = geometry_matrix(&inst.layout, &inst.store, &inst.geometry, 1e-3).unwrap();
        min_g = min_g.min(g.data().iter().cloned().fold(f64::INFINITY, f64::min));
        let enc = encode(&inst.u, &g, &inst.store, &inst.layer).unwrap();
        row_err = row_err.max(max_row_sum_error(&enc.attention));
        let dec = decode(&enc.output, &inst.v_a, &inst.store, &inst.decoder, true).unwrap();
        for m in dec.attention.unwrap() {
            row_err = row_err.max(max_row_sum_error(&m));
        }
        let zero = Matrix::zeros(g.rows(), g.cols());
        let plain = encode(&inst.u, &zero, &inst.store, &inst.layer).unwrap();
        let reference = reference_attention(
            &inst.u,
            inst.store.value(inst.layer.w_q),
            inst.store.value(inst.layer.w_k),
            inst.store.value(inst.layer.w_v),
        );
        ref_err = ref_err.max(max_abs_diff(&plain.output, &reference));
    }
    outcome(
        row_err <= 1e-9 && min_g >= 0.0 && ref_err <= 1e-12,
        format!("row-sum error {row_err:.2e}, min G {min_g:.3}, reference error {ref_err:.2e}"),
    )
}

fn reductions_and_invariances() -> Outcome {
    let mut bypass_exact = true;
    let mut perm_err: f64 = 0.0;
    for seed in 0..50 {
        let inst = random_instance(5000 + seed);
        let n = inst.u.rows();
        let bypass = bypass_fa(&inst.u, &inst.store, &inst.layer).unwrap();
        let zero = encode(&inst.u, &Matrix::zeros(n, n), &inst.store, &inst.layer).unwrap();
        bypass_exact &= bypass.output == zero.output && bypass.attention == zero.attention;

        let mut order: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut order);
        let permuted = inst.u.select_rows(&order).unwrap();
        let f = decode(&inst.u, &inst.v_a, &inst.store, &inst.decoder, false).unwrap();
        let fp = decode(&permuted, &inst.v_a, &inst.store, &inst.decoder, false).unwrap();
        perm_err = perm_err.max(max_abs_diff(&f.features, &fp.features));
    }

    let mut rng = Rng::new(77);
    let (n_classes, a) = (10, 6);
    let z = Matrix::from_fn(n_classes, a, |_, _| rng.uniform(0.0, 1.0));
    let classes = ClassAttributeMatrix::new(z, (0..6).collect()).unwrap();
    let mut identical = 0;
    for _ in 0..1000 {
        let psi: Vec<f64> = (0..a).map(|_| 3.0 * rng.next_normal()).collect();
        let gamma = rng.uniform(-5.0, 5.0);
        let with = predict(&psi, &classes, classes.unseen_ids(), gamma).unwrap();
        let without = predict(&psi, &classes, classes.unseen_ids(), 0.0).unwrap();
        identical += usize::from(with == without);
    }
    outcome(
        bypass_exact && identical == 1000 && perm_err <= 1e-12,
        format!("bypass exact: {bypass_exact}, calibration-invariant predictions {identical}/1000, permutation error {perm_err:.2e}"),
    )
}

fn synthetic_learning(m: &GzslMetrics, logs: &[EpochLog], elapsed: Duration) -> Outcome {
    let first = logs.first().map_or(f64::NAN, |l| l.loss_total);
    let last = logs.last().map_or(f64::NAN, |l| l.loss_total);
    outcome(
        m.acc >= 60.0 && m.h >= 50.0 && elapsed < Duration::from_secs(120),
        format!(
            "CZSL acc {:.1} (floor 60, target 90), U {:.1} S {:.1} H {:.1} (floor 50), loss {first:.3} -> {last:.3}, trained in {elapsed:.1?}",
            m.acc, m.u, m.s, m.h
        ),
    )
}

fn ablation_directions(ds: &ZslDataset, cfg: &RunConfig, full: &GzslMetrics) -> Outcome {
    let run = |ablation: Ablation| {
        let (model, _) = train(ds, &ablation.apply(cfg)).expect("ablation training");
        evaluate(&model, ds).expect("ablation evaluation")
    };
    let no_sc = run(Ablation::NoSc);
    let no_dec = run(Ablation::NoDec);
    let no_fa = run(Ablation::NoFa);
    let a = no_sc.u < full.u && no_sc.s > full.s;
    let b = no_dec.acc < full.acc;
    let c = no_fa.h <= full.h;
    outcome(
        a && b && c,
        format!(
            "(a) no_sc U {:.1} vs {:.1}, S {:.1} vs {:.1}: {a}; (b) no_dec acc {:.1} vs {:.1}: {b}; (c) no_fa H {:.1} vs {:.1}: {c}",
            no_sc.u, full.u, no_sc.s, full.s, no_dec.acc, full.acc, no_fa.h, full.h
        ),
    )
}

fn attribute_localization(model: &Model, ds: &ZslDataset) -> Outcome {
    let loc = localization_accuracy(model, ds).expect("localization");
    let chance = 1.0 / ds.layout.num_cells() as f64;
    outcome(
        loc >= 0.8,
        format!("{:.1}% of active (image, attribute) pairs peak at the planted cell (floor 80%, chance {:.1}%)", 100.0 * loc, 100.0 * chance),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_formats() -> Outcome {
    let spec = SyntheticSpec {
        examples_per_class: 10,
        test_per_class: 4,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let cfg = RunConfig {
        epochs: 3,
        lr: 0.01,
        seed: 1,
        ..RunConfig::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut logs = Vec::new();
    for d in &dirs {
        let (model, log) = train(&ds, &cfg).unwrap();
        model.save(d.path()).unwrap();
        logs.push(epoch_log_csv(&log));
    }
    let weights_equal = dir_bytes(dirs[0].path()) == dir_bytes(dirs[1].path());
    let logs_equal = logs[0] == logs[1];

    let mut rng = Rng::new(9);
    let mut tzf_ok = true;
    let tmp = tempfile::tempdir().unwrap();
    for i in 0..20 {
        let m = tzf::quantize(&Matrix::from_fn(1 + rng.below(7), 1 + rng.below(7), |_, _| 10.0 * rng.next_normal()));
        let path = tmp.path().join(format!("m{i}.bin"));
        tzf::write(&path, &m).unwrap();
        tzf_ok &= tzf::read(&path).unwrap() == m;
    }
    let data_dir = tmp.path().join("dataset");
    save_dataset(&ds, &data_dir).unwrap();
    let dataset_ok = load_dataset(&data_dir).unwrap() == ds;
    let reload_ok = Model::load(dirs[0].path()).map(|m| !m.store.is_empty()).unwrap_or(false);

    outcome(
        weights_equal && logs_equal && tzf_ok && dataset_ok && reload_ok,
        format!(
            "weights identical: {weights_equal}, logs identical: {logs_equal}, TZF1 round-trip: {tzf_ok}, dataset round-trip: {dataset_ok}, model reload: {reload_ok}"
        ),
    )
}
