//! Input embedding and the geometry-biased self-attention encoder.

use crate::error::{Error, Result};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Rng, Var};

/// One self-attention layer: `U ← U + softmax(QKᵀ/√d_k − G)·V`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    /// `d_model x d_model`, so the residual add is shape-valid.
    pub w_v: ParamId,
    pub d_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed_weight: ParamId,
    pub embed_bias: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub dropout_rate: f64,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        d_in: usize,
        d_model: usize,
        d_k: usize,
        n_layers: usize,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {dropout_rate} not in [0, 1)")));
        }
        if d_k == 0 {
            return Err(Error::invalid("d_k must be at least 1"));
        }
        let embed_weight = store.add_xavier("encoder.embed_weight", d_in, d_model, rng);
        let embed_bias = store.add_zeros("encoder.embed_bias", 1, d_model);
        let layers = (0..n_layers)
            .map(|l| EncoderLayer {
                w_q: store.add_xavier(format!("encoder.{l}.w_q"), d_model, d_k, rng),
                w_k: store.add_xavier(format!("encoder.{l}.w_k"), d_model, d_k, rng),
                w_v: store.add_xavier(format!("encoder.{l}.w_v"), d_model, d_model, rng),
                d_k,
            })
            .collect();
        Ok(Self {
            embed_weight,
            embed_bias,
            layers,
            dropout_rate,
        })
    }

    /// `U = dropout(ReLU(raw · W + b))` for flattened `HW x D_in` features.
    pub fn embed_input(&self, g: &mut Graph, raw: Var, rng: &mut Rng, training: bool) -> Result<Var> {
        let w = g.param(self.embed_weight);
        let b = g.param(self.embed_bias);
        let h = g.matmul(raw, w)?;
        let h = g.add_row(h, b)?;
        let h = g.relu(h);
        Ok(g.dropout(h, self.dropout_rate, rng, training))
    }
}

impl EncoderLayer {
    /// Returns `(U_out, attention)`. `bias = None` runs plain attention.
    pub fn forward(&self, g: &mut Graph, u: Var, bias: Option<Var>) -> Result<(Var, Var)> {
        let wq = g.param(self.w_q);
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        let q = g.matmul(u, wq)?;
        let k = g.matmul(u, wk)?;
        let v = g.matmul(u, wv)?;
        let logits = g.matmul_t(q, k)?;
        let mut logits = g.scale(logits, 1.0 / (self.d_k as f64).sqrt());
        if let Some(bias) = bias {
            let (n, m) = (g.shape(logits), g.shape(bias));
            if n != m {
                return Err(Error::shape("encode: geometry bias", m, n));
            }
            logits = g.sub(logits, bias)?;
        }
        let attn = g.softmax_rows(logits);
        let z = g.matmul(attn, v)?;
        Ok((g.add(u, z)?, attn))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeOutput {
    pub output: Matrix,
    pub attention: Matrix,
}

/// Evaluates input embedding outside a training graph.
pub fn embed_input(
    raw: &Matrix,
    store: &ParamStore,
    params: &EncoderParams,
    rng: &mut Rng,
    training: bool,
) -> Result<Matrix> {
    let mut g = Graph::new(store);
    let x = g.constant(raw.clone());
    let u = params.embed_input(&mut g, x, rng, training)?;
    Ok(g.value(u).clone())
}

/// Feature-augmented attention with residual for one layer.
pub fn encode(u: &Matrix, geometry: &Matrix, store: &ParamStore, layer: &EncoderLayer) -> Result<EncodeOutput> {
    run_layer(u, Some(geometry), store, layer)
}

/// The layer without the geometry term.
pub fn bypass_fa(u: &Matrix, store: &ParamStore, layer: &EncoderLayer) -> Result<EncodeOutput> {
    run_layer(u, None, store, layer)
}

fn run_layer(u: &Matrix, geometry: Option<&Matrix>, store: &ParamStore, layer: &EncoderLayer) -> Result<EncodeOutput> {
    let mut g = Graph::new(store);
    let uv = g.constant(u.clone());
    let bias = geometry.map(|m| g.constant(m.clone()));
    let (out, attn) = layer.forward(&mut g, uv, bias)?;
    Ok(EncodeOutput {
        output: g.value(out).clone(),
        attention: g.value(attn).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    fn setup(seed: u64, d_in: usize, d_model: usize) -> (ParamStore, EncoderParams, Rng) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(&mut store, d_in, d_model, d_model, 1, 0.1, &mut rng).unwrap();
        (store, p, rng)
    }

    fn reference(u: &Matrix, store: &ParamStore, l: &EncoderLayer) -> Matrix {
        let q = u.matmul(store.value(l.w_q)).unwrap();
        let k = u.matmul(store.value(l.w_k)).unwrap();
        let v = u.matmul(store.value(l.w_v)).unwrap();
        let a = q.matmul_t(&k).unwrap().scale(1.0 / (l.d_k as f64).sqrt()).softmax_rows();
        u.add(&a.matmul(&v).unwrap()).unwrap()
    }

    #[test]
    fn zero_input_zero_embedding() {
        let (store, p, mut rng) = setup(1, 4, 3);
        let u = embed_input(&Matrix::zeros(5, 4), &store, &p, &mut rng, true).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, p, mut rng) = setup(2, 4, 3);
        let raw = Matrix::from_fn(5, 4, |_, _| rng.next_normal());
        let a = embed_input(&raw, &store, &p, &mut Rng::new(1), false).unwrap();
        let b = embed_input(&raw, &store, &p, &mut Rng::new(2), false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embed_gradients() {
        let (mut store, mut p, mut rng) = setup(3, 4, 5);
        p.dropout_rate = 0.0;
        store.get_mut(p.embed_bias).value = Matrix::from_fn(1, 5, |_, _| rng.uniform(-0.5, 0.5));
        let raw = Matrix::from_fn(3, 4, |_, _| rng.next_normal());
        let report = grad_check(&store, 1e-5, |g| {
            let x = g.constant(raw.clone());
            let u = p.embed_input(g, x, &mut Rng::new(0), true)?;
            Ok(g.sum_squares(u))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_bias_matches_plain_attention_bitwise() {
        let (store, p, mut rng) = setup(4, 4, 6);
        let u = Matrix::from_fn(9, 6, |_, _| rng.next_normal());
        let out = encode(&u, &Matrix::zeros(9, 9), &store, &p.layers[0]).unwrap();
        assert_eq!(out.output, reference(&u, &store, &p.layers[0]));
        assert_eq!(out, bypass_fa(&u, &store, &p.layers[0]).unwrap());
    }

    #[test]
    fn geometry_changes_output() {
        let (store, p, mut rng) = setup(5, 4, 6);
        let u = Matrix::from_fn(9, 6, |_, _| rng.next_normal());
        let geo = Matrix::from_fn(9, 9, |_, _| rng.uniform(0.0, 3.0));
        let biased = encode(&u, &geo, &store, &p.layers[0]).unwrap();
        let plain = bypass_fa(&u, &store, &p.layers[0]).unwrap();
        assert_ne!(biased.output, plain.output);
    }

    #[test]
    fn huge_off_diagonal_bias_collapses_to_diagonal() {
        let (store, p, mut rng) = setup(6, 4, 6);
        let u = Matrix::from_fn(4, 6, |_, _| rng.next_normal());
        let geo = Matrix::from_fn(4, 4, |i, j| if i == j { 0.0 } else { 1e6 });
        let out = encode(&u, &geo, &store, &p.layers[0]).unwrap();
        for r in 0..4 {
            let row = out.attention.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((row[r] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_values_give_identity() {
        let (mut store, p, mut rng) = setup(7, 4, 6);
        store.get_mut(p.layers[0].w_v).value = Matrix::zeros(6, 6);
        let u = Matrix::from_fn(4, 6, |_, _| rng.next_normal());
        let geo = Matrix::from_fn(4, 4, |_, _| rng.uniform(0.0, 2.0));
        assert_eq!(encode(&u, &geo, &store, &p.layers[0]).unwrap().output, u);
    }

    #[test]
    fn bias_shape_checked() {
        let (store, p, _) = setup(8, 4, 6);
        let err = encode(&Matrix::zeros(4, 6), &Matrix::zeros(3, 3), &store, &p.layers[0]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn row_shift_invariance() {
        // A constant per-row bias leaves attention untouched.
        let (store, p, mut rng) = setup(9, 4, 6);
        let u = Matrix::from_fn(5, 6, |_, _| rng.next_normal());
        let shift = Matrix::from_fn(5, 5, |i, _| i as f64 * 0.7);
        let a = encode(&u, &shift, &store, &p.layers[0]).unwrap();
        let b = bypass_fa(&u, &store, &p.layers[0]).unwrap();
        for (x, y) in a.attention.data().iter().zip(b.attention.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_dropout() {
        let mut store = ParamStore::new();
        assert!(EncoderParams::init(&mut store, 2, 2, 2, 1, 1.0, &mut Rng::new(0)).is_err());
    }
}
