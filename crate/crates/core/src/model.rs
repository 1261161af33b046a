//! The assembled network: embedding → geometry-biased encoder →
//! attribute-query decoder → semantic scores.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{tzf, ZslDataset};
use crate::decoder::{DecoderDims, DecoderParams, SemanticAttributeMatrix};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::geometry::{GeometryParams, GridLayout};
use crate::numeric::{Graph, Matrix, ParamId, ParamStore, Rng, Var};
use crate::objectives::VsenParams;

/// Shapes fixed by the dataset rather than the run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub d_in: usize,
    pub d_a: usize,
    pub n_attributes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl DataDims {
    pub fn of(ds: &ZslDataset) -> Self {
        Self {
            d_in: ds.d_in(),
            d_a: ds.v_a.dim(),
            n_attributes: ds.num_attributes(),
            grid_rows: ds.layout.rows(),
            grid_cols: ds.layout.cols(),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: RunConfig,
    pub dims: DataDims,
    pub store: ParamStore,
    pub geometry: GeometryParams,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub vsen: VsenParams,
    /// Semantic attribute vectors, frozen unless `train_va` is set.
    pub v_a: ParamId,
    pair_features: Matrix,
}

/// Graph handles produced by one image's forward pass.
#[derive(Debug, Clone)]
pub struct ImageForward {
    /// `A x 1` attribute scores.
    pub psi: Var,
    /// First encoder layer's self-attention, absent when the encoder is off.
    pub encoder_attention: Option<Var>,
    /// Per-head decoder attention, absent when the decoder is off.
    pub decoder_attention: Vec<Var>,
}

/// Plain-value result of [`Model::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub psi: Vec<f64>,
    pub encoder_attention: Option<Matrix>,
    pub decoder_attention: Option<Matrix>,
}

impl Model {
    pub fn new(config: &RunConfig, dims: DataDims, v_a: &SemanticAttributeMatrix, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if v_a.num_attributes() != dims.n_attributes || v_a.dim() != dims.d_a {
            return Err(Error::shape(
                "semantic attributes",
                v_a.matrix().shape(),
                (dims.n_attributes, dims.d_a),
            ));
        }
        let mut store = ParamStore::new();
        let geometry = GeometryParams::init(&mut store, config.d_g, rng);
        let encoder = EncoderParams::init(
            &mut store,
            dims.d_in,
            config.d_model,
            config.d_k(),
            config.layers,
            config.dropout_rate,
            rng,
        )?;
        let decoder = DecoderParams::init(
            &mut store,
            &DecoderDims {
                d_a: dims.d_a,
                d_model: config.d_model,
                d_k: config.d_k(),
                d_ff: config.d_ff(),
                heads: config.heads,
                layers: config.layers,
            },
            config.decoder_residual,
            rng,
        )?;
        let vsen = VsenParams::init(&mut store, dims.d_a, config.d_model, rng);
        let v_a_id = store.add("semantic.v_a", v_a.matrix().clone());
        store.get_mut(v_a_id).frozen = !config.train_va;
        let pair_features = GridLayout::unit(dims.grid_rows, dims.grid_cols).pair_features(config.clamp_eps);
        Ok(Self {
            config: config.clone(),
            dims,
            store,
            geometry,
            encoder,
            decoder,
            vsen,
            v_a: v_a_id,
            pair_features,
        })
    }

    fn uses_geometry(&self) -> bool {
        !self.config.disable_fae && !self.config.disable_fa
    }

    /// Records the geometry bias once per graph; shared by every image.
    pub fn geometry_bias(&self, g: &mut Graph) -> Result<Option<Var>> {
        if self.uses_geometry() {
            Ok(Some(self.geometry.forward(g, &self.pair_features)?))
        } else {
            Ok(None)
        }
    }

    pub fn forward_image(
        &self,
        g: &mut Graph,
        features: &Matrix,
        bias: Option<Var>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<ImageForward> {
        let expected = (self.dims.num_cells(), self.dims.d_in);
        if features.shape() != expected {
            return Err(Error::shape("image features", features.shape(), expected));
        }
        let raw = g.constant(features.clone());
        let mut u = self.encoder.embed_input(g, raw, rng, training)?;
        let mut encoder_attention = None;
        if !self.config.disable_fae {
            for layer in &self.encoder.layers {
                let (out, attn) = layer.forward(g, u, bias)?;
                encoder_attention.get_or_insert(attn);
                u = out;
            }
        }
        let v_a = g.param(self.v_a);
        let (f, decoder_attention) = if self.config.disable_dec {
            let pooled = g.mean_rows(u);
            (g.repeat_rows(pooled, self.dims.n_attributes)?, Vec::new())
        } else {
            self.decoder.forward(g, u, v_a)?
        };
        let psi = self.vsen.forward(g, f, v_a)?;
        Ok(ImageForward {
            psi,
            encoder_attention,
            decoder_attention,
        })
    }

    /// Eval-mode forward pass for one image.
    pub fn infer(&self, features: &Matrix) -> Result<Inference> {
        let mut g = Graph::new(&self.store);
        let bias = self.geometry_bias(&mut g)?;
        let mut rng = Rng::new(0);
        let out = self.forward_image(&mut g, features, bias, &mut rng, false)?;
        Ok(Inference {
            psi: g.value(out.psi).data().to_vec(),
            encoder_attention: out.encoder_attention.map(|v| g.value(v).clone()),
            decoder_attention: out.decoder_attention.first().map(|&v| g.value(v).clone()),
        })
    }

    pub fn psi(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.infer(features)?.psi)
    }

    /// Writes `model.json` plus one TZF1 file per parameter under `weights/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let weights = dir.join(WEIGHT_DIR);
        fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
        let mut params = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            let file = format!("{WEIGHT_DIR}/{}.bin", p.name);
            tzf::write(&dir.join(&file), &p.value)?;
            params.push(ParamEntry {
                name: p.name.clone(),
                file,
                rows: p.value.rows(),
                cols: p.value.cols(),
            });
        }
        let manifest = ModelManifest {
            version: 1,
            config: self.config.clone(),
            dims: self.dims,
            params,
        };
        crate::data::write_json_file(&dir.join(MODEL_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let manifest: ModelManifest = crate::data::read_json_file(&path)?;
        if manifest.version != 1 {
            return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
        }
        let placeholder = SemanticAttributeMatrix::new(Matrix::filled(
            manifest.dims.n_attributes,
            manifest.dims.d_a,
            0.0,
        ))?;
        let mut model = Model::new(&manifest.config, manifest.dims, &placeholder, &mut Rng::new(0))?;
        if manifest.params.len() != model.store.len() {
            return Err(Error::format(
                &path,
                format!("{} params listed, architecture has {}", manifest.params.len(), model.store.len()),
            ));
        }
        for entry in &manifest.params {
            let id = model
                .store
                .find(&entry.name)
                .ok_or_else(|| Error::format(&path, format!("unknown param {}", entry.name)))?;
            let file = dir.join(&entry.file);
            let value = tzf::read(&file)?;
            if value.shape() != model.store.value(id).shape() {
                return Err(Error::format(
                    &file,
                    format!("shape {:?}, expected {:?}", value.shape(), model.store.value(id).shape()),
                ));
            }
            model.store.get_mut(id).value = value;
        }
        Ok(model)
    }

    /// Sets the semantic attribute vectors (e.g. when evaluating on a dataset).
    pub fn semantic_attributes(&self) -> SemanticAttributeMatrix {
        SemanticAttributeMatrix::new(self.store.value(self.v_a).clone()).expect("finite")
    }
}

pub const MODEL_FILE: &str = "model.json";
const WEIGHT_DIR: &str = "weights";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    version: u32,
    config: RunConfig,
    dims: DataDims,
    params: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny() -> (ZslDataset, RunConfig) {
        let ds = generate_synthetic(&SyntheticSpec {
            examples_per_class: 2,
            test_per_class: 1,
            d_in: 6,
            d_a: 3,
            n_attributes: 3,
            active_per_class: 1,
            min_hamming: 2,
            n_seen: 2,
            n_unseen: 1,
            grid_rows: 2,
            grid_cols: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let cfg = RunConfig {
            d_model: 4,
            d_g: 3,
            dropout_rate: 0.0,
            ..RunConfig::default()
        };
        (ds, cfg)
    }

    #[test]
    fn inference_shapes() {
        let (ds, cfg) = tiny();
        let model = Model::new(&cfg, DataDims::of(&ds), &ds.v_a, &mut Rng::new(1)).unwrap();
        let out = model.infer(&ds.train[0].features).unwrap();
        assert_eq!(out.psi.len(), 3);
        assert_eq!(out.encoder_attention.unwrap().shape(), (4, 4));
        assert_eq!(out.decoder_attention.unwrap().shape(), (3, 4));
    }

    #[test]
    fn ablated_paths() {
        let (ds, cfg) = tiny();
        let cfg = RunConfig {
            disable_fae: true,
            disable_dec: true,
            ..cfg
        };
        let model = Model::new(&cfg, DataDims::of(&ds), &ds.v_a, &mut Rng::new(1)).unwrap();
        let out = model.infer(&ds.train[0].features).unwrap();
        assert!(out.encoder_attention.is_none() && out.decoder_attention.is_none());
        assert_eq!(out.psi.len(), 3);
    }

    #[test]
    fn save_load_roundtrip() {
        let (ds, cfg) = tiny();
        let mut model = Model::new(&cfg, DataDims::of(&ds), &ds.v_a, &mut Rng::new(2)).unwrap();
        for p in model.store.iter_mut() {
            p.value = tzf::quantize(&p.value);
        }
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn rejects_wrong_feature_shape() {
        let (ds, cfg) = tiny();
        let model = Model::new(&cfg, DataDims::of(&ds), &ds.v_a, &mut Rng::new(1)).unwrap();
        assert!(model.infer(&Matrix::zeros(4, 5)).is_err());
    }
}
