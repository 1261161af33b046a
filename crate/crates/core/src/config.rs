use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossWeights;

/// Every hyperparameter of a run. Missing keys take the defaults below;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_ar: f64,
    pub lambda_sc: f64,
    pub d_model: usize,
    /// Attention key width; `None` means `d_model`.
    pub d_k: Option<usize>,
    pub d_g: usize,
    /// FFN hidden width; `None` means `4 * d_model`.
    pub d_ff: Option<usize>,
    /// Decoder attention heads.
    pub heads: usize,
    /// Encoder and decoder layer count.
    pub layers: usize,
    pub dropout_rate: f64,
    pub clamp_eps: f64,
    /// Calibration offset applied at prediction time.
    pub gamma: f64,
    pub seed: u64,
    pub disable_fae: bool,
    pub disable_fa: bool,
    pub disable_dec: bool,
    pub decoder_residual: bool,
    #[serde(alias = "train_vA")]
    pub train_va: bool,
    pub dataset: Option<String>,
    pub output: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 50,
            epochs: 30,
            lambda_ar: 0.005,
            lambda_sc: 0.3,
            d_model: 32,
            d_k: None,
            d_g: 64,
            d_ff: None,
            heads: 1,
            layers: 1,
            dropout_rate: 0.1,
            clamp_eps: crate::geometry::DEFAULT_CLAMP_EPS,
            gamma: 1.0,
            seed: 0,
            disable_fae: false,
            disable_fa: false,
            disable_dec: false,
            decoder_residual: false,
            train_va: false,
            dataset: None,
            output: None,
        }
    }
}

impl RunConfig {
    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.d_model)
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_ar: self.lambda_ar,
            lambda_sc: self.lambda_sc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("d_model", self.d_model),
            ("d_k", self.d_k()),
            ("d_g", self.d_g),
            ("d_ff", self.d_ff()),
            ("heads", self.heads),
            ("layers", self.layers),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.lambda_ar >= 0.0 && self.lambda_sc >= 0.0) {
            return Err(Error::invalid("weight_decay and loss weights must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout_rate must be in [0, 1)"));
        }
        if !(self.clamp_eps > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("clamp_eps must be positive and gamma finite"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<config>".into(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = crate::data::read_json_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_json_file(path, self)
    }
}

/// Component removals mirroring the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoFae,
    NoFa,
    NoDec,
    NoSc,
    NoAr,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::NoFae, Ablation::NoFa, Ablation::NoDec, Ablation::NoSc, Ablation::NoAr];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoFae => "no_fae",
            Ablation::NoFa => "no_fa",
            Ablation::NoDec => "no_dec",
            Ablation::NoSc => "no_sc",
            Ablation::NoAr => "no_ar",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {name:?}")))
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::NoFae => out.disable_fae = true,
            Ablation::NoFa => out.disable_fa = true,
            Ablation::NoDec => out.disable_dec = true,
            Ablation::NoSc => out.lambda_sc = 0.0,
            Ablation::NoAr => out.lambda_ar = 0.0,
        }
        out
    }
}
