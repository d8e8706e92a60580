//! The set-Transformer placement network.
//!
//! Tokens are the whole-layout image, every context element and the target
//! text. They pass through a stack of pre-norm encoder blocks without any
//! positional encoding; the final state of the target token is regressed to a
//! box through a sigmoid with a floor on width and height.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{prepare_input, ElementEncoder, EncodeError, FeatureConfig, ModelInput};
use crate::layout::{BBox, Layout};
use crate::nn::{load_checkpoint, save_checkpoint, EncoderBlock, Graph, LayerNorm, Linear, NnError, ParamStore, Tensor, Var};

/// Lower bound applied to predicted width and height.
pub const SIZE_FLOOR: f64 = 1e-4;

/// Head bias at initialization: logits of the centered box (0.25, 0.25, 0.5, 0.5).
const INITIAL_BOX_LOGITS: [f64; 4] = [-1.0986122886681098, -1.0986122886681098, 0.0, 0.0];

const CHECKPOINT_KIND: &str = "placement-model";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("layout {index}: {source}")]
    InBatch {
        index: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Per-head width; `None` splits `d_model` evenly across heads.
    pub head_dim: Option<usize>,
    pub feature: FeatureConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self { layers: 2, heads: 4, d_model: 64, d_ff: 128, head_dim: None, feature: FeatureConfig::default(), seed: 0 }
    }

    pub fn full() -> Self {
        let feature = FeatureConfig { d_model: 256, ..FeatureConfig::default() };
        Self { layers: 6, heads: 8, d_model: 256, d_ff: 512, head_dim: None, feature, seed: 0 }
    }

    pub fn with_multi_image(mut self, on: bool) -> Self {
        self.feature.use_element_rasters = on;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("sizes must be positive".into()));
        }
        if self.feature.d_model != self.d_model {
            return Err(ModelError::Config(format!(
                "feature width {} differs from model width {}",
                self.feature.d_model, self.d_model
            )));
        }
        if self.head_dim.is_none() && self.d_model % self.heads != 0 {
            return Err(NnError::IndivisibleHeads { d_model: self.d_model, heads: self.heads }.into());
        }
        if self.head_dim == Some(0) {
            return Err(ModelError::Config("head_dim must be positive".into()));
        }
        self.feature.validate()?;
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.head_dim.unwrap_or(self.d_model / self.heads)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone)]
pub struct PlacementModel {
    config: ModelConfig,
    pub store: ParamStore,
    encoder: ElementEncoder,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl PlacementModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = ElementEncoder::new(&mut store, &config.feature, &mut rng)?;
        let blocks = (0..config.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut store,
                    &format!("block{i}"),
                    config.d_model,
                    config.heads,
                    config.head_width(),
                    config.d_ff,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let final_norm = LayerNorm::new(&mut store, "final_norm", config.d_model)?;
        let head = Linear::new(&mut store, "head", config.d_model, 4, &mut rng)?;
        store.get_mut(head.bias).data_mut().copy_from_slice(&INITIAL_BOX_LOGITS);
        Ok(Self { config, store, encoder, blocks, final_norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Zeroes the readout head so every prediction is (0.5, 0.5, 0.5, 0.5).
    pub fn zero_head(&mut self) {
        for id in [self.head.weight, self.head.bias] {
            self.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn prepare(&self, layout: &Layout) -> Result<ModelInput, ModelError> {
        Ok(prepare_input(layout, &self.config.feature)?)
    }

    /// Records the forward pass and returns the 4-vector prediction node.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<Var, ModelError> {
        let rows = input
            .tokens
            .iter()
            .map(|t| self.encoder.forward(g, t))
            .collect::<Result<Vec<_>, _>>()?;
        let mut x = g.stack_rows(&rows)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let x = self.final_norm.forward(g, x)?;
        let target = g.row(x, input.target)?;
        let logits = self.head.forward(g, target)?;
        let unit = g.sigmoid(logits);
        Ok(g.clamp_min_at(unit, SIZE_FLOOR, &[2, 3]))
    }

    pub fn predict_input(&self, input: &ModelInput) -> Result<BBox, ModelError> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, input)?;
        let v = g.value(out);
        Ok(BBox::new(v[0], v[1], v[2], v[3]))
    }

    pub fn predict(&self, layout: &Layout) -> Result<BBox, ModelError> {
        self.predict_input(&self.prepare(layout)?)
    }

    /// Per-layout predictions; the first failure is reported with its index.
    pub fn predict_batch(&self, layouts: &[Layout]) -> Result<Vec<BBox>, ModelError> {
        layouts
            .iter()
            .enumerate()
            .map(|(index, l)| self.predict(l).map_err(|e| ModelError::InBatch { index, source: Box::new(e) }))
            .collect()
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({ "kind": CHECKPOINT_KIND, "model": self.config })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(path, &self.store, None, &self.metadata())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ckpt = load_checkpoint(path)?;
        let config = Self::config_from_metadata(&ckpt.metadata)?;
        let mut model = Self::new(config)?;
        model.replace_params(ckpt.params)?;
        Ok(model)
    }

    pub fn config_from_metadata(meta: &serde_json::Value) -> Result<ModelConfig, ModelError> {
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(NnError::Checkpoint("not a placement model checkpoint".into()).into());
        }
        serde_json::from_value(meta["model"].clone()).map_err(|e| NnError::Checkpoint(e.to_string()).into())
    }

    /// Installs parameters whose names and shapes match this architecture.
    pub fn replace_params(&mut self, params: ParamStore) -> Result<(), ModelError> {
        let same = params.len() == self.store.len()
            && params
                .iter()
                .zip(self.store.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(NnError::Checkpoint("parameters do not match the model architecture".into()).into());
        }
        self.store = params;
        Ok(())
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.store.tensors().to_vec()
    }
}
