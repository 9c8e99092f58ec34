//! The assembled forecaster: multi-scale encoder, discrete-latent CVAE and
//! GRU decoder with single-integrator dynamics.
//!
//! Every window is encoded into `e_multi = [e_his; e_edge; e_scene]`:
//! an LSTM over the node's own history, an LSTM over the per-tick sum of its
//! neighbours, and the last-tick scene-graph embedding of the node's group.
//! A categorical latent `z` (prior from `e_multi`, posterior additionally from
//! an LSTM encoding of the true future) conditions the decoder.

mod forward;
mod inputs;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::ArtifactHeader;
use crate::error::{Error, Result};
use crate::grouping::Linkage;
use crate::nets::{GruCell, Linear, LstmCell, StgcnBlock};
use crate::tensor::ParameterStore;

pub use forward::{Decoded, LossBreakdown, MultiScaleEmbedding, PredictMode, PredictionOutput, Sample};
pub use inputs::{FutureTarget, GraphDump, WindowInputs};

/// Per-step input channels: relative position and velocity.
pub const FEATURE_DIM: usize = 4;

/// Model hyperparameters; also the JSON model config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output width of the group- and scene-level STGCNs.
    pub scene_dim: usize,
    /// Number of latent categories.
    #[serde(rename = "K")]
    pub k: usize,
    /// Weight of the latent mutual-information term.
    pub alpha: f64,
    /// Weight of the KL term.
    pub beta: f64,
    /// Perception radius in meters.
    pub radius: f64,
    /// Standard deviation of the per-step Gaussian likelihood, in meters.
    pub sigma: f64,
    pub history_dim: usize,
    pub edge_dim: usize,
    pub future_dim: usize,
    pub decoder_dim: usize,
    /// Hidden width of the prior and posterior networks.
    pub latent_hidden: usize,
    /// STGCN blocks per level.
    pub stgcn_depth: usize,
    pub linkage: Linkage,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scene_dim: 16,
            k: 25,
            alpha: 1.0,
            beta: 1.0,
            radius: 3.0,
            sigma: 0.1,
            history_dim: 32,
            edge_dim: 8,
            future_dim: 32,
            decoder_dim: 128,
            latent_hidden: 32,
            stgcn_depth: 1,
            linkage: Linkage::Complete,
        }
    }
}

impl ModelConfig {
    /// The ETH variant with 8-wide group and scene encoders.
    pub fn eth() -> Self {
        ModelConfig {
            scene_dim: 8,
            ..Self::default()
        }
    }

    /// Length of `e_multi`.
    pub fn embedding_dim(&self) -> usize {
        self.history_dim + self.edge_dim + self.scene_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("scene_dim", self.scene_dim),
            ("history_dim", self.history_dim),
            ("edge_dim", self.edge_dim),
            ("future_dim", self.future_dim),
            ("decoder_dim", self.decoder_dim),
            ("latent_hidden", self.latent_hidden),
            ("stgcn_depth", self.stgcn_depth),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be positive")));
        }
        if self.k < 2 {
            return Err(Error::arg(format!("K must be at least 2, got {}", self.k)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        for (name, v) in [("radius", self.radius), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Layer descriptors derived from a config.
pub(crate) struct Layers {
    pub node_lstm: LstmCell,
    pub edge_lstm: LstmCell,
    pub future_lstm: LstmCell,
    pub group_stgcn: Vec<StgcnBlock>,
    pub scene_stgcn: Vec<StgcnBlock>,
    pub prior_hidden: Linear,
    pub prior_out: Linear,
    pub posterior_hidden: Linear,
    pub posterior_out: Linear,
    pub decoder_h0: Linear,
    pub decoder_gru: GruCell,
    pub decoder_head: Linear,
}

impl Layers {
    fn new(c: &ModelConfig) -> Self {
        let d = c.embedding_dim();
        let stack = |name: &str, input: usize| -> Vec<StgcnBlock> {
            (0..c.stgcn_depth)
                .map(|l| {
                    let i = if l == 0 { input } else { c.scene_dim };
                    StgcnBlock::new(format!("{name}.{l}"), i, c.scene_dim)
                })
                .collect()
        };
        Layers {
            node_lstm: LstmCell::new("node_lstm", FEATURE_DIM, c.history_dim),
            edge_lstm: LstmCell::new("edge_lstm", FEATURE_DIM, c.edge_dim),
            future_lstm: LstmCell::new("future_lstm", FEATURE_DIM, c.future_dim),
            group_stgcn: stack("group_stgcn", FEATURE_DIM),
            scene_stgcn: stack("scene_stgcn", c.scene_dim),
            prior_hidden: Linear::new("prior.hidden", d, c.latent_hidden),
            prior_out: Linear::new("prior.out", c.latent_hidden, c.k),
            posterior_hidden: Linear::new("posterior.hidden", d + c.future_dim, c.latent_hidden),
            posterior_out: Linear::new("posterior.out", c.latent_hidden, c.k),
            decoder_h0: Linear::new("decoder_h0", d + c.k, c.decoder_dim),
            decoder_gru: GruCell::new("decoder_gru", d + c.k + 2, c.decoder_dim),
            decoder_head: Linear::new("decoder_head", c.decoder_dim, 2),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
        self.node_lstm.init(store, rng);
        self.edge_lstm.init(store, rng);
        self.future_lstm.init(store, rng);
        for b in self.group_stgcn.iter().chain(&self.scene_stgcn) {
            b.init(store, rng);
        }
        for l in [
            &self.prior_hidden,
            &self.prior_out,
            &self.posterior_hidden,
            &self.posterior_out,
            &self.decoder_h0,
        ] {
            l.init(store, rng);
        }
        self.decoder_gru.init(store, rng);
        self.decoder_head.init(store, rng);
    }
}

/// Model configuration plus trainable parameters.
#[derive(Debug, Clone)]
pub struct Grouptron {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    header: ArtifactHeader,
    model: ModelConfig,
}

/// Path of the config sidecar written next to a checkpoint.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    checkpoint.with_file_name(name)
}

impl Grouptron {
    /// Fresh parameters drawn uniformly in `±1/√fan_in` from a seeded stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Layers::new(&config).init(&mut store, &mut rng);
        Ok(Grouptron { config, params: store })
    }

    /// Wraps existing parameters, checking that every expected tensor is present
    /// with the expected shape.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        let reference = Grouptron::new(config.clone(), 0)?;
        for (path, p) in reference.params.iter() {
            match params.get(path) {
                None => return Err(Error::State(format!("checkpoint lacks parameter {path}"))),
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(Error::State(format!(
                        "parameter {path} has shape {:?}, expected {:?}",
                        q.value.shape(),
                        p.value.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::State("checkpoint holds unexpected parameters".into()));
        }
        Ok(Grouptron { config, params })
    }

    pub(crate) fn layers(&self) -> Layers {
        Layers::new(&self.config)
    }

    /// Writes the parameter snapshot to `path` and the config echo beside it.
    pub fn save(&self, path: &Path, header: &ArtifactHeader) -> Result<()> {
        fs::write(path, self.params.to_snapshot_bytes())?;
        let meta = CheckpointMeta {
            header: header.clone(),
            model: self.config.clone(),
        };
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(config_sidecar(path), text)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`Grouptron::save`].
    pub fn load(path: &Path) -> Result<(Self, ArtifactHeader)> {
        let sidecar = config_sidecar(path);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&sidecar).map_err(|e| {
            Error::State(format!("cannot read checkpoint config {}: {e}", sidecar.display()))
        })?)?;
        let bytes = fs::read(path)
            .map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let params = ParameterStore::read_snapshot(bytes.as_slice())?;
        Ok((Self::from_parts(meta.model, params)?, meta.header))
    }
}
