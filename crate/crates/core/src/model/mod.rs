//! The segmentation network.
//!
//! Target points are encoded PointNet-style on the full cloud, then a
//! farthest-point subset of attention points passes through the layer stack
//! together with one token per part. The head scores every (attention point,
//! part) pair; full-cloud labels come from the nearest attention point.

pub mod layers;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{farthest_point_sample_from, knn_indices, GeometryError, KdTree, PointCloud};
use crate::tensor::nn::{Activation, Linear, Mlp};
use crate::tensor::{CheckpointError, ParamStore, Tape, Tensor, TensorError, Var};
use layers::{GpatLayer, LayerTrace, MatchHead, TfLayer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Gpat,
    VanillaTf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub k_schedule: Vec<usize>,
    pub num_heads: usize,
    pub n_attn: usize,
    /// Hidden widths of the shared per-point MLP of the target encoder.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the shared per-point MLP of the part encoder.
    pub part_widths: Vec<usize>,
    /// Affine layers in each W_q / W_k / W_v / head map.
    pub proj_depth: usize,
    pub ablation: Ablation,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            num_layers: 4,
            k_schedule: vec![8, 16, 32, 256],
            num_heads: 4,
            n_attn: 256,
            point_widths: vec![64, 64],
            part_widths: vec![64, 64],
            proj_depth: 2,
            ablation: Ablation::Gpat,
            init_seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            hidden_dim: 256,
            num_layers: 8,
            k_schedule: vec![16, 16, 32, 32, 64, 64, 500, 500],
            num_heads: 8,
            n_attn: 500,
            point_widths: vec![64, 128],
            part_widths: vec![64, 128],
            proj_depth: 2,
            ablation: Ablation::Gpat,
            init_seed: 0,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            hidden_dim: 8,
            num_layers: 2,
            k_schedule: vec![4, 16],
            num_heads: 2,
            n_attn: 16,
            point_widths: vec![8],
            part_widths: vec![8],
            proj_depth: 2,
            ablation: Ablation::Gpat,
            init_seed: 0,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.hidden_dim == 0 || self.num_layers == 0 || self.n_attn == 0 || self.proj_depth == 0 {
            return err("hidden_dim, num_layers, n_attn and proj_depth must be positive".into());
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return err(format!("hidden_dim {} is not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.k_schedule.len() != self.num_layers {
            return err(format!("k_schedule has {} entries for {} layers", self.k_schedule.len(), self.num_layers));
        }
        if self.k_schedule.iter().any(|&k| k == 0 || k > self.n_attn) {
            return err(format!("every k must lie in 1..={}", self.n_attn));
        }
        if self.k_schedule.windows(2).any(|w| w[0] > w[1]) {
            return err("k_schedule must be non-decreasing".into());
        }
        if self.point_widths.is_empty() || self.part_widths.is_empty() {
            return err("encoder widths must be non-empty".into());
        }
        Ok(())
    }
}

/// Per-point encoder with a max-pooled global feature.
#[derive(Clone, Debug)]
pub struct TargetEncoder {
    pub local: Mlp,
    pub local_proj: Linear,
    pub global_proj: Linear,
}

#[derive(Clone, Debug)]
pub struct PartEncoder {
    pub local: Mlp,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Gpat(GpatLayer),
    Tf(TfLayer),
}

/// Network structure plus its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub target_encoder: TargetEncoder,
    pub part_encoder: PartEncoder,
    pub layers: Vec<Layer>,
    pub head: MatchHead,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `n_attn × N` log-probabilities.
    pub log_probs: Var,
    pub attn_indices: Vec<usize>,
    pub target_features: Var,
    pub part_features: Var,
    pub traces: Vec<LayerTrace>,
}

/// Full-cloud and attention-point segmentation probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// `n_t × N`, each row copied from the nearest attention point.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    /// `n_attn × N` as produced by the head.
    pub attn_probs: Tensor,
    pub attn_indices: Vec<usize>,
}

/// Argmax of each row; ties go to the lowest column.
pub fn row_argmax(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let mut best = 0;
            for j in 1..r.len() {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn cloud_tensor(c: &PointCloud) -> Tensor {
    Tensor::matrix(c.len(), 3, c.points().iter().flatten().copied().collect())
}

/// Attention points of a target: farthest-point subset started at index 0.
pub fn attention_indices(target: &PointCloud, n_attn: usize) -> Result<Vec<usize>, ModelError> {
    if target.len() < n_attn {
        return Err(ModelError::Input(format!("target has {} points, model needs {n_attn}", target.len())));
    }
    Ok(farthest_point_sample_from(target, n_attn, 0)?)
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        let s = &mut store;
        let pw: Vec<usize> = std::iter::once(3).chain(config.point_widths.iter().copied()).collect();
        let c = *pw.last().unwrap();
        let target_encoder = TargetEncoder {
            local: Mlp::new(s, "target_enc.local", &pw, Activation::Relu, &mut rng),
            local_proj: Linear::new(s, "target_enc.local_proj", c, h, &mut rng),
            global_proj: Linear::new(s, "target_enc.global_proj", c, h, &mut rng),
        };
        let qw: Vec<usize> = std::iter::once(3).chain(config.part_widths.iter().copied()).collect();
        let part_encoder = PartEncoder {
            local: Mlp::new(s, "part_enc.local", &qw, Activation::Relu, &mut rng),
            proj: Linear::new(s, "part_enc.proj", *qw.last().unwrap(), h, &mut rng),
        };
        let layers = (0..config.num_layers)
            .map(|n| match config.ablation {
                Ablation::Gpat => Layer::Gpat(GpatLayer::new(s, &format!("layer{n}"), h, config.proj_depth, &mut rng)),
                Ablation::VanillaTf => Layer::Tf(TfLayer::new(s, &format!("layer{n}"), h, config.proj_depth, &mut rng)),
            })
            .collect();
        let head = MatchHead::new(s, "head", h, config.proj_depth, &mut rng);
        Ok(Self { config, params: store, target_encoder, part_encoder, layers, head })
    }

    /// Initial features of every target point in `rows` (full cloud is pooled).
    pub fn encode_target(&self, tape: &mut Tape, target: &PointCloud, rows: &[usize]) -> Result<Var, ModelError> {
        let st = &self.params;
        let enc = &self.target_encoder;
        let x = tape.constant(cloud_tensor(target));
        let local = enc.local.forward(tape, st, x)?;
        let local = tape.relu(local);
        let (global, _) = tape.max_axis(local, 0)?;
        let global = tape.reshape(global, &[1, enc.global_proj.fan_in])?;
        // projection is row-wise, so only the requested rows are projected
        let picked = tape.gather_rows(local, rows)?;
        let a = enc.local_proj.forward(tape, st, picked)?;
        let g = enc.global_proj.forward(tape, st, global)?;
        let g = tape.expand_rows(g, rows.len())?;
        Ok(tape.add(a, g)?)
    }

    /// `1 × h` feature of one part.
    pub fn encode_part(&self, tape: &mut Tape, part: &PointCloud) -> Result<Var, ModelError> {
        let st = &self.params;
        let x = tape.constant(cloud_tensor(part));
        let local = self.part_encoder.local.forward(tape, st, x)?;
        let local = tape.relu(local);
        let (pooled, _) = tape.max_axis(local, 0)?;
        let pooled = tape.reshape(pooled, &[1, self.part_encoder.proj.fan_in])?;
        Ok(self.part_encoder.proj.forward(tape, st, pooled)?)
    }

    /// Records the network on `tape` and returns the head's log-probabilities.
    pub fn forward_tape(&self, tape: &mut Tape, target: &PointCloud, parts: &[PointCloud]) -> Result<ForwardVars, ModelError> {
        if parts.is_empty() {
            return Err(ModelError::Input("at least one part is required".into()));
        }
        let cfg = &self.config;
        let attn_indices = attention_indices(target, cfg.n_attn)?;
        let attn_cloud = target.select(&attn_indices)?;
        let k_max = *cfg.k_schedule.iter().max().expect("validated");
        let table = knn_indices(&attn_cloud, k_max)?;
        let mut v = self.encode_target(tape, target, &attn_indices)?;
        let rows: Vec<Var> = parts.iter().map(|p| self.encode_part(tape, p)).collect::<Result<_, _>>()?;
        let mut u = tape.concat(&rows, 0)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut last_k = 0;
        let mut nbr: Rc<[usize]> = Rc::from(Vec::new());
        for (layer, &k) in self.layers.iter().zip(&cfg.k_schedule) {
            if k != last_k {
                nbr = Rc::from(table.truncated(k).indices);
                last_k = k;
            }
            let (v1, u1, trace) = match layer {
                Layer::Gpat(l) => l.forward(tape, &self.params, v, u, &nbr, k, cfg.num_heads)?,
                Layer::Tf(l) => l.forward(tape, &self.params, v, u, cfg.num_heads)?,
            };
            v = v1;
            u = u1;
            traces.push(trace);
        }
        let logits = self.head.logits(tape, &self.params, v, u)?;
        let log_probs = tape.log_softmax(logits, 1)?;
        Ok(ForwardVars { log_probs, attn_indices, target_features: v, part_features: u, traces })
    }

    pub fn forward(&self, target: &PointCloud, parts: &[PointCloud]) -> Result<SegmentationResult, ModelError> {
        let mut tape = Tape::new();
        let fv = self.forward_tape(&mut tape, target, parts)?;
        let lp = tape.value(fv.log_probs);
        let attn_probs = Tensor::new(lp.shape().to_vec(), lp.data().iter().map(|x| x.exp()).collect())?;
        Ok(propagate_labels(target, &fv.attn_indices, attn_probs))
    }
}

/// Copies each attention point's probability row to the target points
/// nearest to it (ties to the lower attention index).
pub fn propagate_labels(target: &PointCloud, attn_indices: &[usize], attn_probs: Tensor) -> SegmentationResult {
    let pts = target.points();
    let anchors: Vec<[f64; 3]> = attn_indices.iter().map(|&i| pts[i]).collect();
    let tree = KdTree::new(&anchors);
    let n = attn_probs.cols();
    let mut data = Vec::with_capacity(pts.len() * n);
    for p in pts {
        let (_, a) = tree.nearest(*p);
        data.extend_from_slice(attn_probs.row(a));
    }
    let probs = Tensor::matrix(pts.len(), n, data);
    let labels = row_argmax(&probs);
    SegmentationResult { probs, labels, attn_probs, attn_indices: attn_indices.to_vec() }
}
