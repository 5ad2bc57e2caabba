//! Size profiles for the transformer stack and the cluster it runs on.
//!
//! A model is described only by parameter counts and by the number of bytes
//! per sample crossing each sublayer boundary. Each transformer layer splits
//! into exactly one attention sublayer followed by one MLP sublayer; partition
//! cuts are only ever placed between whole sublayers so residual tensors never
//! take an extra device hop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SublayerKind {
    Attention,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerProfile {
    pub attention_params: u64,
    pub mlp_params: u64,
}

impl LayerProfile {
    /// Parameter counts of a standard post/pre-LN encoder layer with biases.
    pub fn encoder(hidden: u64, ffn: u64) -> Self {
        let layer_norm = 2 * hidden;
        LayerProfile {
            attention_params: 4 * hidden * hidden + 4 * hidden + layer_norm,
            mlp_params: 2 * hidden * ffn + ffn + hidden + layer_norm,
        }
    }

    pub fn total(&self) -> u64 {
        self.attention_params + self.mlp_params
    }
}

/// Activation size per sample, either one value for every boundary or one per
/// boundary (`2L + 1` entries: model input, each inner boundary, model output).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActivationProfile {
    Uniform(u64),
    PerBoundary(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    name: String,
    layers: Vec<LayerProfile>,
    activation_bytes: Vec<u64>,
    bytes_per_param: u64,
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerProfile>,
        activations: ActivationProfile,
        bytes_per_param: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("model must have at least one layer"));
        }
        if let Some(i) = layers
            .iter()
            .position(|l| l.attention_params == 0 || l.mlp_params == 0)
        {
            return Err(Error::domain(format!("layer {i} has a zero parameter count")));
        }
        if bytes_per_param == 0 {
            return Err(Error::domain("bytes_per_param must be positive"));
        }
        let boundaries = 2 * layers.len() + 1;
        let activation_bytes = match activations {
            ActivationProfile::Uniform(b) => vec![b; boundaries],
            ActivationProfile::PerBoundary(v) => {
                if v.len() != boundaries {
                    return Err(Error::domain(format!(
                        "expected {boundaries} activation sizes (2L + 1), got {}",
                        v.len()
                    )));
                }
                v
            }
        };
        if activation_bytes.contains(&0) {
            return Err(Error::domain("activation sizes must be positive"));
        }
        Ok(ModelSpec {
            name: name.into(),
            layers,
            activation_bytes,
            bytes_per_param,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerProfile] {
        &self.layers
    }

    pub fn bytes_per_param(&self) -> u64 {
        self.bytes_per_param
    }

    /// Total parameter count `S`.
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(LayerProfile::total).sum()
    }

    /// Parameters of layers `[0, layers)`.
    pub fn prefix_params(&self, layers: usize) -> u64 {
        self.layers[..layers.min(self.layers.len())]
            .iter()
            .map(LayerProfile::total)
            .sum()
    }

    /// Parameters of layers `[from, to)`.
    pub fn range_params(&self, from: usize, to: usize) -> u64 {
        self.prefix_params(to) - self.prefix_params(from)
    }

    /// Bytes per sample entering global sublayer `boundary` (`2L` is the output).
    pub fn activation_bytes(&self, boundary: usize) -> u64 {
        self.activation_bytes[boundary]
    }

    /// Bytes per sample entering transformer layer `layer`.
    pub fn layer_input_bytes(&self, layer: usize) -> u64 {
        self.activation_bytes[2 * layer]
    }

    pub fn activation_profile(&self) -> ActivationProfile {
        let first = self.activation_bytes[0];
        if self.activation_bytes.iter().all(|&b| b == first) {
            ActivationProfile::Uniform(first)
        } else {
            ActivationProfile::PerBoundary(self.activation_bytes.clone())
        }
    }
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 3] = ["ViT-B/16", "BERT-large", "uniform-12"];

/// Built-in model profiles.
///
/// Patch/token embeddings are folded into layer 0's attention sublayer and the
/// classifier head into the last layer's MLP sublayer.
pub fn preset(name: &str) -> Result<ModelSpec> {
    match name {
        "ViT-B/16" => {
            // hidden 768, MLP 3072, 16x16 patches on 224x224 RGB -> 196 + 1 tokens.
            let (hidden, ffn, tokens) = (768u64, 3072u64, 197u64);
            let patch_embed = 16 * 16 * 3 * hidden + hidden;
            let embed = patch_embed + hidden + tokens * hidden;
            let head = 2 * hidden + hidden * 1000 + 1000;
            let mut layers = vec![LayerProfile::encoder(hidden, ffn); 12];
            layers[0].attention_params += embed;
            layers[11].mlp_params += head;
            let hidden_bytes = tokens * hidden * 4;
            let mut acts = vec![hidden_bytes; 25];
            acts[0] = 224 * 224 * 3 * 4;
            acts[24] = 1000 * 4;
            ModelSpec::new(name, layers, ActivationProfile::PerBoundary(acts), 4)
        }
        "BERT-large" => {
            // hidden 1024, FFN 4096, 30522-token vocabulary, sequence length 512.
            let (hidden, ffn, seq) = (1024u64, 4096u64, 512u64);
            let embed = 30_522 * hidden + seq * hidden + 2 * hidden + 2 * hidden;
            let qa_head = hidden * 2 + 2;
            let mut layers = vec![LayerProfile::encoder(hidden, ffn); 24];
            layers[0].attention_params += embed;
            layers[23].mlp_params += qa_head;
            let mut acts = vec![seq * hidden * 4; 49];
            acts[0] = seq * 8;
            acts[48] = seq * 2 * 4;
            ModelSpec::new(name, layers, ActivationProfile::PerBoundary(acts), 4)
        }
        "uniform-12" => ModelSpec::new(
            name,
            vec![
                LayerProfile {
                    attention_params: 4_000_000,
                    mlp_params: 8_000_000,
                };
                12
            ],
            ActivationProfile::Uniform(1 << 20),
            4,
        ),
        other => Err(Error::domain(format!(
            "unknown model preset `{other}` (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sublayer {
    pub kind: SublayerKind,
    pub layer: usize,
    pub params: u64,
}

/// Active sublayers of a partially frozen model plus the frozen block size.
#[derive(Debug, Clone, PartialEq)]
pub struct SublayerSeq {
    frozen_layers: usize,
    frozen_params: u64,
    sublayers: Vec<Sublayer>,
}

impl SublayerSeq {
    /// Builds a sequence from raw sizes; the sizes are treated as alternating
    /// attention/MLP sublayers starting after `frozen_layers` whole layers.
    pub fn from_sizes(frozen_layers: usize, frozen_params: u64, sizes: &[u64]) -> Self {
        let sublayers = sizes
            .iter()
            .enumerate()
            .map(|(i, &params)| Sublayer {
                kind: if i % 2 == 0 {
                    SublayerKind::Attention
                } else {
                    SublayerKind::Mlp
                },
                layer: frozen_layers + i / 2,
                params,
            })
            .collect();
        SublayerSeq {
            frozen_layers,
            frozen_params,
            sublayers,
        }
    }

    pub fn frozen_layers(&self) -> usize {
        self.frozen_layers
    }

    /// `S_frozen`: parameters of layers `[0, L_frozen)`.
    pub fn frozen_params(&self) -> u64 {
        self.frozen_params
    }

    pub fn sublayers(&self) -> &[Sublayer] {
        &self.sublayers
    }

    pub fn len(&self) -> usize {
        self.sublayers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sublayers.is_empty()
    }

    pub fn sizes(&self) -> Vec<u64> {
        self.sublayers.iter().map(|s| s.params).collect()
    }

    pub fn active_params(&self) -> u64 {
        self.sublayers.iter().map(|s| s.params).sum()
    }

    /// Global sublayer index (into the full `2L` sequence) of active sublayer `i`.
    pub fn global_index(&self, i: usize) -> usize {
        2 * self.frozen_layers + i
    }
}

/// Splits layers `[L_frozen, L)` into attention and MLP sublayers and sums the
/// frozen prefix.
pub fn m_partition(model: &ModelSpec, frozen_layers: usize) -> Result<SublayerSeq> {
    let l = model.layer_count();
    if frozen_layers > l {
        return Err(Error::domain(format!(
            "frozen layer count {frozen_layers} exceeds layer count {l}"
        )));
    }
    let sublayers = model.layers[frozen_layers..]
        .iter()
        .enumerate()
        .flat_map(|(offset, p)| {
            let layer = frozen_layers + offset;
            [
                Sublayer {
                    kind: SublayerKind::Attention,
                    layer,
                    params: p.attention_params,
                },
                Sublayer {
                    kind: SublayerKind::Mlp,
                    layer,
                    params: p.mlp_params,
                },
            ]
        })
        .collect();
    Ok(SublayerSeq {
        frozen_layers,
        frozen_params: model.prefix_params(frozen_layers),
        sublayers,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// `N`.
    pub nodes: usize,
    /// `I`; must be a power of two so pipelines can halve.
    pub gpus_per_node: usize,
    /// `M_GPU` in bytes.
    pub gpu_memory_bytes: u64,
    /// Bytes per second between GPUs of one node.
    pub intra_node_bandwidth: f64,
    /// Bytes per second between nodes.
    pub inter_node_bandwidth: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::config("cluster.nodes", "must be at least 1"));
        }
        if self.gpus_per_node == 0 || !self.gpus_per_node.is_power_of_two() {
            return Err(Error::config(
                "cluster.gpus_per_node",
                "must be a positive power of two",
            ));
        }
        if self.gpu_memory_bytes == 0 {
            return Err(Error::config("cluster.gpu_memory_bytes", "must be positive"));
        }
        for (key, bw) in [
            ("cluster.intra_node_bandwidth", self.intra_node_bandwidth),
            ("cluster.inter_node_bandwidth", self.inter_node_bandwidth),
        ] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(Error::config(key, "must be a positive finite number"));
            }
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> usize {
        self.nodes * self.gpus_per_node
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// `N_bs`: samples per pipeline per iteration.
    pub batch_size: u64,
    pub epochs: usize,
    /// Samples per epoch across the whole cluster.
    pub dataset_size: u64,
    /// Fixes the iteration count per epoch instead of deriving it from the
    /// largest data shard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations_per_epoch: Option<u64>,
    /// `α` in (0, 1).
    pub alpha: f64,
    /// `λ_frozen` in (0, 1].
    #[serde(default = "default_lambda")]
    pub lambda_frozen: f64,
    #[serde(default = "default_interval")]
    pub freeze_check_interval: usize,
    /// Initial pipeline length; defaults to `gpus_per_node`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pipeline_length: Option<usize>,
    /// Split mini-batches into whole samples instead of equal fractions.
    #[serde(default)]
    pub integer_microbatches: bool,
}

fn default_lambda() -> f64 {
    1.0 / 6.0
}

fn default_interval() -> usize {
    1
}

impl TrainingConfig {
    pub fn validate(&self, cluster: &ClusterSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("training.alpha", "must lie in (0, 1)"));
        }
        if !(self.lambda_frozen > 0.0 && self.lambda_frozen <= 1.0) {
            return Err(Error::config("training.lambda_frozen", "must lie in (0, 1]"));
        }
        if self.freeze_check_interval == 0 {
            return Err(Error::config(
                "training.freeze_check_interval",
                "must be at least 1",
            ));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::config(
                "training.iterations_per_epoch",
                "must be at least 1",
            ));
        }
        let k = self.pipeline_length(cluster);
        if k == 0 || !k.is_power_of_two() || !cluster.gpus_per_node.is_multiple_of(k) {
            return Err(Error::config(
                "training.initial_pipeline_length",
                "must be a power of two dividing gpus_per_node",
            ));
        }
        let replicas = cluster.total_gpus() / k;
        if self.dataset_size < cluster.total_gpus() as u64 || self.dataset_size < replicas as u64 {
            return Err(Error::config(
                "training.dataset_size",
                "must be at least the total number of GPUs",
            ));
        }
        Ok(())
    }

    pub fn pipeline_length(&self, cluster: &ClusterSpec) -> usize {
        self.initial_pipeline_length.unwrap_or(cluster.gpus_per_node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(l: usize, att: u64, mlp: u64) -> ModelSpec {
        ModelSpec::new(
            "t",
            vec![
                LayerProfile {
                    attention_params: att,
                    mlp_params: mlp
                };
                l
            ],
            ActivationProfile::Uniform(1024),
            4,
        )
        .unwrap()
    }

    #[test]
    fn nothing_frozen_gives_all_sublayers() {
        let m = uniform(12, 3, 5);
        let seq = m_partition(&m, 0).unwrap();
        assert_eq!(seq.len(), 24);
        assert_eq!(seq.frozen_params(), 0);
        assert_eq!(seq.sublayers()[0].kind, SublayerKind::Attention);
        assert_eq!(seq.sublayers()[1].kind, SublayerKind::Mlp);
    }

    #[test]
    fn half_frozen_by_direct_summation() {
        let m = uniform(12, 4_000_000, 8_000_000);
        let seq = m_partition(&m, 6).unwrap();
        assert_eq!(seq.len(), 12);
        let mut active = 0u64;
        for layer in 6..12 {
            active += 4_000_000 + 8_000_000;
            assert_eq!(seq.sublayers()[2 * (layer - 6)].layer, layer);
        }
        assert_eq!(seq.active_params(), active);
        assert_eq!(active, 72_000_000);
        assert_eq!(seq.frozen_params(), 72_000_000);
    }

    #[test]
    fn fully_frozen_is_empty() {
        let m = uniform(12, 4, 8);
        let seq = m_partition(&m, 12).unwrap();
        assert!(seq.is_empty());
        assert_eq!(seq.frozen_params(), m.total_params());
    }

    #[test]
    fn over_freezing_is_a_domain_error() {
        let m = uniform(12, 4, 8);
        assert!(matches!(m_partition(&m, 13), Err(Error::Domain(_))));
    }

    #[test]
    fn vit_preset_matches_architecture_arithmetic() {
        let m = preset("ViT-B/16").unwrap();
        assert_eq!(m.layer_count(), 12);
        // 85,054,464 encoder + 742,656 embeddings + 770,536 head.
        assert_eq!(m.total_params(), 86_567_656);
        assert_eq!(m.layers()[5].total(), 7_087_872);
        assert_eq!(m.layer_input_bytes(3), 197 * 768 * 4);
    }

    #[test]
    fn bert_preset_matches_architecture_arithmetic() {
        let m = preset("BERT-large").unwrap();
        assert_eq!(m.layer_count(), 24);
        assert_eq!(m.layers()[5].total(), 12_596_224);
        assert_eq!(m.total_params(), 24 * 12_596_224 + 31_782_912 + 2_050);
    }

    #[test]
    fn rejects_bad_profiles() {
        assert!(ModelSpec::new("x", vec![], ActivationProfile::Uniform(1), 4).is_err());
        let zero = LayerProfile {
            attention_params: 0,
            mlp_params: 1,
        };
        assert!(ModelSpec::new("x", vec![zero], ActivationProfile::Uniform(1), 4).is_err());
        let ok = LayerProfile {
            attention_params: 1,
            mlp_params: 1,
        };
        assert!(ModelSpec::new("x", vec![ok], ActivationProfile::PerBoundary(vec![1, 2]), 4).is_err());
        assert!(preset("GPT-5").is_err());
    }
}
