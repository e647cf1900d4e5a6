use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Score};
use crate::nn::{ComputeGraph, NodeId, ParamStore, Parameter, Shape, Tensor};
use crate::pem::PatchSet;

/// Lower bound on the deviation used by [`standardize`], so flat patches are not amplified into noise.
pub const STD_FLOOR: f32 = 1e-2;

/// Per item and channel: `(x - mean) / max(std, STD_FLOOR)`.
pub fn standardize(x: &Tensor) -> Tensor {
    let [_, _, h, w] = x.shape().0;
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(h * w) {
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = var.sqrt().max(STD_FLOOR as f64);
        for v in plane {
            *v = ((*v as f64 - mean) / scale) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct LayerParams {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    /// Per branch, per block. Shared-weight models point every branch at the same entries.
    backbone: Vec<Vec<LayerParams>>,
    head: LayerParams,
}

impl Model {
    /// Creates all parameters with `config.init`, seeded from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let distinct = if config.share_branch_weights { 1 } else { config.branches };
        let mut stacks = Vec::with_capacity(distinct);
        for b in 0..distinct {
            let prefix = if config.share_branch_weights {
                "backbone".to_string()
            } else {
                format!("branch{b}")
            };
            let mut in_ch = 3;
            let mut stack = Vec::with_capacity(config.backbone.len());
            for (i, block) in config.backbone.iter().enumerate() {
                let fan_in = in_ch * block.kernel * block.kernel;
                let w_shape = Shape::new(block.channels, in_ch, block.kernel, block.kernel);
                let weight = params.push(Parameter::uniform(format!("{prefix}.conv{i}.weight"), w_shape, config.init.bound(fan_in), &mut rng));
                let bias = params.push(Parameter::fan_in_uniform(
                    format!("{prefix}.conv{i}.bias"),
                    Shape::new(block.channels, 1, 1, 1),
                    fan_in,
                    &mut rng,
                ));
                stack.push(LayerParams { weight, bias });
                in_ch = block.channels;
            }
            stacks.push(stack);
        }
        let backbone = (0..config.branches).map(|b| stacks[b.min(distinct - 1)].clone()).collect();
        let width = config.branches * config.backbone_out_channels();
        let weight = params.push(Parameter::uniform("head.weight", Shape::new(config.head_dim, width, 1, 1), config.init.bound(width), &mut rng));
        let bias = params.push(Parameter::fan_in_uniform("head.bias", Shape::new(config.head_dim, 1, 1, 1), width, &mut rng));
        Ok(Model {
            config,
            params,
            backbone,
            head: LayerParams { weight, bias },
        })
    }

    /// Builds the architecture for `config` and installs `weights` by name.
    pub fn with_weights(config: ModelConfig, weights: &ParamStore) -> Result<Model, ModelError> {
        let mut model = Model::build(config)?;
        model.params.load_values(weights)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Number of scalar weights.
    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Width of the concatenated, pooled feature vector feeding the head.
    pub fn head_input_width(&self) -> usize {
        self.params.get(self.head.weight).value.shape().c()
    }

    /// SHA-256 over the serialized config and weights.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.params.to_w32().expect("weights serialize"));
        h.finalize().into()
    }

    fn check_inputs(&self, branch_inputs: &[Tensor]) -> Result<usize, ModelError> {
        if branch_inputs.len() != self.config.branches {
            return Err(ModelError::Arity {
                expected: self.config.branches,
                actual: branch_inputs.len(),
            });
        }
        let n = branch_inputs[0].shape().n();
        let s = self.config.patch_size;
        for x in branch_inputs {
            let [xn, c, h, w] = x.shape().0;
            if h != s || w != s {
                return Err(ModelError::PatchSize {
                    expected: s,
                    actual: if h != s { h } else { w },
                });
            }
            if c != 3 || xn != n || n == 0 {
                return Err(ModelError::Data(format!("branch input has shape {}, expected {n}x3x{s}x{s}", x.shape())));
            }
        }
        Ok(n)
    }

    /// Records the forward pass for a batch on `graph` and returns the `[N,2,1,1]` logits node.
    ///
    /// `branch_inputs[b]` holds the `[N,3,S,S]` patches routed to branch `b`.
    pub fn record_logits(&self, graph: &mut ComputeGraph, branch_inputs: &[Tensor]) -> Result<NodeId, ModelError> {
        self.check_inputs(branch_inputs)?;
        let mut features = Vec::with_capacity(branch_inputs.len());
        for (input, stack) in branch_inputs.iter().zip(&self.backbone) {
            let mut x = graph.input(if self.config.standardize_inputs {
                standardize(input)
            } else {
                input.clone()
            });
            for (block, layer) in self.config.backbone.iter().zip(stack) {
                let w = graph.param(&self.params, layer.weight);
                let b = graph.param(&self.params, layer.bias);
                x = graph.conv2d(x, w, b, block.stride, block.kernel / 2)?;
                x = graph.relu(x);
                x = graph.maxpool2d(x)?;
            }
            features.push(x);
        }
        let joined = graph.concat_channels(&features)?;
        let pooled = graph.global_avg_pool(joined)?;
        let w = graph.param(&self.params, self.head.weight);
        let b = graph.param(&self.params, self.head.bias);
        Ok(graph.linear(pooled, w, b)?)
    }

    pub fn forward_batch(&self, branch_inputs: &[Tensor]) -> Result<Vec<Score>, ModelError> {
        let mut graph = ComputeGraph::new();
        let logits = self.record_logits(&mut graph, branch_inputs)?;
        Ok(graph.value(logits).data().chunks(self.config.head_dim).map(Score::from_logits).collect())
    }

    /// Scores one patch set; patch `i` feeds branch `i`.
    pub fn forward(&self, patchset: &PatchSet) -> Result<Score, ModelError> {
        if patchset.patches.len() != self.config.branches {
            return Err(ModelError::Arity {
                expected: self.config.branches,
                actual: patchset.patches.len(),
            });
        }
        let scores = self.forward_batch(&patchset.patches)?;
        Ok(scores[0])
    }

    /// Mean cross-entropy over the batch; gradients are accumulated into the parameters.
    pub fn accumulate_gradients(&mut self, branch_inputs: &[Tensor], targets: &[usize]) -> Result<f32, ModelError> {
        let mut graph = ComputeGraph::new();
        let logits = self.record_logits(&mut graph, branch_inputs)?;
        let loss = graph.softmax_cross_entropy(logits, targets)?;
        let value = graph.value(loss).data()[0];
        graph.backward(loss, &mut self.params)?;
        Ok(value)
    }

    /// Mean cross-entropy without touching gradients.
    pub fn loss(&self, branch_inputs: &[Tensor], targets: &[usize]) -> Result<f32, ModelError> {
        let mut graph = ComputeGraph::new();
        let logits = self.record_logits(&mut graph, branch_inputs)?;
        let loss = graph.softmax_cross_entropy(logits, targets)?;
        Ok(graph.value(loss).data()[0])
    }
}

impl super::Scorer for Model {
    fn branches(&self) -> usize {
        self.config.branches
    }

    fn score_batch(&self, branch_inputs: &[Tensor]) -> Result<Vec<Score>, ModelError> {
        self.forward_batch(branch_inputs)
    }
}
