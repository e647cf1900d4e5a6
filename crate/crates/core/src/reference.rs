//! Slow `f64` nested-loop implementations of every layer and of the full
//! classifier. Test code checks the optimized engine against these and uses
//! them for finite-difference gradients, so they deliberately share no code
//! with `nn::ops` or `model`.

use std::collections::BTreeMap;

use crate::model::{ModelConfig, WeightInit};
use crate::nn::{ParamStore, Tensor};

/// `f64` rank-4 array used by the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct RefArray {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl RefArray {
    pub fn zeros(dims: [usize; 4]) -> Self {
        RefArray {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        RefArray {
            dims: t.shape().0,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }
}

/// Direct six-loop cross-correlation.
pub fn conv2d(input: &RefArray, weight: &RefArray, bias: &[f64], stride: usize, padding: usize) -> RefArray {
    let [n, c, h, w] = input.dims;
    let [f, wc, kh, kw] = weight.dims;
    assert_eq!(c, wc);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = RefArray::zeros([n, f, oh, ow]);
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fo];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                    continue;
                                }
                                acc += input.get(b, ci, iy as usize, ix as usize) * weight.get(fo, ci, ky, kx);
                            }
                        }
                    }
                    let i = out.idx(b, fo, oy, ox);
                    out.data[i] = acc;
                }
            }
        }
    }
    out
}

/// Records which side of each non-differentiable point an evaluation landed
/// on: ReLU signs and max-pool winners.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KinkTrace {
    pub marks: Vec<u32>,
}

pub fn relu(input: &RefArray, trace: &mut KinkTrace) -> RefArray {
    let mut out = input.clone();
    for v in &mut out.data {
        trace.marks.push((*v > 0.0) as u32);
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn maxpool2(input: &RefArray, trace: &mut KinkTrace) -> RefArray {
    let [n, c, h, w] = input.dims;
    let mut out = RefArray::zeros([n, c, h / 2, w / 2]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = input.get(b, ch, 2 * oy + dy, 2 * ox + dx);
                            if v > best {
                                best = v;
                                arg = dy * 2 + dx;
                            }
                        }
                    }
                    trace.marks.push(arg as u32);
                    let i = out.idx(b, ch, oy, ox);
                    out.data[i] = best;
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(input: &RefArray) -> RefArray {
    let [n, c, h, w] = input.dims;
    let mut out = RefArray::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += input.get(b, ch, y, x);
                }
            }
            out.data[b * c + ch] = s / (h * w) as f64;
        }
    }
    out
}

/// `weight` is `[D_out, D, 1, 1]`.
pub fn linear(input: &RefArray, weight: &RefArray, bias: &[f64]) -> RefArray {
    let [n, d, _, _] = input.dims;
    let dout = weight.dims[0];
    let mut out = RefArray::zeros([n, dout, 1, 1]);
    for b in 0..n {
        for o in 0..dout {
            let mut acc = bias[o];
            for j in 0..d {
                acc += weight.data[o * d + j] * input.data[b * d + j];
            }
            out.data[b * dout + o] = acc;
        }
    }
    out
}

pub fn concat_channels(parts: &[RefArray]) -> RefArray {
    let [n, _, h, w] = parts[0].dims;
    let c: usize = parts.iter().map(|p| p.dims[1]).sum();
    let mut out = RefArray::zeros([n, c, h, w]);
    for b in 0..n {
        let mut co = 0;
        for p in parts {
            for ch in 0..p.dims[1] {
                for y in 0..h {
                    for x in 0..w {
                        let i = out.idx(b, co + ch, y, x);
                        out.data[i] = p.get(b, ch, y, x);
                    }
                }
            }
            co += p.dims[1];
        }
    }
    out
}

/// Mean over rows of `-ln softmax(row)[target]`.
pub fn mean_softmax_cross_entropy(logits: &RefArray, targets: &[usize]) -> f64 {
    let [n, k, _, _] = logits.dims;
    let mut total = 0.0;
    for b in 0..n {
        let row = &logits.data[b * k..(b + 1) * k];
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[targets[b]].exp() / denom).ln();
    }
    total / n as f64
}

/// `f64` copies of a parameter store, addressed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct RefParams(pub BTreeMap<String, RefArray>);

impl RefParams {
    pub fn from_store(params: &ParamStore) -> Self {
        RefParams(params.iter().map(|p| (p.name.clone(), RefArray::from_tensor(&p.value))).collect())
    }

    fn get(&self, name: &str) -> &RefArray {
        self.0.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Full classifier forward from parameter names alone; returns logits `[N,2,1,1]`.
pub fn model_logits(config: &ModelConfig, params: &RefParams, branch_inputs: &[RefArray], trace: &mut KinkTrace) -> RefArray {
    let mut features = Vec::new();
    for (b, input) in branch_inputs.iter().enumerate() {
        let prefix = if config.share_branch_weights {
            "backbone".to_string()
        } else {
            format!("branch{b}")
        };
        let mut x = if config.standardize_inputs { standardize(input) } else { input.clone() };
        for (i, block) in config.backbone.iter().enumerate() {
            let w = params.get(&format!("{prefix}.conv{i}.weight"));
            let bias = &params.get(&format!("{prefix}.conv{i}.bias")).data;
            x = conv2d(&x, w, bias, block.stride, block.kernel / 2);
            x = relu(&x, trace);
            x = maxpool2(&x, trace);
        }
        features.push(x);
    }
    let joined = concat_channels(&features);
    let pooled = global_avg_pool(&joined);
    linear(&pooled, params.get("head.weight"), &params.get("head.bias").data)
}

/// Per item and channel: `(x - mean) / max(std, floor)`.
pub fn standardize(x: &RefArray) -> RefArray {
    let [_, _, h, w] = x.dims;
    let floor = crate::model::STD_FLOOR as f64;
    let mut out = x.clone();
    for plane in out.data.chunks_mut(h * w) {
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let sd = (plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(floor);
        for v in plane {
            *v = (*v - mean) / sd;
        }
    }
    out
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// [`GRAD_FLOOR`] for models that standardize their inputs.
pub const STANDARDIZED_GRAD_FLOOR: f64 = 1e-5;

/// Outcome of comparing engine gradients with central differences of an oracle loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Elements whose `±FD_STEP` probes crossed a ReLU or max-pool switch point.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares `analytic[a][i]` with the central difference of `loss` in element
/// `i` of array `a`, skipping elements whose probes change the kink trace.
pub fn check_elements(
    names: &[String],
    values: &[RefArray],
    analytic: &[Vec<f32>],
    floor: f64,
    loss: impl Fn(&[RefArray], &mut KinkTrace) -> f64,
) -> GradCheck {
    let mut base_trace = KinkTrace::default();
    loss(values, &mut base_trace);
    let mut probe = values.to_vec();
    let mut report = GradCheck::default();
    for (a, array) in values.iter().enumerate() {
        for i in 0..array.data.len() {
            let x = array.data[i];
            let mut eval = |v: f64| {
                probe[a].data[i] = v;
                let mut trace = KinkTrace::default();
                let l = loss(&probe, &mut trace);
                (l, trace)
            };
            let (up, up_trace) = eval(x + FD_STEP);
            let (down, down_trace) = eval(x - FD_STEP);
            probe[a].data[i] = x;
            if up_trace != base_trace || down_trace != base_trace {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(|| format!("{}[{i}]", names[a]), analytic[a][i] as f64, numeric, floor);
        }
    }
    report
}

mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{ConvBlock, Model, WeightInit};
    use crate::nn::{ComputeGraph, NnError, NodeId, Parameter, Shape};

    fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(Shape(dims), |_, _, _, _| rng.gen_range(lo..hi))
    }

    /// Runs `engine` over `inputs` registered as parameters, back-propagates a
    /// random projection of its output and checks the input gradients against
    /// the same projection of `oracle`.
    fn check_layer(
        rng: &mut ChaCha8Rng,
        inputs: Vec<Tensor>,
        engine: impl Fn(&mut ComputeGraph, &[NodeId]) -> Result<NodeId, NnError>,
        oracle: impl Fn(&[RefArray], &mut KinkTrace) -> RefArray,
    ) -> GradCheck {
        let mut params: ParamStore = inputs.iter().enumerate().map(|(i, t)| Parameter::new(format!("in{i}"), t.clone())).collect();
        let mut graph = ComputeGraph::new();
        let nodes: Vec<NodeId> = (0..params.len()).map(|i| graph.param(&params, i)).collect();
        let out = engine(&mut graph, &nodes).expect("engine forward");
        let seed = uniform(rng, graph.value(out).shape().0, -1.0, 1.0);
        let weights = RefArray::from_tensor(&seed);
        graph.backward_from(out, seed, &mut params).expect("backward");

        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        let values: Vec<RefArray> = params.iter().map(|p| RefArray::from_tensor(&p.value)).collect();
        let analytic: Vec<Vec<f32>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
        check_elements(&names, &values, &analytic, GRAD_FLOOR, |v, trace| {
            let y = oracle(v, trace);
            y.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
        })
    }

    pub fn conv2d(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, f) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let k = if rng.gen_bool(0.5) { 3 } else { 1 };
        let (h, w) = (rng.gen_range(k..=8), rng.gen_range(k..=8));
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=k / 2);
        let inputs = vec![
            uniform(&mut rng, [n, c, h, w], -1.0, 1.0),
            uniform(&mut rng, [f, c, k, k], -0.5, 0.5),
            uniform(&mut rng, [f, 1, 1, 1], -0.5, 0.5),
        ];
        check_layer(
            &mut rng,
            inputs,
            |g, x| g.conv2d(x[0], x[1], x[2], stride, padding),
            |v, _| super::conv2d(&v[0], &v[1], &v[2].data, stride, padding),
        )
    }

    pub fn relu(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let inputs = vec![uniform(&mut rng, dims, -1.0, 1.0)];
        check_layer(&mut rng, inputs, |g, x| Ok(g.relu(x[0])), |v, t| super::relu(&v[0], t))
    }

    pub fn maxpool2d(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(1..=4), rng.gen_range(1..=8), 2 * rng.gen_range(1..=8), 2 * rng.gen_range(1..=8)];
        let inputs = vec![uniform(&mut rng, dims, -1.0, 1.0)];
        check_layer(&mut rng, inputs, |g, x| g.maxpool2d(x[0]), |v, t| super::maxpool2(&v[0], t))
    }

    pub fn global_avg_pool(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(1..=4), rng.gen_range(1..=8), rng.gen_range(1..=16), rng.gen_range(1..=16)];
        let inputs = vec![uniform(&mut rng, dims, -1.0, 1.0)];
        check_layer(&mut rng, inputs, |g, x| g.global_avg_pool(x[0]), |v, _| super::global_avg_pool(&v[0]))
    }

    pub fn linear(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, o) = (rng.gen_range(1..=4), rng.gen_range(1..=16), rng.gen_range(1..=4));
        let inputs = vec![
            uniform(&mut rng, [n, d, 1, 1], -1.0, 1.0),
            uniform(&mut rng, [o, d, 1, 1], -0.5, 0.5),
            uniform(&mut rng, [o, 1, 1, 1], -0.5, 0.5),
        ];
        check_layer(&mut rng, inputs, |g, x| g.linear(x[0], x[1], x[2]), |v, _| super::linear(&v[0], &v[1], &v[2].data))
    }

    pub fn concat_channels(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let parts = rng.gen_range(1..=3);
        let inputs = (0..parts).map(|_| {
            let c = rng.gen_range(1..=4);
            uniform(&mut rng, [n, c, h, w], -1.0, 1.0)
        });
        let inputs: Vec<Tensor> = inputs.collect();
        check_layer(&mut rng, inputs, |g, x| g.concat_channels(x), |v, _| super::concat_channels(v))
    }

    pub fn softmax_cross_entropy(seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rng.gen_range(1..=4), rng.gen_range(2..=4));
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let inputs = vec![uniform(&mut rng, [n, k, 1, 1], -3.0, 3.0)];
        check_layer(
            &mut rng,
            inputs,
            |g, x| g.softmax_cross_entropy(x[0], &targets),
            |v, _| {
                let mut out = RefArray::zeros([1, 1, 1, 1]);
                out.data[0] = mean_softmax_cross_entropy(&v[0], &targets);
                out
            },
        )
    }

    /// Small two-branch classifier used for whole-model checks.
    pub fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            branches: 2,
            share_branch_weights: false,
            backbone: vec![ConvBlock::new(4, 3, 1), ConvBlock::new(6, 3, 1)],
            head_dim: 2,
            patch_size: 8,
            seed,
            init: WeightInit::FanIn,
            standardize_inputs: false,
        }
    }

    /// Every parameter of a freshly initialized model on a random 4-sample batch.
    pub fn model(config: ModelConfig, seed: u64) -> GradCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut model = Model::build(config.clone()).expect("valid config");
        let s = config.patch_size;
        let inputs: Vec<Tensor> = (0..config.branches).map(|_| uniform(&mut rng, [4, 3, s, s], 0.0, 1.0)).collect();
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
        model.params_mut().zero_grad();
        model.accumulate_gradients(&inputs, &targets).expect("forward/backward");

        let refs = RefParams::from_store(model.params());
        let names: Vec<String> = refs.0.keys().cloned().collect();
        let values: Vec<RefArray> = refs.0.values().cloned().collect();
        let analytic: Vec<Vec<f32>> = names
            .iter()
            .map(|n| model.params().find(n).expect("named parameter").grad.data().to_vec())
            .collect();
        let ref_inputs: Vec<RefArray> = inputs.iter().map(RefArray::from_tensor).collect();
        let floor = if config.standardize_inputs { STANDARDIZED_GRAD_FLOOR } else { GRAD_FLOOR };
        check_elements(&names, &values, &analytic, floor, |v, trace| {
            let params = RefParams(names.iter().cloned().zip(v.iter().cloned()).collect());
            let logits = model_logits(&config, &params, &ref_inputs, trace);
            mean_softmax_cross_entropy(&logits, &targets)
        })
    }
}

pub use gradcheck::{
    concat_channels as check_concat_channels, conv2d as check_conv2d, global_avg_pool as check_global_avg_pool, linear as check_linear,
    maxpool2d as check_maxpool2d, model as check_model, relu as check_relu, small_config as gradcheck_model_config,
    softmax_cross_entropy as check_softmax_cross_entropy,
};

/// Every layer check and the whole-model check over `seeds`, keyed by layer name.
pub fn check_all(seeds: std::ops::Range<u64>) -> Vec<(&'static str, GradCheck)> {
    type Check = fn(u64) -> GradCheck;
    let layers: [(&'static str, Check); 7] = [
        ("conv2d", check_conv2d),
        ("relu", check_relu),
        ("maxpool2d", check_maxpool2d),
        ("global_avg_pool", check_global_avg_pool),
        ("linear", check_linear),
        ("concat_channels", check_concat_channels),
        ("softmax_cross_entropy", check_softmax_cross_entropy),
    ];
    let mut out: Vec<(&'static str, GradCheck)> = layers
        .iter()
        .map(|&(name, f)| {
            let mut total = GradCheck::default();
            for s in seeds.clone() {
                total.merge(f(s));
            }
            (name, total)
        })
        .collect();
    let seeds_variant = seeds.clone();
    let mut model = GradCheck::default();
    for s in seeds {
        model.merge(check_model(gradcheck_model_config(s), s));
    }
    out.push(("model_2_branch", model));
    let mut variant = GradCheck::default();
    for s in seeds_variant {
        let config = ModelConfig {
            init: WeightInit::He,
            standardize_inputs: true,
            ..gradcheck_model_config(s)
        };
        variant.merge(check_model(config, s));
    }
    out.push(("model_2_branch_he_standardized", variant));
    out
}
