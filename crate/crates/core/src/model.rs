//! Siamese 3D-CNN backbone, the spatial max-pool descriptor and the channel heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{conv_output_len, Conv3dSpec, Gradients, Graph, NodeId, ReduceOp};
use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Expected clip shape (C, T, H, W).
    pub input_shape: [usize; 4],
    pub channels: Vec<usize>,
    pub kernel: [usize; 3],
    pub strides: Vec<[usize; 3]>,
    pub padding: [usize; 3],
    /// Route the noise path through the clean path's channel head.
    pub tie_heads: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_shape: [3, 8, 16, 16],
            channels: vec![8, 16],
            kernel: [3, 3, 3],
            strides: vec![[1, 2, 2], [2, 2, 2]],
            padding: [1, 1, 1],
            tie_heads: false,
        }
    }
}

impl BackboneConfig {
    /// Shape C′×T′×H′×W′ of the backbone output, validating the config.
    pub fn feature_shape(&self) -> Result<[usize; 4]> {
        if self.channels.is_empty() {
            return Err(StcrError::Config("backbone needs at least one stage".into()));
        }
        if self.strides.len() != self.channels.len() {
            return Err(StcrError::Config(format!(
                "{} stages but {} stride entries",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.input_shape.contains(&0) || self.channels.contains(&0) || self.kernel.contains(&0) {
            return Err(StcrError::Config("sizes must be positive".into()));
        }
        let mut dims = [self.input_shape[1], self.input_shape[2], self.input_shape[3]];
        for (stage, stride) in self.strides.iter().enumerate() {
            for a in 0..3 {
                dims[a] = conv_output_len(dims[a], self.kernel[a], stride[a], self.padding[a]).ok_or_else(|| {
                    StcrError::Config(format!(
                        "stage {stage}: kernel/stride {:?}/{:?} do not fit axis {}",
                        self.kernel,
                        stride,
                        ["T", "H", "W"][a]
                    ))
                })?;
            }
        }
        let [t, h, w] = dims;
        if h != w {
            return Err(StcrError::Config(format!("feature grid {h}×{w} is not square")));
        }
        if t < 2 {
            return Err(StcrError::Config(format!("feature length T′ = {t} must be at least 2")));
        }
        Ok([*self.channels.last().unwrap(), t, h, w])
    }

    /// Width of the channel head's hidden layer.
    pub fn head_hidden(&self) -> Result<usize> {
        Ok(self.feature_shape()?[1].max(4))
    }

    fn conv_spec(&self, stage: usize) -> Conv3dSpec {
        Conv3dSpec {
            stride: self.strides[stage],
            padding: self.padding,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Per-channel two-layer map collapsing the temporal axis: T′ → hidden → 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelHead {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: BackboneConfig,
    /// Backbone weights shared by both siamese paths.
    pub theta: Vec<ConvLayer>,
    pub w_c_1: ChannelHead,
    pub w_c_2: ChannelHead,
}

fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ChannelHead {
    fn init<R: Rng + ?Sized>(t_len: usize, hidden: usize, rng: &mut R) -> Self {
        ChannelHead {
            fc1_weight: xavier(&[hidden, t_len], t_len, hidden, rng),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: xavier(&[1, hidden], hidden, 1, rng),
            fc2_bias: Tensor::zeros(&[1]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }
}

const HEAD_NAMES: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

/// Xavier-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<ModelParams> {
    let [_, t_len, _, _] = config.feature_shape()?;
    let hidden = config.head_hidden()?;
    let [kt, kh, kw] = config.kernel;
    let receptive = kt * kh * kw;
    let mut c_in = config.input_shape[0];
    let mut theta = Vec::with_capacity(config.channels.len());
    for &c_out in &config.channels {
        theta.push(ConvLayer {
            kernel: xavier(&[c_out, c_in, kt, kh, kw], c_in * receptive, c_out * receptive, rng),
            bias: Tensor::zeros(&[c_out]),
        });
        c_in = c_out;
    }
    let w_c_1 = ChannelHead::init(t_len, hidden, rng);
    let w_c_2 = ChannelHead::init(t_len, hidden, rng);
    let mut params = ModelParams {
        config: config.clone(),
        theta,
        w_c_1,
        w_c_2,
    };
    if config.tie_heads {
        params.w_c_2 = params.w_c_1.clone();
    }
    Ok(params)
}

impl ModelParams {
    /// Every parameter tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.theta.iter().enumerate() {
            out.push((format!("theta.{i}.kernel"), &layer.kernel));
            out.push((format!("theta.{i}.bias"), &layer.bias));
        }
        for (prefix, head) in [("w_c_1", &self.w_c_1), ("w_c_2", &self.w_c_2)] {
            for (name, t) in HEAD_NAMES.iter().zip(head.tensors()) {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.theta {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
        }
        out.extend(self.w_c_1.tensors_mut());
        out.extend(self.w_c_2.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        self.config.feature_shape().expect("params built from a validated config")
    }

    /// All parameters concatenated in [`named_tensors`](Self::named_tensors) order.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> = self
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect();
        Tensor::new(vec![data.len()], data).expect("non-empty parameter set")
    }

    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.num_params() {
            return Err(StcrError::dim(
                "params",
                format!("expected {} values, got {}", self.num_params(), flat.numel()),
            ));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat.data()[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Copies the clean-path head into the noise-path head.
    pub fn tie_heads(&mut self) {
        self.w_c_2 = self.w_c_1.clone();
    }

    /// Registers every parameter as a graph leaf.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamNodes {
        let theta = self
            .theta
            .iter()
            .map(|l| (g.leaf(l.kernel.clone(), trainable), g.leaf(l.bias.clone(), trainable)))
            .collect();
        let head = |g: &mut Graph, h: &ChannelHead| HeadNodes {
            fc1_weight: g.leaf(h.fc1_weight.clone(), trainable),
            fc1_bias: g.leaf(h.fc1_bias.clone(), trainable),
            fc2_weight: g.leaf(h.fc2_weight.clone(), trainable),
            fc2_bias: g.leaf(h.fc2_bias.clone(), trainable),
        };
        let w_c_1 = head(g, &self.w_c_1);
        let w_c_2 = if self.config.tie_heads {
            w_c_1
        } else {
            head(g, &self.w_c_2)
        };
        ParamNodes { theta, w_c_1, w_c_2 }
    }

    /// Backbone output for one clip, outside any training graph.
    pub fn features(&self, clip: &VideoClip) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.register(&mut g, false);
        let x = g.constant(clip.tensor().clone());
        let f = backbone_forward(&mut g, &nodes, &self.config, x)?;
        Ok(g.value(f).clone())
    }

    /// The C′×T′ spatial max-pool descriptor of one clip.
    pub fn descriptor(&self, clip: &VideoClip) -> Result<Tensor> {
        psi_pool_value(&self.features(clip)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadNodes {
    pub fc1_weight: NodeId,
    pub fc1_bias: NodeId,
    pub fc2_weight: NodeId,
    pub fc2_bias: NodeId,
}

impl HeadNodes {
    fn ids(&self) -> [NodeId; 4] {
        [self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias]
    }
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub theta: Vec<(NodeId, NodeId)>,
    pub w_c_1: HeadNodes,
    pub w_c_2: HeadNodes,
}

impl ParamNodes {
    /// Node ids aligned with [`ModelParams::named_tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.theta.iter().flat_map(|&(k, b)| [k, b]).collect();
        out.extend(self.w_c_1.ids());
        out.extend(self.w_c_2.ids());
        out
    }

    /// Gradients aligned with [`ModelParams::named_tensors`]. With tied heads the
    /// shared head's gradient is reported once, under `w_c_1`.
    pub fn collect(&self, grads: &Gradients, params: &ModelParams) -> Vec<Tensor> {
        let tied = self.w_c_1 == self.w_c_2;
        let ids = self.ids();
        let n_head2 = 4;
        ids.iter()
            .zip(params.named_tensors())
            .enumerate()
            .map(|(i, (id, (_, t)))| {
                if tied && i >= ids.len() - n_head2 {
                    Tensor::zeros(t.shape())
                } else {
                    grads.get(*id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))
                }
            })
            .collect()
    }
}

/// Stack of conv3d → relu stages.
pub fn backbone_forward(
    g: &mut Graph,
    params: &ParamNodes,
    config: &BackboneConfig,
    clip: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(clip);
    if shape != config.input_shape {
        let axis = shape
            .iter()
            .zip(config.input_shape.iter())
            .position(|(a, b)| a != b)
            .map(|i| ["C", "T", "H", "W"][i].to_string())
            .unwrap_or_else(|| "rank".into());
        return Err(StcrError::dim(
            axis,
            format!("clip shape {shape:?} does not match backbone input {:?}", config.input_shape),
        ));
    }
    let mut x = clip;
    for (stage, &(k, b)) in params.theta.iter().enumerate() {
        let y = g.conv3d(x, k, b, config.conv_spec(stage))?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Spatial global max pooling: C′×T′×H′×W′ → C′×T′.
pub fn psi_pool(g: &mut Graph, feature: NodeId) -> Result<NodeId> {
    if g.shape(feature).len() != 4 {
        return Err(StcrError::dim("rank", "feature map must be C′×T′×H′×W′"));
    }
    g.reduce(ReduceOp::Max, feature, &[2, 3])
}

pub fn psi_pool_value(feature: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(feature.clone());
    let d = psi_pool(&mut g, f)?;
    Ok(g.value(d).clone())
}

/// Collapses a C′×T′ descriptor to C′ logits, applying the same map to every channel.
pub fn channel_head(g: &mut Graph, head: &HeadNodes, descriptor: NodeId) -> Result<NodeId> {
    let shape = g.shape(descriptor).to_vec();
    if shape.len() != 2 {
        return Err(StcrError::dim("rank", format!("descriptor must be C′×T′, got {shape:?}")));
    }
    let expect = g.shape(head.fc1_weight)[1];
    if shape[1] != expect {
        return Err(StcrError::dim(
            "T′",
            format!("descriptor length {} does not match head input width {expect}", shape[1]),
        ));
    }
    let h = g.linear(descriptor, head.fc1_weight, head.fc1_bias)?;
    let h = g.relu(h);
    let out = g.linear(h, head.fc2_weight, head.fc2_bias)?;
    g.reshape(out, &[shape[0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn default_config_shape_and_size() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.feature_shape().unwrap(), [16, 4, 4, 4]);
        let p = init_params(&cfg, &mut rng(0)).unwrap();
        assert!(p.num_params() <= 5000, "{}", p.num_params());
    }

    #[test]
    fn shape_arithmetic_two_stride_two_stages() {
        let cfg = BackboneConfig {
            input_shape: [3, 16, 32, 32],
            channels: vec![8, 16],
            kernel: [3, 3, 3],
            strides: vec![[2, 2, 2], [2, 2, 2]],
            padding: [1, 1, 1],
            tie_heads: false,
        };
        assert_eq!(cfg.feature_shape().unwrap(), [16, 4, 8, 8]);
        let p = init_params(&cfg, &mut rng(1)).unwrap();
        let clip = VideoClip::zeros([3, 16, 32, 32]);
        assert_eq!(p.features(&clip).unwrap().shape(), &[16, 4, 8, 8]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = BackboneConfig::default();
        cfg.input_shape = [3, 8, 16, 12];
        assert!(matches!(cfg.feature_shape(), Err(StcrError::Config(_))));
        let mut cfg = BackboneConfig::default();
        cfg.strides = vec![[4, 2, 2], [4, 2, 2]];
        assert!(matches!(init_params(&cfg, &mut rng(0)), Err(StcrError::Config(_))));
        let mut cfg = BackboneConfig::default();
        cfg.strides.pop();
        assert!(cfg.feature_shape().is_err());
    }

    #[test]
    fn xavier_bound_formula() {
        assert_eq!(xavier_bound(3, 3), 1.0);
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let cfg = BackboneConfig::default();
        let a = init_params(&cfg, &mut rng(5)).unwrap();
        let b = init_params(&cfg, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.theta.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        assert_ne!(a.w_c_1, a.w_c_2);
        let bound = xavier_bound(3 * 27, 8 * 27);
        assert!(a.theta[0].kernel.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_clip_gives_zero_features() {
        let p = init_params(&BackboneConfig::default(), &mut rng(2)).unwrap();
        let f = p.features(&VideoClip::zeros([3, 8, 16, 16])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_clip_shape_names_axis() {
        let p = init_params(&BackboneConfig::default(), &mut rng(2)).unwrap();
        match p.features(&VideoClip::zeros([3, 6, 16, 16])) {
            Err(StcrError::Dimension { axis, .. }) => assert_eq!(axis, "T"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn psi_pool_cases() {
        let constant = Tensor::full(&[2, 3, 4, 4], 1.5);
        assert!(psi_pool_value(&constant).unwrap().data().iter().all(|&v| v == 1.5));

        let mut spike = Tensor::zeros(&[2, 3, 4, 4]);
        for c in 0..2 {
            for t in 0..3 {
                let idx = ((c * 3 + t) * 4 + (c + t) % 4) * 4 + t;
                spike.data_mut()[idx] = (1 + c * 3 + t) as f64;
            }
        }
        let d = psi_pool_value(&spike).unwrap();
        assert_eq!(d.data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn channel_head_zero_input_and_mismatch() {
        let cfg = BackboneConfig::default();
        let mut p = init_params(&cfg, &mut rng(3)).unwrap();
        let mut g = Graph::new();
        let nodes = p.register(&mut g, false);
        let d = g.constant(Tensor::zeros(&[16, 4]));
        let logits = channel_head(&mut g, &nodes.w_c_1, d).unwrap();
        assert_eq!(g.shape(logits), &[16]);
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[16, 5]));
        assert!(matches!(
            channel_head(&mut g, &nodes.w_c_1, bad),
            Err(StcrError::Dimension { .. })
        ));

        p.config.tie_heads = true;
        let mut g = Graph::new();
        let nodes = p.register(&mut g, true);
        assert_eq!(nodes.w_c_1, nodes.w_c_2);
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = BackboneConfig::default();
        let a = init_params(&cfg, &mut rng(7)).unwrap();
        let mut b = init_params(&cfg, &mut rng(8)).unwrap();
        b.load_flat(&a.flatten()).unwrap();
        assert_eq!(a, b);
    }
}
