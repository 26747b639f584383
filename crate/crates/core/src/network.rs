//! Shared-backbone multi-expert classifier.
//!
//! One convolutional feature extractor feeds three expert heads (full, day,
//! night). Each head is a residual block, global average pooling and a
//! weight-scaled linear classifier whose effective weight for class `c` is
//! `exp(rho_c) * w[:, c]`. Class activation maps are computed from the head's
//! last feature map with the features detached, so any loss on a CAM only
//! reaches the classifier parameters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::Domain;
use crate::error::{Error, Result};
use crate::norm::GroupNorm as FusedGroupNorm;
use crate::unfold::{Geometry, Im2Col};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertId {
    Full,
    Day,
    Night,
}

impl ExpertId {
    pub const ALL: [ExpertId; 3] = [ExpertId::Full, ExpertId::Day, ExpertId::Night];

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Day => ExpertId::Day,
            Domain::Night => ExpertId::Night,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertId::Full => "full",
            ExpertId::Day => "day",
            ExpertId::Night => "night",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for ExpertId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture hyper-parameters. Serialised into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Number of sub-domain experts; only 2 (day, night) is supported.
    pub num_sub_domains: usize,
    /// Square input resolution in pixels.
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    /// Channels `d'` of each expert's residual block.
    pub head_channels: usize,
    pub head_stride: usize,
    pub norm_groups: usize,
    /// Whether inference fuses the domain expert with the full expert. A model
    /// trained without domain experts predicts from the full expert alone.
    pub domain_experts: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(2)
    }
}

impl ModelConfig {
    /// Desk-scale default: 64×64 input, four stages 64→128 channels, stride 16.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            num_sub_domains: 2,
            input_size: 64,
            stem_channels: 32,
            stage_channels: vec![64, 64, 128, 128],
            stage_strides: vec![2, 2, 2, 2],
            head_channels: 128,
            head_stride: 1,
            norm_groups: 8,
            domain_experts: true,
            seed: 0,
        }
    }

    /// A narrow variant of [`ModelConfig::desk`] for fast tests and sweeps.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            stem_channels: 8,
            stage_channels: vec![16, 16, 32, 32],
            head_channels: 32,
            norm_groups: 4,
            ..Self::desk(num_classes)
        }
    }

    /// ResNet-50 geometry: 256×256 input, backbone stride 16, head stride 2
    /// (8×8 CAMs), 2048-channel expert blocks.
    pub fn resnet50_geometry(num_classes: usize) -> Self {
        Self {
            input_size: 256,
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 1024],
            stage_strides: vec![2, 2, 2, 2],
            head_channels: 2048,
            head_stride: 2,
            norm_groups: 32,
            ..Self::desk(num_classes)
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product::<usize>() * self.head_stride
    }

    /// Side length of the expert feature maps (and CAMs).
    pub fn cam_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.num_sub_domains != 2 {
            return Err(Error::config(format!(
                "only the day/night pair of sub-domain experts is supported (got K = {})",
                self.num_sub_domains
            )));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config("stage_channels and stage_strides must be non-empty and equally long"));
        }
        let widths = std::iter::once(&self.stem_channels)
            .chain(&self.stage_channels)
            .chain(std::iter::once(&self.head_channels));
        if widths.clone().any(|&c| c == 0) || self.norm_groups == 0 {
            return Err(Error::config("channel counts and norm_groups must be positive"));
        }
        let strides = self.stage_strides.iter().chain(std::iter::once(&self.head_stride));
        if strides.clone().any(|&s| s != 1 && s != 2) {
            return Err(Error::config("strides must be 1 or 2"));
        }
        if self.input_size == 0 || self.input_size % self.total_stride() != 0 {
            return Err(Error::config(format!(
                "input size {} is not a multiple of the total stride {}",
                self.input_size,
                self.total_stride()
            )));
        }
        Ok(())
    }
}

/// Named trainable parameters in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Parameter initialiser with a dedicated seeded stream.
struct Init<'a> {
    rng: ChaCha8Rng,
    store: &'a mut ParamStore,
    dtype: DType,
    device: Device,
}

impl Init<'_> {
    fn var(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.vars.insert(name, var.clone());
        Ok(var)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.var(name, shape, values)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.var(name, shape, vec![value; n])
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: init.normal(format!("{name}.weight"), &[cout, cin, k, k], std)?,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_unfold(x, self.weight.as_tensor(), self.padding, self.stride)
    }
}

/// `k × k` convolution as `im2col` followed by one batched matmul.
///
/// Same result as `Tensor::conv2d`; the backward pass is a matmul plus the
/// `col2im` scatter, much faster on CPU than candle's transposed-convolution
/// gradient.
fn conv2d_unfold(x: &Tensor, weight: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (cout, cin, k, _) = weight.dims4()?;
    let (n, c, h, w) = x.dims4()?;
    if c != cin {
        return Err(Error::contract(format!("conv expects {cin} input channels, got {c}")));
    }
    let geometry = Geometry {
        k,
        stride,
        padding,
        channels: c,
        h,
        w,
    };
    let (ho, wo) = (geometry.out_h(), geometry.out_w());
    let cols = if k == 1 && stride == 1 && padding == 0 {
        x.reshape((n, c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(geometry))?
    };
    let out = weight.reshape((cout, cin * k * k))?.broadcast_matmul(&cols)?;
    Ok(out.reshape((n, cout, ho, wo))?)
}

#[derive(Clone, Debug)]
struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
}

impl GroupNorm {
    fn new(init: &mut Init, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        let groups = (1..=max_groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(Self {
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0)?,
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0)?,
            groups,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = FusedGroupNorm {
            groups: self.groups,
            eps: 1e-5,
        };
        Ok(x.contiguous()?.apply_op3(self.gamma.as_tensor(), self.beta.as_tensor(), op)?)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv,
    norm1: GroupNorm,
    conv2: Conv,
    norm2: GroupNorm,
    shortcut: Option<(Conv, GroupNorm)>,
}

impl ResidualBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Result<Self> {
        let conv1 = Conv::new(init, &format!("{name}.conv1"), cin, cout, 3, stride)?;
        let norm1 = GroupNorm::new(init, &format!("{name}.norm1"), cout, groups)?;
        let conv2 = Conv::new(init, &format!("{name}.conv2"), cout, cout, 3, 1)?;
        let norm2 = GroupNorm::new(init, &format!("{name}.norm2"), cout, groups)?;
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv::new(init, &format!("{name}.shortcut.conv"), cin, cout, 1, stride)?,
                GroupNorm::new(init, &format!("{name}.shortcut.norm"), cout, groups)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: Conv,
    stem_norm: GroupNorm,
    stages: Vec<ResidualBlock>,
}

impl Backbone {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem_norm.forward(&self.stem.forward(x)?)?.relu()?;
        for stage in &self.stages {
            h = stage.forward(&h)?;
        }
        Ok(h)
    }
}

/// Logits and last-layer feature maps of one expert for a stack of frames.
#[derive(Clone, Debug)]
pub struct ExpertOutput {
    /// `(N, C)`
    pub logits: Tensor,
    /// `(N, d', h, w)`
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct ExpertHead {
    id: ExpertId,
    block: ResidualBlock,
    weight: Var,
    log_scale: Var,
}

impl ExpertHead {
    pub fn id(&self) -> ExpertId {
        self.id
    }

    /// Raw classifier weights `w`, shape `(d', C)`.
    pub fn weight(&self) -> &Var {
        &self.weight
    }

    /// `rho`, with per-class scale `s = exp(rho)`.
    pub fn log_scale(&self) -> &Var {
        &self.log_scale
    }

    /// `s_c * w[:, c]`, shape `(d', C)`.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let scale = self.log_scale.as_tensor().exp()?.unsqueeze(0)?;
        Ok(self.weight.as_tensor().broadcast_mul(&scale)?)
    }

    pub fn forward(&self, backbone_features: &Tensor) -> Result<ExpertOutput> {
        let features = self.block.forward(backbone_features)?;
        let pooled = features.mean((2, 3))?;
        let logits = pooled.matmul(&self.effective_weight()?)?;
        Ok(ExpertOutput { logits, features })
    }

    /// CAMs `M = Σ_k s_y w[k, y] A_k` for each row of `features` (`(N, d', h, w)`)
    /// and its class in `classes`. Features are detached.
    pub fn class_activation_maps(&self, features: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let (n, d, h, w) = features.dims4()?;
        if classes.len() != n {
            return Err(Error::contract(format!(
                "{} classes supplied for {n} feature maps",
                classes.len()
            )));
        }
        let num_classes = self.weight.dims()[1];
        if let Some(&bad) = classes.iter().find(|&&c| c >= num_classes) {
            return Err(Error::contract(format!(
                "class {bad} out of range for {num_classes} classes"
            )));
        }
        let idx = Tensor::from_vec(
            classes.iter().map(|&c| c as u32).collect::<Vec<_>>(),
            n,
            features.device(),
        )?;
        let class_weights = self.effective_weight()?.t()?.contiguous()?.index_select(&idx, 0)?; // (N, d')
        let maps = features
            .detach()
            .reshape((n, d, h * w))?
            .broadcast_mul(&class_weights.unsqueeze(2)?)?
            .sum(1)?;
        Ok(maps.reshape((n, h, w))?)
    }

    /// Squared Frobenius norm of the effective classifier weights.
    pub fn classifier_weight_sqnorm(&self) -> Result<f64> {
        let sq = self
            .effective_weight()?
            .to_dtype(DType::F64)?
            .sqr()?
            .sum_all()?
            .to_scalar::<f64>()?;
        Ok(sq)
    }

    fn params(&self, store: &ParamStore) -> Vec<(String, Var)> {
        let prefix = format!("experts.{}.", self.id);
        store
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }
}

/// Single-map convenience wrapper over [`ExpertHead::class_activation_maps`]:
/// `features` is `(d', h, w)`, the result `(h, w)`.
pub fn class_activation_map(head: &ExpertHead, features: &Tensor, class: usize) -> Result<Tensor> {
    let cam = head.class_activation_maps(&features.unsqueeze(0)?, &[class])?;
    Ok(cam.squeeze(0)?)
}

pub fn classifier_weight_sqnorm(head: &ExpertHead) -> Result<f64> {
    head.classifier_weight_sqnorm()
}

/// Which optimiser group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    Expert(ExpertId),
}

#[derive(Clone, Debug)]
pub struct ExpertModel {
    config: ModelConfig,
    backbone: Backbone,
    heads: [ExpertHead; 3],
    params: ParamStore,
    dtype: DType,
    device: Device,
}

const CHECKPOINT_FORMAT: &str = "camtrap-checkpoint-v1";
const CHECKPOINT_META_KEY: &str = "camtrap";

impl ExpertModel {
    /// Builds a freshly initialised model; identical seeds give identical parameters.
    pub fn build(config: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            store: &mut store,
            dtype,
            device: device.clone(),
        };
        let g = config.norm_groups;
        let stem = Conv::new(&mut init, "backbone.stem", 3, config.stem_channels, 3, 1)?;
        let stem_norm = GroupNorm::new(&mut init, "backbone.stem_norm", config.stem_channels, g)?;
        let mut stages = Vec::new();
        let mut cin = config.stem_channels;
        for (i, (&cout, &stride)) in config.stage_channels.iter().zip(&config.stage_strides).enumerate() {
            stages.push(ResidualBlock::new(&mut init, &format!("backbone.stage{i}"), cin, cout, stride, g)?);
            cin = cout;
        }
        let backbone = Backbone {
            stem,
            stem_norm,
            stages,
        };
        let d = config.head_channels;
        let c = config.num_classes;
        let mut heads = Vec::new();
        for id in ExpertId::ALL {
            let block = ResidualBlock::new(&mut init, &format!("experts.{id}.block"), cin, d, config.head_stride, g)?;
            let weight = init.normal(format!("experts.{id}.classifier.weight"), &[d, c], (1.0 / d as f64).sqrt())?;
            let log_scale = init.constant(format!("experts.{id}.classifier.log_scale"), &[c], 0.0)?;
            heads.push(ExpertHead {
                id,
                block,
                weight,
                log_scale,
            });
        }
        let heads: [ExpertHead; 3] = heads.try_into().expect("three experts");
        Ok(Self {
            config: config.clone(),
            backbone,
            heads,
            params: store,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn head(&self, id: ExpertId) -> &ExpertHead {
        &self.heads[id.index()]
    }

    pub fn set_domain_experts(&mut self, enabled: bool) {
        self.config.domain_experts = enabled;
    }

    /// Parameters of one optimiser group, in name order.
    pub fn group_params(&self, group: ParamGroup) -> Vec<(String, Var)> {
        match group {
            ParamGroup::Backbone => self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with("backbone."))
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
            ParamGroup::Expert(id) => self.head(id).params(&self.params),
        }
    }

    /// Backbone features for `(N, 3, H, W)` normalised images.
    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::contract(format!(
                "expected (N, 3, {s}, {s}) input, got {:?}",
                images.dims()
            )));
        }
        self.backbone.forward(images)
    }

    /// Forwards the three frames of one sequence through the backbone and one
    /// expert. Frames are processed independently.
    pub fn forward_expert(&self, frames: &Tensor, expert: ExpertId) -> Result<ExpertOutput> {
        let n = frames.dim(0)?;
        if n != crate::data_model::FRAMES_PER_SEQUENCE {
            return Err(Error::contract(format!("expected 3 frames, got {n}")));
        }
        let feats = self.backbone_features(frames)?;
        self.head(expert).forward(&feats)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tensors = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.to_string(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<Vec<_>>>()?;
        let meta = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "config": self.config,
        });
        // A single metadata key keeps the header byte-stable.
        let info = HashMap::from([(CHECKPOINT_META_KEY.to_string(), meta.to_string())]);
        safetensors::serialize_to_file(tensors, Some(info), path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, metadata) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let meta = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get(CHECKPOINT_META_KEY))
            .ok_or_else(|| Error::config(format!("{} is not a model checkpoint", path.display())))?;
        let meta: serde_json::Value = serde_json::from_str(meta)?;
        if meta["format"] != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format {}", meta["format"])));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let model = Self::build(&config, dtype, device)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
        for (name, var) in model.params.iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(dtype)?)?;
        }
        if tensors.len() != model.params.len() {
            return Err(Error::config("checkpoint holds unexpected extra parameters"));
        }
        Ok(model)
    }
}

/// Softmax along the last dimension; kept here for callers that report probabilities.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
