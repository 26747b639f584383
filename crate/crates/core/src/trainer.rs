//! Domain-routed training.
//!
//! Every batch feeds the full expert; the day and night experts see only the
//! sequences of their own domain, on backbone features detached from the
//! graph. The backbone is therefore updated by the full expert's loss alone,
//! and each sub-domain loss reaches only its own head. Each head steps with its
//! own learning rate, scaled by the share of training data its domain holds.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{DatasetManifest, Domain, DomainCounts, SequenceSample, Split};
use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowPair};
use crate::imaging::{flip_rgb, images_to_tensor, load_rgb, resize_rgb};
use crate::losses::{flow_consistency_loss_batch, focal_loss_frames, total_loss, LossConfig};
use crate::network::{ExpertId, ExpertModel, ModelConfig, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Base learning rate of the full expert and the backbone.
    pub lr_full: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Probability of mirroring a sequence.
    pub flip_prob: f64,
    pub loss: LossConfig,
    /// Train the day/night experts (and fuse them at inference).
    pub domain_experts: bool,
    /// Add the flow-consistency term to every expert's loss.
    pub flow_consistency: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_full: 0.01,
            epochs: 100,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0,
            flip_prob: 0.5,
            loss: LossConfig::default(),
            domain_experts: true,
            flow_consistency: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the WCS-style benchmark.
    pub fn wcs() -> Self {
        Self::default()
    }

    /// Learning rate used for the DMZ-style benchmark.
    pub fn dmz() -> Self {
        Self {
            lr_full: 0.001,
            ..Self::default()
        }
    }

    /// Full-scale batch size.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 48,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be at least 1"));
        }
        if !(self.lr_full > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("need lr_full > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        self.loss.validate()
    }

    /// Flow-consistency weight actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.flow_consistency {
            self.loss.beta
        } else {
            0.0
        }
    }
}

/// Learning rate per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrTable {
    pub full: f64,
    pub day: f64,
    pub night: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl LrTable {
    pub fn get(&self, expert: ExpertId) -> f64 {
        match expert {
            ExpertId::Full => self.full,
            ExpertId::Day => self.day,
            ExpertId::Night => self.night,
        }
    }
}

/// Linear scaling rule: each sub-domain expert's rate is the full rate times
/// its domain's share of all training sequences.
pub fn scaled_lr(lr_full: f64, counts: &DomainCounts) -> Result<LrTable> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::config("cannot scale learning rates: no training samples"));
    }
    let mut warnings = Vec::new();
    let mut rate = |domain: Domain| {
        let n = counts.domain_total(domain);
        if n == 0 {
            let msg = format!("no {domain} training samples; the {domain} expert gets learning rate 0");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        lr_full * n as f64 / total as f64
    };
    let day = rate(Domain::Day);
    let night = rate(Domain::Night);
    Ok(LrTable {
        full: lr_full,
        day,
        night,
        warnings,
    })
}

/// Indices into a batch, partitioned by domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoutedBatch {
    pub full: Vec<usize>,
    pub day: Vec<usize>,
    pub night: Vec<usize>,
}

impl RoutedBatch {
    pub fn for_expert(&self, expert: ExpertId) -> &[usize] {
        match expert {
            ExpertId::Full => &self.full,
            ExpertId::Day => &self.day,
            ExpertId::Night => &self.night,
        }
    }
}

pub fn route_batch(domains: &[Domain]) -> Result<RoutedBatch> {
    if domains.is_empty() {
        return Err(Error::contract("cannot route an empty batch"));
    }
    let pick = |z: Domain| domains.iter().enumerate().filter(|(_, &d)| d == z).map(|(i, _)| i).collect();
    Ok(RoutedBatch {
        full: (0..domains.len()).collect(),
        day: pick(Domain::Day),
        night: pick(Domain::Night),
    })
}

/// Resizes the frames and flows to `size × size` and, when `flip` is set,
/// mirrors frames and flows together (negating horizontal displacement).
pub fn apply_augmentation(frames: &[RgbImage; 3], flows: &FlowPair, size: usize, flip: bool) -> ([RgbImage; 3], FlowPair) {
    let s = size as u32;
    let resized = frames.each_ref().map(|f| resize_rgb(f, s, s));
    let flows = flows.resize(size, size);
    if flip {
        (resized.each_ref().map(flip_rgb), flows.flip_horizontal())
    } else {
        (resized, flows)
    }
}

/// [`apply_augmentation`] with one Bernoulli(`flip_prob`) draw from `seed`.
pub fn augment(frames: &[RgbImage; 3], flows: &FlowPair, size: usize, flip_prob: f64, seed: u64) -> ([RgbImage; 3], FlowPair) {
    let flip = ChaCha8Rng::seed_from_u64(seed).random_bool(flip_prob);
    apply_augmentation(frames, flows, size, flip)
}

/// A batch ready for the network.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub ids: Vec<String>,
    /// `(B · 3, 3, H, W)`, frames of a sequence contiguous.
    pub images: Tensor,
    pub classes: Vec<usize>,
    pub domains: Vec<Domain>,
    /// Flows at CAM resolution.
    pub flows: Vec<FlowPair>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a batch from already augmented sequences.
    pub fn from_sequences(
        model: &ExpertModel,
        items: &[(&str, &[RgbImage; 3], &FlowPair, usize, Domain)],
    ) -> Result<Self> {
        let cam = model.config().cam_size();
        let mut images = Vec::with_capacity(items.len() * 3);
        let mut batch = TrainBatch {
            ids: Vec::new(),
            images: Tensor::zeros(1, model.dtype(), model.device())?,
            classes: Vec::new(),
            domains: Vec::new(),
            flows: Vec::new(),
        };
        for &(id, frames, flows, class, domain) in items {
            images.extend(frames.iter());
            batch.ids.push(id.to_string());
            batch.classes.push(class);
            batch.domains.push(domain);
            batch.flows.push(flows.downscale(cam, cam)?);
        }
        batch.images = images_to_tensor(&images, model.dtype(), model.device())?;
        Ok(batch)
    }
}

/// Loss tensors of one expert.
#[derive(Clone, Debug)]
pub struct ExpertLoss {
    pub total: Tensor,
    pub cls: Tensor,
    pub fc: Option<Tensor>,
}

/// Per-expert losses of one batch; `None` for experts with no routed samples
/// (or disabled sub-domain experts).
#[derive(Clone, Debug)]
pub struct ExpertLosses {
    pub full: ExpertLoss,
    pub day: Option<ExpertLoss>,
    pub night: Option<ExpertLoss>,
}

fn expert_loss(
    model: &ExpertModel,
    expert: ExpertId,
    features: &Tensor,
    batch: &TrainBatch,
    members: &[usize],
    cfg: &TrainConfig,
) -> Result<ExpertLoss> {
    let (_, c, h, w) = features.dims4()?;
    let n = members.len();
    let feats = if members.len() == batch.len() {
        features.clone()
    } else {
        // Frames of sequence i occupy rows 3i..3i+3.
        let rows: Vec<u32> = members.iter().flat_map(|&i| (3 * i as u32)..(3 * i as u32 + 3)).collect();
        let rows = Tensor::from_vec(rows, 3 * n, features.device())?;
        features.index_select(&rows, 0)?
    };
    debug_assert_eq!(feats.dims(), &[3 * n, c, h, w]);
    let head = model.head(expert);
    let out = head.forward(&feats)?;
    let classes: Vec<usize> = members.iter().map(|&i| batch.classes[i]).collect();
    let logits = out.logits.reshape((n, 3, model.num_classes()))?;
    let cls = focal_loss_frames(&logits, &classes, cfg.loss.gamma)?.mean(0)?;
    let beta = cfg.effective_beta();
    let fc = if beta > 0.0 {
        let frame_classes: Vec<usize> = classes.iter().flat_map(|&y| [y; 3]).collect();
        let cams = head.class_activation_maps(&out.features, &frame_classes)?;
        let (_, ch, cw) = cams.dims3()?;
        let cams = cams.reshape((n, 3, ch, cw))?;
        let flows: Vec<&FlowPair> = members.iter().map(|&i| &batch.flows[i]).collect();
        Some(flow_consistency_loss_batch(&cams, &flows, &cfg.loss)?.mean(0)?)
    } else {
        None
    };
    let total = match &fc {
        Some(fc) => total_loss(&cls, fc, beta)?,
        None => cls.clone(),
    };
    Ok(ExpertLoss { total, cls, fc })
}

/// Forward pass for every expert with gradient routing applied.
pub fn expert_losses(model: &ExpertModel, batch: &TrainBatch, cfg: &TrainConfig) -> Result<ExpertLosses> {
    let routed = route_batch(&batch.domains)?;
    let features = model.backbone_features(&batch.images)?;
    let full = expert_loss(model, ExpertId::Full, &features, batch, &routed.full, cfg)?;
    let mut sub = [None, None];
    if cfg.domain_experts {
        let detached = features.detach();
        for (slot, expert) in sub.iter_mut().zip([ExpertId::Day, ExpertId::Night]) {
            let members = routed.for_expert(expert);
            if !members.is_empty() {
                *slot = Some(expert_loss(model, expert, &detached, batch, members, cfg)?);
            }
        }
    }
    let [day, night] = sub;
    Ok(ExpertLosses { full, day, night })
}

/// SGD with heavy-ball momentum, one velocity buffer per parameter.
#[derive(Debug, Default)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Steps every parameter in `params` that has a gradient in `grads`.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can carry autograd history; keep the optimizer state free of it.
            let g = g.detach();
            let g = if self.weight_decay > 0.0 {
                (g + (var.as_tensor().detach() * self.weight_decay)?)?
            } else {
                g
            };
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum > 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(var.as_tensor().detach() - (&v * lr)?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Scalar losses reported by [`train_step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub full: f64,
    pub day: Option<f64>,
    pub night: Option<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimisation step. The backbone and full head step at the full rate;
/// each sub-domain head steps at its own rate and only when it saw samples.
pub fn train_step(
    model: &ExpertModel,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    lrs: &LrTable,
    optimizer: &mut Sgd,
) -> Result<LossReport> {
    let losses = expert_losses(model, batch, cfg)?;
    let report = LossReport {
        full: scalar(&losses.full.total)?,
        day: losses.day.as_ref().map(|l| scalar(&l.total)).transpose()?,
        night: losses.night.as_ref().map(|l| scalar(&l.total)).transpose()?,
    };
    let finite = report.full.is_finite() && report.day.unwrap_or(0.0).is_finite() && report.night.unwrap_or(0.0).is_finite();
    if !finite {
        log::error!("non-finite loss {report:?} on batch {:?}", batch.ids);
        return Err(Error::NonFiniteLoss(batch.ids.clone()));
    }
    let mut objective = losses.full.total.clone();
    for l in [&losses.day, &losses.night].into_iter().flatten() {
        objective = (objective + &l.total)?;
    }
    let grads = objective.backward()?;
    optimizer.step(&model.group_params(ParamGroup::Backbone), &grads, lrs.full)?;
    for expert in ExpertId::ALL {
        optimizer.step(&model.group_params(ParamGroup::Expert(expert)), &grads, lrs.get(expert))?;
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_full")]
    pub l_full: f64,
    #[serde(rename = "L_day")]
    pub l_day: Option<f64>,
    #[serde(rename = "L_night")]
    pub l_night: Option<f64>,
    pub lr_table: LrTable,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub model: ExpertModel,
    pub epochs: Vec<EpochRecord>,
    pub lr_table: LrTable,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

struct LoadedSequence {
    sample: SequenceSample,
    frames: [RgbImage; 3],
    flows: FlowPair,
}

/// Reads a sequence's three frames and its past/future flow files.
pub fn load_sequence(root: &Path, sample: &SequenceSample) -> Result<([RgbImage; 3], FlowPair)> {
    let [a, b, c] = &sample.frames;
    let frames = [load_rgb(root.join(a))?, load_rgb(root.join(b))?, load_rgb(root.join(c))?];
    let flow = |rel: PathBuf| -> Result<FlowField> {
        let path = root.join(rel);
        if !path.is_file() {
            return Err(Error::MissingFlow {
                id: sample.id.clone(),
                path,
            });
        }
        FlowField::read_flo(path)
    };
    let flows = FlowPair {
        past: flow(sample.past_flow_path())?,
        future: flow(sample.future_flow_path())?,
    };
    let (w, h) = frames[0].dimensions();
    if flows.width() != w as usize || flows.height() != h as usize || flows.future.width() != w as usize {
        return Err(Error::Mismatch(format!("flow and frame sizes differ for sequence {}", sample.id)));
    }
    Ok((frames, flows))
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ a.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ b.wrapping_mul(0x94d0_49bb_1331_11eb)
}

/// Trains a model on the manifest's training split and writes
/// `final.safetensors`, `best.safetensors` (lowest mean full-expert loss) and
/// the JSON-lines log to `output_dir`. Frame and flow paths resolve against
/// `data_root`. The training seed also seeds the parameter initialisation.
pub fn fit(
    manifest: &DatasetManifest,
    data_root: &Path,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    output_dir: &Path,
) -> Result<FitOutput> {
    cfg.validate()?;
    if model_config.num_classes != manifest.num_classes() {
        return Err(Error::Mismatch(format!(
            "model has {} classes but the manifest has {}",
            model_config.num_classes,
            manifest.num_classes()
        )));
    }
    let train: Vec<&SequenceSample> = manifest.samples_in(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::config("manifest has no training samples"));
    }
    let data = train
        .iter()
        .map(|&s| {
            let (frames, flows) = load_sequence(data_root, s)?;
            Ok(LoadedSequence {
                sample: s.clone(),
                frames,
                flows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;

    let mut model_config = model_config.clone();
    model_config.domain_experts = cfg.domain_experts;
    model_config.seed = cfg.seed;
    let model = ExpertModel::build(&model_config, DType::F32, &Device::Cpu)?;
    let lr_table = scaled_lr(cfg.lr_full, &manifest.counts())?;
    let mut optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);

    let log_path = output_dir.join(TRAIN_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = output_dir.join(FINAL_CHECKPOINT);
    let best_checkpoint = output_dir.join(BEST_CHECKPOINT);
    let mut best = f64::INFINITY;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let started = Instant::now();
    let size = model_config.input_size;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0)));
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let seq = &data[i];
                    let seed = derive_seed(cfg.seed, epoch as u64, i as u64 + 1);
                    augment(&seq.frames, &seq.flows, size, cfg.flip_prob, seed)
                })
                .collect();
            let items: Vec<_> = chunk
                .iter()
                .zip(&augmented)
                .map(|(&i, (frames, flows))| {
                    let s = &data[i].sample;
                    (s.id.as_str(), frames, flows, s.class_label, s.domain)
                })
                .collect();
            let batch = TrainBatch::from_sequences(&model, &items)?;
            let report = train_step(&model, &batch, cfg, &lr_table, &mut optimizer)?;
            for (k, v) in [Some(report.full), report.day, report.night].into_iter().enumerate() {
                if let Some(v) = v {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        let record = EpochRecord {
            epoch,
            l_full: mean(0).unwrap_or(0.0),
            l_day: mean(1),
            l_night: mean(2),
            lr_table: lr_table.clone(),
            wallclock_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L_full {:.5} L_day {:?} L_night {:?}",
            record.l_full,
            record.l_day,
            record.l_night
        );
        writeln!(log_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
        if record.l_full < best {
            best = record.l_full;
            model.save(&best_checkpoint)?;
        }
        epochs.push(record);
    }
    model.save(&final_checkpoint)?;
    Ok(FitOutput {
        model,
        epochs,
        lr_table,
        final_checkpoint,
        best_checkpoint,
        log_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::detect_domain_rgb;
    use crate::imaging::make_night;
    use image::Rgb;

    #[test]
    fn scaled_lr_examples() {
        let t = scaled_lr(0.01, &DomainCounts(vec![[100, 300], [200, 400]])).unwrap();
        assert!((t.day - 0.003).abs() < 1e-15 && (t.night - 0.007).abs() < 1e-15);
        assert_eq!(t.full, 0.01);

        let t = scaled_lr(0.02, &DomainCounts(vec![[5, 5]])).unwrap();
        assert_eq!(t.day, 0.01);
        assert_eq!(t.night, 0.01);

        let t = scaled_lr(0.01, &DomainCounts(vec![[5, 0], [3, 0]])).unwrap();
        assert_eq!((t.day, t.night), (0.01, 0.0));
        assert_eq!(t.warnings.len(), 1);

        assert!(scaled_lr(0.01, &DomainCounts(vec![[0, 0]])).is_err());
    }

    #[test]
    fn route_examples() {
        use Domain::*;
        let r = route_batch(&[Day, Night, Day, Day, Night]).unwrap();
        assert_eq!((r.full.len(), r.day.len(), r.night.len()), (5, 3, 2));
        assert_eq!(r.night, vec![1, 4]);
        let r = route_batch(&[Day, Day]).unwrap();
        assert!(r.night.is_empty());
        assert!(route_batch(&[]).is_err());
    }

    fn toy_frames() -> ([RgbImage; 3], FlowPair) {
        let frames = [0u8, 1, 2].map(|k| {
            RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 9 + k as u32) as u8, (y * 13) as u8, 77]))
        });
        let mut mask = vec![false; 256];
        for y in 4..8 {
            for x in 2..6 {
                mask[y * 16 + x] = true;
            }
        }
        let flows = crate::synthgen::analytic_flow(&mask, 16, 16, [3, 0]);
        (frames, flows)
    }

    #[test]
    fn augment_flip_is_consistent() {
        let (frames, flows) = toy_frames();
        let (plain, plain_flow) = apply_augmentation(&frames, &flows, 16, false);
        assert_eq!(plain, frames);
        assert_eq!(plain_flow, flows);

        let (flipped, flipped_flow) = apply_augmentation(&frames, &flows, 16, true);
        // u = +3 at (2, 4) moves to the mirrored column with u = -3
        assert_eq!(flipped_flow.future.get(13, 4), [-3.0, 0.0]);
        assert_eq!(flipped_flow.past.get(13, 4), [3.0, 0.0]);
        assert_eq!(flipped[0].get_pixel(15, 0), frames[0].get_pixel(0, 0));

        let (twice, twice_flow) = apply_augmentation(&flipped, &flipped_flow, 16, true);
        assert_eq!(twice, frames);
        assert_eq!(twice_flow, flows);
    }

    #[test]
    fn warp_then_flip_equals_flip_then_warp() {
        use crate::losses::warp;
        let (_, flows) = toy_frames();
        let map: Vec<f64> = (0..256).map(|i| ((i * 37) % 101) as f64).collect();
        let m = Tensor::from_vec(map, (16, 16), &Device::Cpu).unwrap();
        let flip = |t: &Tensor| {
            let idx = Tensor::from_vec((0..16u32).rev().collect::<Vec<_>>(), 16, &Device::Cpu).unwrap();
            t.index_select(&idx, 1).unwrap()
        };
        let a = flip(&warp(&m, &flows.future).unwrap());
        let b = warp(&flip(&m), &flows.future.flip_horizontal()).unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn augment_preserves_night() {
        let (frames, flows) = toy_frames();
        let night = frames.each_ref().map(|f| make_night(f, 0.8));
        for seed in 0..4 {
            let (out, _) = augment(&night, &flows, 24, 0.5, seed);
            assert!(out.iter().all(|f| detect_domain_rgb(f, 0) == Domain::Night));
        }
    }

    #[test]
    fn sgd_momentum_update() {
        let v = Var::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let params = vec![("p".to_string(), v.clone())];
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..2 {
            let loss = v.as_tensor().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&params, &grads, 0.1).unwrap();
        }
        // v1 = 1, v2 = 1.9; total displacement 0.1 * 2.9
        let got = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - (1.0 - 0.29)).abs() < 1e-12);
        assert!((got[1] - (2.0 - 0.29)).abs() < 1e-12);
    }
}
