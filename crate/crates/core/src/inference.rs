//! Single-image prediction with norm-scaled fusion of the full expert and the
//! expert of the image's detected domain.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data_model::{detect_domain_rgb, DatasetManifest, Domain, Split, FRAMES_PER_SEQUENCE};
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, load_rgb, resize_rgb};
use crate::network::{ExpertId, ExpertModel};

/// Default channel tolerance used to tell IR frames from colour frames.
pub const DEFAULT_GRAY_TOLERANCE: u8 = 0;

/// `x̃_z = sqrt(sqnorm_z / sqnorm_full) · x_z`.
pub fn scale_sub_logits(sub_logits: &[f64], sqnorm_sub: f64, sqnorm_full: f64) -> Result<Vec<f64>> {
    if !(sqnorm_full > 0.0) {
        return Err(Error::DegenerateModel(format!(
            "full-expert classifier has squared norm {sqnorm_full}"
        )));
    }
    let ratio = sqnorm_sub.sqrt() / sqnorm_full.sqrt();
    Ok(sub_logits.iter().map(|x| ratio * x).collect())
}

/// Elementwise mean of two logit vectors.
pub fn fuse(full: &[f64], scaled_sub: &[f64]) -> Vec<f64> {
    assert_eq!(full.len(), scaled_sub.len(), "logit vectors differ in length");
    full.iter().zip(scaled_sub).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub domain: Domain,
    pub y_pred: usize,
    pub fused_logits: Vec<f64>,
    pub full_logits: Vec<f64>,
    /// Raw logits of the domain expert, absent when domain experts are disabled.
    pub sub_logits: Option<Vec<f64>>,
    /// `sqrt(sqnorm_z / sqnorm_full)`.
    pub scale: Option<f64>,
    /// Experts whose heads ran, in call order.
    pub experts: Vec<ExpertId>,
}

fn logits_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Predicts every image independently; images are resized to the model's
/// input resolution first. With domain experts disabled the full expert's
/// logits are used unchanged.
pub fn predict_batch(model: &ExpertModel, images: &[&RgbImage], tolerance: u8) -> Result<Vec<Prediction>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let s = model.config().input_size as u32;
    let resized: Vec<RgbImage> = images.iter().map(|img| resize_rgb(img, s, s)).collect();
    let refs: Vec<&RgbImage> = resized.iter().collect();
    let input = images_to_tensor(&refs, model.dtype(), model.device())?;
    let features = model.backbone_features(&input)?;
    let full = logits_rows(&model.head(ExpertId::Full).forward(&features)?.logits)?;
    let domains: Vec<Domain> = images.iter().map(|img| detect_domain_rgb(img, tolerance)).collect();

    let mut preds: Vec<Prediction> = full
        .into_iter()
        .zip(&domains)
        .map(|(full_logits, &domain)| Prediction {
            domain,
            y_pred: argmax(&full_logits),
            fused_logits: full_logits.clone(),
            full_logits,
            sub_logits: None,
            scale: None,
            experts: vec![ExpertId::Full],
        })
        .collect();
    if !model.config().domain_experts {
        return Ok(preds);
    }

    let sqnorm_full = model.head(ExpertId::Full).classifier_weight_sqnorm()?;
    for domain in Domain::ALL {
        let members: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == domain).collect();
        if members.is_empty() {
            continue;
        }
        let expert = ExpertId::for_domain(domain);
        let head = model.head(expert);
        let idx = Tensor::from_vec(members.iter().map(|&i| i as u32).collect::<Vec<_>>(), members.len(), features.device())?;
        let sub = logits_rows(&head.forward(&features.index_select(&idx, 0)?)?.logits)?;
        let sqnorm_sub = head.classifier_weight_sqnorm()?;
        for (&i, sub_logits) in members.iter().zip(sub) {
            let p = &mut preds[i];
            let scaled = scale_sub_logits(&sub_logits, sqnorm_sub, sqnorm_full)?;
            p.fused_logits = fuse(&p.full_logits, &scaled);
            p.y_pred = argmax(&p.fused_logits);
            p.scale = Some((sqnorm_sub / sqnorm_full).sqrt());
            p.sub_logits = Some(sub_logits);
            p.experts.push(expert);
        }
    }
    Ok(preds)
}

pub fn predict(model: &ExpertModel, image: &RgbImage, tolerance: u8) -> Result<Prediction> {
    Ok(predict_batch(model, &[image], tolerance)?.remove(0))
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sequence_id: String,
    /// Frame index within the sequence, 0-based.
    pub frame: usize,
    pub domain: Domain,
    pub y_true: usize,
    pub y_pred: usize,
    pub fused_logits: Vec<f64>,
}

/// Predicts the test split: the first frame of each sequence, or all three
/// frames when `per_frame` is set.
pub fn predict_split(
    model: &ExpertModel,
    manifest: &DatasetManifest,
    data_root: &Path,
    split: Split,
    per_frame: bool,
    tolerance: u8,
) -> Result<Vec<PredictionRecord>> {
    if model.num_classes() != manifest.num_classes() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} classes but the manifest has {}",
            model.num_classes(),
            manifest.num_classes()
        )));
    }
    let frames = if per_frame { FRAMES_PER_SEQUENCE } else { 1 };
    let mut records = Vec::new();
    for sample in manifest.samples_in(split) {
        for frame in 0..frames {
            let img = load_rgb(data_root.join(&sample.frames[frame]))?;
            let p = predict(model, &img, tolerance)?;
            records.push(PredictionRecord {
                sequence_id: sample.id.clone(),
                frame,
                domain: p.domain,
                y_true: sample.class_label,
                y_pred: p.y_pred,
                fused_logits: p.fused_logits,
            });
        }
    }
    Ok(records)
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::make_night;
    use crate::network::ModelConfig;
    use candle_core::Device;
    use image::Rgb;

    #[test]
    fn scale_examples() {
        assert_eq!(scale_sub_logits(&[1.0, -1.0], 4.0, 16.0).unwrap(), vec![0.5, -0.5]);
        assert_eq!(scale_sub_logits(&[0.3, 2.0], 7.0, 7.0).unwrap(), vec![0.3, 2.0]);
        assert_eq!(scale_sub_logits(&[0.0, 0.0], 3.0, 5.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(scale_sub_logits(&[1.0], 1.0, 0.0), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn fuse_and_argmax_examples() {
        assert_eq!(fuse(&[2.0, 0.0], &[0.0, 1.0]), vec![1.0, 0.5]);
        assert_eq!(fuse(&[0.2, -3.0], &[0.2, -3.0]), vec![0.2, -3.0]);
        assert_eq!(argmax(&[1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.7, 0.7]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    fn model(domain_experts: bool) -> ExpertModel {
        let cfg = ModelConfig {
            input_size: 32,
            domain_experts,
            ..ModelConfig::tiny(4)
        };
        ExpertModel::build(&cfg, DType::F32, &Device::Cpu).unwrap()
    }

    fn colour(seed: u32) -> RgbImage {
        RgbImage::from_fn(40, 40, |x, y| Rgb([(x * 5 + seed) as u8, (y * 3) as u8, ((x + y) * 2) as u8]))
    }

    #[test]
    fn gray_image_routes_to_night_expert() {
        let m = model(true);
        let night = make_night(&colour(3), 0.9);
        let p = predict(&m, &night, 0).unwrap();
        assert_eq!(p.domain, Domain::Night);
        assert_eq!(p.experts, vec![ExpertId::Full, ExpertId::Night]);

        let p = predict(&m, &colour(3), 0).unwrap();
        assert_eq!(p.experts, vec![ExpertId::Full, ExpertId::Day]);
        assert_eq!(p.y_pred, argmax(&p.fused_logits));
    }

    #[test]
    fn fusion_matches_manual_formula() {
        let m = model(true);
        let p = predict(&m, &colour(11), 0).unwrap();
        let sq_full = m.head(ExpertId::Full).classifier_weight_sqnorm().unwrap();
        let sq_day = m.head(ExpertId::Day).classifier_weight_sqnorm().unwrap();
        let sub = p.sub_logits.as_ref().unwrap();
        for c in 0..4 {
            let want = (p.full_logits[c] + (sq_day / sq_full).sqrt() * sub[c]) / 2.0;
            assert!((p.fused_logits[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn without_domain_experts_only_full_runs() {
        let m = model(false);
        let p = predict(&m, &make_night(&colour(1), 1.0), 0).unwrap();
        assert_eq!(p.experts, vec![ExpertId::Full]);
        assert_eq!(p.fused_logits, p.full_logits);
    }

    #[test]
    fn batch_equals_single() {
        let m = model(true);
        let imgs = [colour(0), make_night(&colour(5), 0.7), colour(9)];
        let refs: Vec<&RgbImage> = imgs.iter().collect();
        let batch = predict_batch(&m, &refs, 0).unwrap();
        for (img, b) in imgs.iter().zip(&batch) {
            let single = predict(&m, img, 0).unwrap();
            assert_eq!(single.y_pred, b.y_pred);
            assert_eq!(single.experts, b.experts);
            for (x, y) in single.fused_logits.iter().zip(&b.fused_logits) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn prediction_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![PredictionRecord {
            sequence_id: "c00_day_0000".into(),
            frame: 0,
            domain: Domain::Day,
            y_true: 1,
            y_pred: 0,
            fused_logits: vec![0.25, -1.5],
        }];
        let path = dir.path().join("p.jsonl");
        write_predictions(&recs, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), recs);
    }
}
