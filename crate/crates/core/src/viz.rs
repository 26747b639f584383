//! Static visualisations: CAM heat-map overlays and colour-wheel flow images.

use candle_core::DType;
use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::flow::{FlowField, FlowPair};
use crate::imaging::{images_to_tensor, resize_plane, resize_rgb};
use crate::network::{ExpertId, ExpertModel};

pub const OVERLAY_ALPHA: f32 = 0.4;

/// Jet colour map on `[0, 1]`.
pub fn jet(t: f32) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f32| ((1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Min-max normalises into `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_map(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / range).collect()
}

/// Blends a `cam_w × cam_h` map, bilinearly upsampled to the frame, over the frame.
pub fn overlay_cam(frame: &RgbImage, cam: &[f32], cam_w: usize, cam_h: usize) -> RgbImage {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let up = normalize_map(&resize_plane(cam, cam_w, cam_h, w, h));
    RgbImage::from_fn(frame.width(), frame.height(), |x, y| {
        let heat = jet(up[y as usize * w + x as usize]);
        let px = frame.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|c| {
            ((1.0 - OVERLAY_ALPHA) * px[c] as f32 + OVERLAY_ALPHA * heat[c] as f32).round() as u8
        }))
    })
}

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

/// The 55-entry Middlebury colour wheel, starting at red.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| (255 * i / n) as f32;
    wheel.extend((0..RY).map(|i| [255.0, ramp(i, RY), 0.0]));
    wheel.extend((0..YG).map(|i| [255.0 - ramp(i, YG), 255.0, 0.0]));
    wheel.extend((0..GC).map(|i| [0.0, 255.0, ramp(i, GC)]));
    wheel.extend((0..CB).map(|i| [0.0, 255.0 - ramp(i, CB), 255.0]));
    wheel.extend((0..BM).map(|i| [ramp(i, BM), 0.0, 255.0]));
    wheel.extend((0..MR).map(|i| [255.0, 0.0, 255.0 - ramp(i, MR)]));
    wheel
}

/// Colour of a displacement already divided by the normalising radius.
pub fn flow_color(wheel: &[[f32; 3]], u: f32, v: f32) -> [u8; 3] {
    let n = wheel.len();
    let rad = (u * u + v * v).sqrt();
    let a = (-v).atan2(-u) / std::f32::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f32;
    let k0 = fk.floor() as usize % n;
    let k1 = (k0 + 1) % n;
    let f = fk - fk.floor();
    [0, 1, 2].map(|c| {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
        (255.0 * col).round() as u8
    })
}

/// Renders a flow field with the colour wheel, normalised by its largest
/// displacement. Zero motion is white.
pub fn flow_to_image(flow: &FlowField) -> RgbImage {
    let wheel = color_wheel();
    let max_rad = flow
        .data()
        .chunks_exact(2)
        .map(|uv| (uv[0] * uv[0] + uv[1] * uv[1]).sqrt())
        .fold(0.0f32, f32::max);
    let norm = if max_rad > 0.0 { max_rad } else { 1.0 };
    RgbImage::from_fn(flow.width() as u32, flow.height() as u32, |x, y| {
        let [u, v] = flow.get(x as usize, y as usize);
        Rgb(flow_color(&wheel, u / norm, v / norm))
    })
}

/// Rendered figure panels of one sequence.
#[derive(Clone, Debug)]
pub struct SequenceViz {
    pub overlays: [RgbImage; 3],
    pub past_flow: RgbImage,
    pub future_flow: RgbImage,
}

/// Full-expert CAMs of `class` for the three frames, overlaid at frame size,
/// plus both flow fields.
pub fn render_sequence_viz(model: &ExpertModel, frames: &[RgbImage; 3], flows: &FlowPair, class: usize) -> Result<SequenceViz> {
    let s = model.config().input_size as u32;
    let resized = frames.each_ref().map(|f| resize_rgb(f, s, s));
    let refs: Vec<&RgbImage> = resized.iter().collect();
    let input = images_to_tensor(&refs, model.dtype(), model.device())?;
    let head = model.head(ExpertId::Full);
    let out = head.forward(&model.backbone_features(&input)?)?;
    let cams = head.class_activation_maps(&out.features, &[class; 3])?;
    let (_, ch, cw) = cams.dims3()?;
    let cams = cams.to_dtype(DType::F32)?.to_vec3::<f32>()?;
    let overlay = |k: usize| {
        let flat: Vec<f32> = cams[k].iter().flatten().copied().collect();
        overlay_cam(&frames[k], &flat, cw, ch)
    };
    Ok(SequenceViz {
        overlays: [overlay(0), overlay(1), overlay(2)],
        past_flow: flow_to_image(&flows.past),
        future_flow: flow_to_image(&flows.future),
    })
}
