//! Training objectives.
//!
//! * focal classification loss, summed over the three frames of a sequence;
//! * backward bilinear warping of a map by a fixed flow field;
//! * SSIM with a uniform window and reflection padding;
//! * the SSIM + L1 photometric loss on jointly min-max normalised maps;
//! * flow consistency between the frame-2 CAM and the warped frame-1/frame-3 CAMs.
//!
//! All functions are batched over a leading dimension and differentiable with
//! respect to the map/logit tensors. Flows are plain data and never differentiated.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowField, FlowPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Focal exponent.
    pub gamma: f64,
    /// SSIM share of the photometric loss.
    pub alpha: f64,
    /// Weight of the flow-consistency term.
    pub beta: f64,
    /// Side of the uniform SSIM window; odd.
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 5.0,
            alpha: 0.85,
            beta: 0.02,
            ssim_window: 3,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        check_window(self.ssim_window)?;
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::config("SSIM constants must be positive"));
        }
        Ok(())
    }
}

fn check_window(window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::config(format!("SSIM window must be odd and >= 1, got {window}")));
    }
    Ok(())
}

/// `log Σ exp(x)` over the last dimension, keeping it.
fn logsumexp_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&max)?)
}

/// Focal loss per sequence for logits `(B, F, C)` and one target per sequence;
/// returns `(B,)`, each entry `-Σ_j (1 - p_j)^γ log p_j` with `p_j` the softmax
/// probability of the target in frame `j`.
///
/// `log(1 - p)` is evaluated as `logsumexp(non-target logits) - logsumexp(all)`,
/// which stays finite for saturated predictions.
pub fn focal_loss_frames(logits: &Tensor, targets: &[usize], gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    let (b, f, c) = logits.dims3()?;
    if targets.len() != b {
        return Err(Error::contract(format!("{} targets for {b} sequences", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
        return Err(Error::contract(format!("target {bad} out of range for {c} classes")));
    }
    let device = logits.device();
    let idx: Vec<u32> = targets.iter().flat_map(|&y| std::iter::repeat_n(y as u32, f)).collect();
    let idx = Tensor::from_vec(idx, (b, f, 1), device)?;
    let mut mask = vec![0f64; b * c];
    for (i, &y) in targets.iter().enumerate() {
        mask[i * c + y] = -1e30;
    }
    let mask = Tensor::from_vec(mask, (b, 1, c), device)?.to_dtype(logits.dtype())?;

    let lse = logsumexp_last(logits)?;
    let log_p = logits.gather(&idx, D::Minus1)?.sub(&lse)?;
    let lse_others = logsumexp_last(&logits.broadcast_add(&mask)?)?;
    let log_1mp = lse_others.sub(&lse)?;
    let weight = (log_1mp * gamma)?.exp()?;
    let per_frame = weight.mul(&log_p)?.neg()?; // (B, F, 1)
    Ok(per_frame.squeeze(2)?.sum(1)?)
}

/// Focal loss of one sequence: `logits` is `(F, C)`.
pub fn focal_loss(logits: &Tensor, class: usize, gamma: f64) -> Result<Tensor> {
    Ok(focal_loss_frames(&logits.unsqueeze(0)?, &[class], gamma)?.squeeze(0)?)
}

/// Row-major `(hw × hw)` matrix `S` with `warp(m) = S · m` for backward bilinear
/// sampling at `p + flow(p)`, sample coordinates clamped to the map.
pub fn sampling_matrix(flow: &FlowField) -> Vec<f64> {
    let (w, h) = (flow.width(), flow.height());
    let n = w * h;
    let mut s = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.get(x, y);
            let sx = (x as f64 + u as f64).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + v as f64).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let row = &mut s[(y * w + x) * n..(y * w + x + 1) * n];
            row[y0 * w + x0] += (1.0 - fx) * (1.0 - fy);
            row[y0 * w + x1] += fx * (1.0 - fy);
            row[y1 * w + x0] += (1.0 - fx) * fy;
            row[y1 * w + x1] += fx * fy;
        }
    }
    s
}

/// Backward-warps each map of `maps` (`(B, h, w)`) by the matching flow.
pub fn warp_batch(maps: &Tensor, flows: &[&FlowField]) -> Result<Tensor> {
    let (b, h, w) = maps.dims3()?;
    if flows.len() != b {
        return Err(Error::contract(format!("{} flows for {b} maps", flows.len())));
    }
    let mut data = Vec::with_capacity(b * h * w * h * w);
    for flow in flows {
        if flow.width() != w || flow.height() != h {
            return Err(Error::contract(format!(
                "flow is {}x{} but map is {w}x{h}",
                flow.width(),
                flow.height()
            )));
        }
        data.extend(sampling_matrix(flow));
    }
    let s = Tensor::from_vec(data, (b, h * w, h * w), maps.device())?.to_dtype(maps.dtype())?;
    let out = s.matmul(&maps.reshape((b, h * w, 1))?)?;
    Ok(out.reshape((b, h, w))?)
}

/// Backward-warps one `(h, w)` map.
pub fn warp(map: &Tensor, flow: &FlowField) -> Result<Tensor> {
    Ok(warp_batch(&map.unsqueeze(0)?, &[flow])?.squeeze(0)?)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Transposed `(hw × hw)` local-mean operator of a uniform `window × window`
/// filter with reflection padding, so that `local_mean = m · P`.
fn box_filter_operator(h: usize, w: usize, window: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = h * w;
    let r = (window / 2) as isize;
    let norm = 1.0 / (window * window) as f64;
    let mut p = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            let out = y * w + x;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    let xx = reflect(x as isize + dx, w);
                    p[(yy * w + xx) * n + out] += norm;
                }
            }
        }
    }
    Ok(Tensor::from_vec(p, (n, n), device)?.to_dtype(dtype)?)
}

/// Mean SSIM index of each pair of `(B, h, w)` maps; returns `(B,)`.
pub fn ssim_batch(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<Tensor> {
    check_window(window)?;
    let (n, h, w) = a.dims3()?;
    if b.dims() != a.dims() {
        return Err(Error::contract(format!("SSIM inputs differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let p = box_filter_operator(h, w, window, a.dtype(), a.device())?;
    let a = a.reshape((n, h * w))?;
    let b = b.reshape((n, h * w))?;
    let mean = |x: &Tensor| x.matmul(&p);
    let mu_a = mean(&a)?;
    let mu_b = mean(&b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = mean(&a.sqr()?)?.sub(&mu_aa)?;
    let var_b = mean(&b.sqr()?)?.sub(&mu_bb)?;
    let cov = mean(&a.mul(&b)?)?.sub(&mu_ab)?;
    let num = ((mu_ab * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_aa + mu_bb)? + c1)?.mul(&((var_a + var_b)? + c2)?)?;
    Ok(num.div(&den)?.mean(1)?)
}

/// Mean SSIM index of two `(h, w)` maps.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<Tensor> {
    Ok(ssim_batch(&a.unsqueeze(0)?, &b.unsqueeze(0)?, window, c1, c2)?.squeeze(0)?)
}

/// Jointly min-max normalises each `(a, b)` pair of `(B, h, w)` maps to `[0, 1]`.
/// A constant pair maps to all zeros.
pub fn joint_normalize(a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, h, w) = a.dims3()?;
    let both = Tensor::cat(&[a.reshape((n, h * w))?, b.reshape((n, h * w))?], 1)?;
    // Clamped warps repeat border values, so the extremes are often tied.
    // Gathering one index keeps the gradient from being counted once per tie.
    let lo = both.gather(&both.argmin_keepdim(1)?, 1)?;
    let hi = both.gather(&both.argmax_keepdim(1)?, 1)?;
    let range = hi.sub(&lo)?;
    let degenerate: Vec<f64> = range
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|r| if r > 0.0 { 0.0 } else { 1.0 })
        .collect();
    let guard = Tensor::from_vec(degenerate, (n, 1), a.device())?.to_dtype(a.dtype())?;
    let denom = range.add(&guard)?.unsqueeze(2)?;
    let lo = lo.unsqueeze(2)?;
    let norm = |x: &Tensor| -> Result<Tensor> { Ok(x.broadcast_sub(&lo)?.broadcast_div(&denom)?) };
    Ok((norm(a)?, norm(b)?))
}

/// `α/2 · (1 - SSIM) + (1 - α) · mean|a - b|` per pair after joint min-max
/// normalisation; returns `(B,)`.
pub fn photometric_loss_batch(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!(
            "photometric inputs differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (a, b) = joint_normalize(a, b)?;
    let s = ssim_batch(&a, &b, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)?;
    let l1 = a.sub(&b)?.abs()?.flatten_from(1)?.mean(1)?;
    let ssim_term = (s.neg()? + 1.0)? * (cfg.alpha / 2.0);
    Ok((ssim_term? + (l1 * (1.0 - cfg.alpha))?)?)
}

/// Photometric loss of two `(h, w)` maps.
pub fn photometric_loss(a: &Tensor, b: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    Ok(photometric_loss_batch(&a.unsqueeze(0)?, &b.unsqueeze(0)?, cfg)?.squeeze(0)?)
}

/// Flow consistency of per-frame CAMs `(B, 3, h, w)`:
/// `L_ph(M2, warp(M1, past)) + L_ph(M2, warp(M3, future))`; returns `(B,)`.
pub fn flow_consistency_loss_batch(cams: &Tensor, flows: &[&FlowPair], cfg: &LossConfig) -> Result<Tensor> {
    let (_, f, h, w) = cams.dims4()?;
    if f != 3 {
        return Err(Error::contract(format!("expected CAMs of 3 frames, got {f}")));
    }
    if let Some(bad) = flows.iter().find(|p| p.width() != w || p.height() != h) {
        return Err(Error::contract(format!(
            "flow resolution {}x{} does not match CAM resolution {w}x{h}",
            bad.width(),
            bad.height()
        )));
    }
    let frame = |j: usize| -> Result<Tensor> { Ok(cams.narrow(1, j, 1)?.squeeze(1)?) };
    let (m1, m2, m3) = (frame(0)?, frame(1)?, frame(2)?);
    let past: Vec<&FlowField> = flows.iter().map(|p| &p.past).collect();
    let future: Vec<&FlowField> = flows.iter().map(|p| &p.future).collect();
    let warped1 = warp_batch(&m1, &past)?;
    let warped3 = warp_batch(&m3, &future)?;
    Ok((photometric_loss_batch(&m2, &warped1, cfg)? + photometric_loss_batch(&m2, &warped3, cfg)?)?)
}

/// Flow consistency of one sequence's CAMs `(3, h, w)`.
pub fn flow_consistency_loss(cams: &Tensor, flows: &FlowPair, cfg: &LossConfig) -> Result<Tensor> {
    Ok(flow_consistency_loss_batch(&cams.unsqueeze(0)?, &[flows], cfg)?.squeeze(0)?)
}

/// `cls + β · fc`. With `β = 0` the classification loss is returned unchanged.
pub fn total_loss(cls: &Tensor, fc: &Tensor, beta: f64) -> Result<Tensor> {
    if beta == 0.0 {
        return Ok(cls.clone());
    }
    Ok(cls.add(&(fc * beta)?)?)
}
