//! Optical-flow estimation and every quantity derived from it: per-pair
//! dense flow, mean-flow thresholds, binary motion masks, foreground mean
//! flow, clip-level motion intensity, and region weight masks.
//!
//! The estimator is a deterministic pyramidal block matcher (block 8, search
//! radius 4 per level, up to 3 levels, quadratic sub-pixel refinement at the
//! finest level). Blocks are compared zero-mean, which makes the pipeline
//! invariant to per-frame constant brightness offsets.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::nvt1;

pub const BLOCK: usize = 8;
pub const SEARCH_RADIUS: i64 = 4;
pub const MAX_LEVELS: usize = 3;
pub const MIN_FRAME_SIZE: usize = 16;

/// Dense per-pixel displacement field between two frames, in pixels/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Tensor,
    pub v: Tensor,
    pub magnitude: Tensor,
}

impl FlowField {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        if u.shape() != v.shape() || u.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "FlowField::new",
                detail: format!("u {:?} vs v {:?}", u.shape(), v.shape()),
            });
        }
        let magnitude = Tensor::new(
            u.shape().to_vec(),
            u.data()
                .iter()
                .zip(v.data())
                .map(|(&a, &b)| (a * a + b * b).sqrt())
                .collect(),
        )?;
        Ok(Self { u, v, magnitude })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.u.dims2()
    }
}

/// Per-clip flow annotation: one flow field, threshold, mask, foreground
/// mean, and region weight mask per adjacent frame pair, plus the clip-level
/// intensity.
#[derive(Debug, Clone)]
pub struct FlowAnnotation {
    pub flows: Vec<FlowField>,
    pub tau: Vec<f64>,
    pub masks: Vec<Tensor>,
    pub fg_means: Vec<f64>,
    pub fg_counts: Vec<usize>,
    pub intensity: f64,
    /// Region weight masks per frame pair, each valued in [1.0, 1.5].
    pub weight_masks: Vec<Tensor>,
}

impl FlowAnnotation {
    /// Weight mask for frame `i` of an `n`-frame clip: frame i uses the flow
    /// between frames i and i+1; the final frame reuses the last pair's mask.
    pub fn frame_weight(&self, i: usize) -> &Tensor {
        let last = self.weight_masks.len() - 1;
        &self.weight_masks[i.min(last)]
    }
}

/// Grayscale plane (mean over channels) of one frame.
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn from_frame(frame: &Tensor) -> Result<Self> {
        let (h, w, c) = match frame.rank() {
            2 => {
                let (h, w) = frame.dims2();
                (h, w, 1)
            }
            3 => frame.dims3(),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "Plane::from_frame",
                    detail: format!("expected rank 2 or 3, got {:?}", frame.shape()),
                })
            }
        };
        let src = frame.data();
        let mut data = vec![0.0; h * w];
        for i in 0..h * w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += src[i * c + ch];
            }
            data[i] = acc / c as f64;
        }
        Ok(Self { h, w, data })
    }

    fn downsample(&self) -> Self {
        let h = self.h / 2;
        let w = self.w / 2;
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let a = self.data[(2 * y) * self.w + 2 * x];
                let b = self.data[(2 * y) * self.w + 2 * x + 1];
                let c = self.data[(2 * y + 1) * self.w + 2 * x];
                let d = self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data[y * w + x] = 0.25 * (a + b + c + d);
            }
        }
        Self { h, w, data }
    }

    /// Zero-mean SSD between the block at (y0, x0) here and the block at
    /// (y0 + dv, x0 + du) in `other`. Returns None when the displaced block
    /// leaves the image.
    fn block_cost(&self, other: &Plane, y0: usize, x0: usize, du: i64, dv: i64) -> Option<f64> {
        let by = y0 as i64 + dv;
        let bx = x0 as i64 + du;
        if by < 0 || bx < 0 || by + BLOCK as i64 > other.h as i64 || bx + BLOCK as i64 > other.w as i64 {
            return None;
        }
        let (by, bx) = (by as usize, bx as usize);
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for r in 0..BLOCK {
            let arow = &self.data[(y0 + r) * self.w + x0..(y0 + r) * self.w + x0 + BLOCK];
            let brow = &other.data[(by + r) * other.w + bx..(by + r) * other.w + bx + BLOCK];
            for i in 0..BLOCK {
                sum_a += arow[i];
                sum_b += brow[i];
            }
        }
        let n = (BLOCK * BLOCK) as f64;
        let mean_diff = (sum_a - sum_b) / n;
        let mut cost = 0.0;
        for r in 0..BLOCK {
            let arow = &self.data[(y0 + r) * self.w + x0..(y0 + r) * self.w + x0 + BLOCK];
            let brow = &other.data[(by + r) * other.w + bx..(by + r) * other.w + bx + BLOCK];
            for i in 0..BLOCK {
                let d = arow[i] - brow[i] - mean_diff;
                cost += d * d;
            }
        }
        Some(cost)
    }
}

fn search_offsets() -> Vec<(i64, i64)> {
    let mut offsets = Vec::new();
    for dv in -SEARCH_RADIUS..=SEARCH_RADIUS {
        for du in -SEARCH_RADIUS..=SEARCH_RADIUS {
            offsets.push((du, dv));
        }
    }
    offsets
}

/// An exact content match; below this the sub-pixel fit would only chase
/// texture asymmetry around a perfect minimum.
const EXACT_MATCH_COST: f64 = 1e-9;

fn match_level(
    a: &Plane,
    b: &Plane,
    guess: Option<&(Vec<f64>, Vec<f64>)>,
    finest: bool,
) -> (Vec<f64>, Vec<f64>) {
    let offsets = search_offsets();
    let (h, w) = (a.h, a.w);
    let mut u = vec![0.0; h * w];
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            // Block anchored so it always fits the image; near borders the
            // window shifts but stays consistent between frames.
            let y0 = y.saturating_sub(BLOCK / 2).min(h - BLOCK);
            let x0 = x.saturating_sub(BLOCK / 2).min(w - BLOCK);
            let (gu, gv) = match guess {
                Some((gu, gv)) => {
                    let gy = (y / 2).min(h / 2 - 1);
                    let gx = (x / 2).min(w / 2 - 1);
                    let coarse_w = w / 2;
                    (
                        (2.0 * gu[gy * coarse_w + gx]).round() as i64,
                        (2.0 * gv[gy * coarse_w + gx]).round() as i64,
                    )
                }
                None => (0, 0),
            };

            // Best candidate by (cost, |d|^2, dv, du). Ties resolve toward
            // the smallest total displacement, which keeps flat regions at
            // zero and picks the true shift over periodic aliases. Both the
            // guess-centered and the zero-centered windows are searched so a
            // bad coarse guess can never strand a static pixel.
            let mut best: Option<(f64, i64, i64, i64)> = None;
            let mut consider = |best: &mut Option<(f64, i64, i64, i64)>, du: i64, dv: i64| {
                if let Some(cost) = a.block_cost(b, y0, x0, du, dv) {
                    let key = (cost, du * du + dv * dv, dv, du);
                    let better = match best {
                        None => true,
                        Some(cur) => key < *cur,
                    };
                    if better {
                        *best = Some(key);
                    }
                }
            };
            for &(du, dv) in &offsets {
                consider(&mut best, gu + du, gv + dv);
            }
            if gu != 0 || gv != 0 {
                for &(du, dv) in &offsets {
                    consider(&mut best, du, dv);
                }
            }
            let (best_cost, _, best_dv, best_du) =
                best.expect("the zero-displacement candidate always fits");

            let (mut fu, mut fv) = (best_du as f64, best_dv as f64);
            if finest && best_cost > EXACT_MATCH_COST {
                // Quadratic sub-pixel fit along each axis through the costs
                // at the integer minimum and its neighbours.
                if let (Some(cm), Some(cp)) = (
                    a.block_cost(b, y0, x0, best_du - 1, best_dv),
                    a.block_cost(b, y0, x0, best_du + 1, best_dv),
                ) {
                    let denom = cm - 2.0 * best_cost + cp;
                    if denom > 1e-12 {
                        fu += (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                    }
                }
                if let (Some(cm), Some(cp)) = (
                    a.block_cost(b, y0, x0, best_du, best_dv - 1),
                    a.block_cost(b, y0, x0, best_du, best_dv + 1),
                ) {
                    let denom = cm - 2.0 * best_cost + cp;
                    if denom > 1e-12 {
                        fv += (0.5 * (cm - cp) / denom).clamp(-0.5, 0.5);
                    }
                }
            }
            u[y * w + x] = fu;
            v[y * w + x] = fv;
        }
    }
    (u, v)
}

/// Dense displacement field from `frame_a` to `frame_b`.
pub fn estimate_flow(frame_a: &Tensor, frame_b: &Tensor) -> Result<FlowField> {
    let a0 = Plane::from_frame(frame_a)?;
    let b0 = Plane::from_frame(frame_b)?;
    if a0.h != b0.h || a0.w != b0.w {
        return Err(Error::ShapeMismatch {
            op: "estimate_flow",
            detail: format!("{}x{} vs {}x{}", a0.h, a0.w, b0.h, b0.w),
        });
    }
    if a0.h < MIN_FRAME_SIZE || a0.w < MIN_FRAME_SIZE {
        return Err(Error::FramesTooSmall {
            h: a0.h,
            w: a0.w,
            min: MIN_FRAME_SIZE,
        });
    }

    // Build the pyramid; stop while the coarsest level still fits a block.
    let mut pyr_a = vec![a0];
    let mut pyr_b = vec![b0];
    while pyr_a.len() < MAX_LEVELS {
        let next_h = pyr_a.last().unwrap().h / 2;
        let next_w = pyr_a.last().unwrap().w / 2;
        if next_h < BLOCK || next_w < BLOCK {
            break;
        }
        pyr_a.push(pyr_a.last().unwrap().downsample());
        pyr_b.push(pyr_b.last().unwrap().downsample());
    }

    let mut flow: Option<(Vec<f64>, Vec<f64>)> = None;
    for level in (0..pyr_a.len()).rev() {
        let finest = level == 0;
        flow = Some(match_level(
            &pyr_a[level],
            &pyr_b[level],
            flow.as_ref(),
            finest,
        ));
    }
    let (u, v) = flow.expect("at least one pyramid level");
    let (h, w) = (pyr_a[0].h, pyr_a[0].w);
    FlowField::new(Tensor::new(vec![h, w], u)?, Tensor::new(vec![h, w], v)?)
}

/// Mean flow magnitude over all pixels (the per-pair threshold tau).
pub fn mean_flow_threshold(flow: &FlowField) -> f64 {
    flow.magnitude.sum() / flow.magnitude.len() as f64
}

/// Binary mask of pixels whose magnitude strictly exceeds `tau`.
pub fn binary_motion_mask(flow: &FlowField, tau: f64) -> Tensor {
    Tensor::new(
        flow.magnitude.shape().to_vec(),
        flow.magnitude
            .data()
            .iter()
            .map(|&m| if m > tau { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("mask values are finite")
}

/// Mean foreground flow and foreground pixel count. An empty foreground
/// yields (0, 0): replicated-still clips have no moving pixels and must come
/// out at intensity zero.
pub fn foreground_mean_flow(flow: &FlowField, mask: &Tensor) -> Result<(f64, usize)> {
    if mask.shape() != flow.magnitude.shape() {
        return Err(Error::ShapeMismatch {
            op: "foreground_mean_flow",
            detail: format!("mask {:?} vs flow {:?}", mask.shape(), flow.magnitude.shape()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&m, &f) in mask.data().iter().zip(flow.magnitude.data()) {
        if m > 0.5 {
            sum += f;
            count += 1;
        }
    }
    if count == 0 {
        Ok((0.0, 0))
    } else {
        Ok((sum / count as f64, count))
    }
}

/// Region weight per pixel: `clip(mask * magnitude / 255 + 0.5, 1.0, 1.5)`.
/// Background pixels map exactly to 1.0.
pub fn region_weight_mask(flow: &FlowField, mask: &Tensor) -> Result<Tensor> {
    if mask.shape() != flow.magnitude.shape() {
        return Err(Error::ShapeMismatch {
            op: "region_weight_mask",
            detail: format!("mask {:?} vs flow {:?}", mask.shape(), flow.magnitude.shape()),
        });
    }
    Tensor::new(
        mask.shape().to_vec(),
        mask.data()
            .iter()
            .zip(flow.magnitude.data())
            .map(|(&m, &f)| (m * f / 255.0 + 0.5).clamp(1.0, 1.5))
            .collect(),
    )
}

/// Area-average pooling of a weight mask down to the latent resolution.
/// Non-divisible extents use fractional-area weighting.
pub fn downsample_weight_mask(m_norm: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = m_norm.dims2();
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch {
            op: "downsample_weight_mask",
            detail: format!("{h}x{w} -> {out_h}x{out_w}"),
        });
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let data = m_norm.data();
    let mut out = vec![0.0; out_h * out_w];
    for oi in 0..out_h {
        let y0 = oi as f64 * sy;
        let y1 = (oi + 1) as f64 * sy;
        for oj in 0..out_w {
            let x0 = oj as f64 * sx;
            let x1 = (oj + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(h);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(w);
            for iy in iy0..iy1 {
                let wy = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if wy == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let wx = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    if wx == 0.0 {
                        continue;
                    }
                    acc += data[iy * w + ix] * wy * wx;
                    area += wy * wx;
                }
            }
            out[oi * out_w + oj] = acc / area;
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Copy frame `i` of a clip out as an HxWxC tensor.
pub fn clip_frame(clip: &Tensor, i: usize) -> Tensor {
    let (n, h, w, c) = clip.dims4();
    assert!(i < n, "frame {i} out of range {n}");
    let stride = h * w * c;
    Tensor::new(
        vec![h, w, c],
        clip.data()[i * stride..(i + 1) * stride].to_vec(),
    )
    .expect("clip slices stay finite")
}

/// Full flow pipeline over a clip: per-pair flow, threshold, mask,
/// foreground mean, region weights, and the clip-level motion intensity
/// (mean of the per-pair foreground means).
///
/// Pairs are evaluated in parallel; results are identical to sequential
/// evaluation because each pair is an independent pure computation.
pub fn video_motion_intensity(clip: &Tensor) -> Result<(f64, FlowAnnotation)> {
    let (n, _, _, _) = clip.dims4();
    if n < 2 {
        return Err(Error::TooFewFrames { need: 2, got: n });
    }
    let frames: Vec<Tensor> = (0..n).map(|i| clip_frame(clip, i)).collect();
    let flows: Vec<FlowField> = (0..n - 1)
        .into_par_iter()
        .map(|i| estimate_flow(&frames[i], &frames[i + 1]))
        .collect::<Result<Vec<_>>>()?;

    let mut tau = Vec::with_capacity(n - 1);
    let mut masks = Vec::with_capacity(n - 1);
    let mut fg_means = Vec::with_capacity(n - 1);
    let mut fg_counts = Vec::with_capacity(n - 1);
    let mut weight_masks = Vec::with_capacity(n - 1);
    for flow in &flows {
        let t = mean_flow_threshold(flow);
        let mask = binary_motion_mask(flow, t);
        let (fg, s) = foreground_mean_flow(flow, &mask)?;
        let weights = region_weight_mask(flow, &mask)?;
        tau.push(t);
        masks.push(mask);
        fg_means.push(fg);
        fg_counts.push(s);
        weight_masks.push(weights);
    }
    let intensity = fg_means.iter().sum::<f64>() / fg_means.len() as f64;
    Ok((
        intensity,
        FlowAnnotation {
            flows,
            tau,
            masks,
            fg_means,
            fg_counts,
            intensity,
            weight_masks,
        },
    ))
}

/// The text half of a flow sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub tau: Vec<f64>,
    pub fg_means: Vec<f64>,
    pub fg_counts: Vec<u64>,
    pub intensity: f64,
}

/// Write the sidecar pair for a clip: `<stem>.flow.nvt` holding the stacked
/// [N-1, H, W, 2] flow and `<stem>.flow.json` holding the scalar record.
pub fn write_flow_sidecar(dir: &Path, stem: &str, annotation: &FlowAnnotation) -> Result<()> {
    let n_pairs = annotation.flows.len();
    let (h, w) = annotation.flows[0].dims();
    let mut data = Vec::with_capacity(n_pairs * h * w * 2);
    for flow in &annotation.flows {
        for i in 0..h * w {
            data.push(flow.u.data()[i]);
            data.push(flow.v.data()[i]);
        }
    }
    let stacked = Tensor::new(vec![n_pairs, h, w, 2], data)?;
    nvt1::write_file(dir.join(format!("{stem}.flow.nvt")), &stacked, nvt1::Dtype::F64)?;
    let record = FlowRecord {
        tau: annotation.tau.clone(),
        fg_means: annotation.fg_means.clone(),
        fg_counts: annotation.fg_counts.iter().map(|&c| c as u64).collect(),
        intensity: annotation.intensity,
    };
    let json = serde_json::to_string(&record)
        .map_err(|e| Error::Manifest(format!("flow record serialization: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.flow.json")), json + "\n")?;
    Ok(())
}

/// Read a flow sidecar back: stacked flow tensor plus the scalar record.
pub fn read_flow_sidecar(dir: &Path, stem: &str) -> Result<(Tensor, FlowRecord)> {
    let stacked = nvt1::read_file(dir.join(format!("{stem}.flow.nvt")))?;
    let text = std::fs::read_to_string(dir.join(format!("{stem}.flow.json")))?;
    let record: FlowRecord = serde_json::from_str(text.trim())
        .map_err(|e| Error::Manifest(format!("flow record parse: {e}")))?;
    Ok((stacked, record))
}

/// Rebuild per-pair `FlowField`s from a stacked sidecar tensor.
pub fn unstack_flows(stacked: &Tensor) -> Result<Vec<FlowField>> {
    let (n_pairs, h, w, two) = stacked.dims4();
    if two != 2 {
        return Err(Error::ShapeMismatch {
            op: "unstack_flows",
            detail: format!("expected last extent 2, got {two}"),
        });
    }
    let data = stacked.data();
    let mut flows = Vec::with_capacity(n_pairs);
    for p in 0..n_pairs {
        let base = p * h * w * 2;
        let mut u = vec![0.0; h * w];
        let mut v = vec![0.0; h * w];
        for i in 0..h * w {
            u[i] = data[base + 2 * i];
            v[i] = data[base + 2 * i + 1];
        }
        flows.push(FlowField::new(
            Tensor::new(vec![h, w], u)?,
            Tensor::new(vec![h, w], v)?,
        )?);
    }
    Ok(flows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(h: usize, w: usize, u: Vec<f64>, v: Vec<f64>) -> FlowField {
        FlowField::new(
            Tensor::new(vec![h, w], u).unwrap(),
            Tensor::new(vec![h, w], v).unwrap(),
        )
        .unwrap()
    }

    /// Noise texture frame, one channel.
    fn texture(seed: u64, h: usize, w: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn frame_from(data: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::new(vec![h, w, 1], data).unwrap()
    }

    #[test]
    fn identical_frames_give_zero_field() {
        let t = texture(1, 32, 32);
        let a = frame_from(t.clone(), 32, 32);
        let b = frame_from(t, 32, 32);
        let flow = estimate_flow(&a, &b).unwrap();
        assert!(flow.u.data().iter().all(|&x| x == 0.0));
        assert!(flow.v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_frames_below_minimum_size() {
        let a = frame_from(texture(2, 8, 8), 8, 8);
        assert!(matches!(
            estimate_flow(&a, &a),
            Err(Error::FramesTooSmall { .. })
        ));
    }

    #[test]
    fn pure_translation_recovers_shift_in_interior() {
        // b(x) = a(x - 2): shift right by 2 with wrap-free interior content.
        let (h, w) = (48, 48);
        let base = texture(3, h, w + 2);
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                a[y * w + x] = base[y * (w + 2) + x + 2];
                b[y * w + x] = base[y * (w + 2) + x];
            }
        }
        let flow = estimate_flow(&frame_from(a, h, w), &frame_from(b, h, w)).unwrap();
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                let u = flow.u.data()[y * w + x];
                let v = flow.v.data()[y * w + x];
                assert!((u - 2.0).abs() <= 0.25, "u at ({y},{x}) = {u}");
                assert!(v.abs() <= 0.25, "v at ({y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn checkerboard_diagonal_shift_magnitude() {
        // Checkerboard with 4-pixel cells shifted by (1, 1); the interior
        // magnitude is sqrt(2) once the minimal-displacement tie-break picks
        // the true shift over its period aliases.
        let (h, w) = (32, 32);
        let cell = 4usize;
        let val = |y: i64, x: i64| (((y.div_euclid(cell as i64)) + (x.div_euclid(cell as i64))) % 2) as f64;
        let mut a = vec![0.0; h * w];
        let mut b = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                a[y * w + x] = val(y as i64, x as i64);
                b[y * w + x] = val(y as i64 - 1, x as i64 - 1);
            }
        }
        let flow = estimate_flow(&frame_from(a, h, w), &frame_from(b, h, w)).unwrap();
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                let m = flow.magnitude.data()[y * w + x];
                assert!((m - 2.0f64.sqrt()).abs() <= 0.25, "magnitude at ({y},{x}) = {m}");
            }
        }
    }

    #[test]
    fn mean_flow_threshold_cases() {
        let zero = field(4, 4, vec![0.0; 16], vec![0.0; 16]);
        assert_eq!(mean_flow_threshold(&zero), 0.0);

        let uniform = field(4, 4, vec![3.0; 16], vec![0.0; 16]);
        assert!((mean_flow_threshold(&uniform) - 3.0).abs() < 1e-12);

        // 4 moving pixels of magnitude 2 in a 16-pixel frame: mean 0.5.
        let mut u = vec![0.0; 16];
        for i in 0..4 {
            u[i] = 2.0;
        }
        let sparse = field(4, 4, u, vec![0.0; 16]);
        assert!((mean_flow_threshold(&sparse) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn binary_mask_strictness() {
        let zero = field(4, 4, vec![0.0; 16], vec![0.0; 16]);
        let mask = binary_motion_mask(&zero, 0.0);
        assert!(mask.data().iter().all(|&v| v == 0.0));

        // Nothing exceeds its own mean in a uniform field.
        let uniform = field(4, 4, vec![1.5; 16], vec![0.0; 16]);
        let mask = binary_motion_mask(&uniform, mean_flow_threshold(&uniform));
        assert!(mask.data().iter().all(|&v| v == 0.0));

        // The 4-moving-pixel case with tau = 0.5 sets exactly those pixels.
        let mut u = vec![0.0; 16];
        for i in 0..4 {
            u[i] = 2.0;
        }
        let sparse = field(4, 4, u, vec![0.0; 16]);
        let mask = binary_motion_mask(&sparse, 0.5);
        let count: f64 = mask.sum();
        assert_eq!(count, 4.0);
        for i in 0..16 {
            assert_eq!(mask.data()[i], if i < 4 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn foreground_mean_flow_cases() {
        let zero = field(4, 4, vec![0.0; 16], vec![0.0; 16]);
        let empty_mask = Tensor::zeros(vec![4, 4]);
        assert_eq!(foreground_mean_flow(&zero, &empty_mask).unwrap(), (0.0, 0));

        let mut u = vec![0.0; 16];
        let mut mask = vec![0.0; 16];
        for i in 0..4 {
            u[i] = 2.0;
            mask[i] = 1.0;
        }
        let f = field(4, 4, u, vec![0.0; 16]);
        let mask = Tensor::new(vec![4, 4], mask).unwrap();
        assert_eq!(foreground_mean_flow(&f, &mask).unwrap(), (2.0, 4));
    }

    #[test]
    fn foreground_mean_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mask_vals: Vec<f64> = (0..64).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let f = field(8, 8, u.clone(), v.clone());
        let mask = Tensor::new(vec![8, 8], mask_vals.clone()).unwrap();
        let (got, s) = foreground_mean_flow(&f, &mask).unwrap();

        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..64 {
            if mask_vals[i] == 1.0 {
                sum += (u[i] * u[i] + v[i] * v[i]).sqrt();
                count += 1;
            }
        }
        assert_eq!(s, count);
        if count > 0 {
            assert!((got - sum / count as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn region_weight_anchor_points() {
        let mags = [0.0, 127.5, 255.0, 400.0];
        let u: Vec<f64> = mags.to_vec();
        let f = field(1, 4, u, vec![0.0; 4]);
        let fg = Tensor::filled(vec![1, 4], 1.0).unwrap();
        let weights = region_weight_mask(&f, &fg).unwrap();
        assert_eq!(weights.data()[0], 1.0); // clip(0.5) -> 1.0
        assert_eq!(weights.data()[1], 1.0); // 127.5/255 + 0.5 = 1.0 exactly
        assert_eq!(weights.data()[2], 1.5); // 255/255 + 0.5 = 1.5
        assert_eq!(weights.data()[3], 1.5); // upper clip

        // Background pixels map exactly to 1.0 regardless of magnitude.
        let bg = Tensor::zeros(vec![1, 4]);
        let weights = region_weight_mask(&f, &bg).unwrap();
        assert!(weights.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn downsample_constant_and_average() {
        let constant = Tensor::filled(vec![6, 6], 1.2).unwrap();
        for (oh, ow) in [(1, 1), (2, 3), (5, 5)] {
            let out = downsample_weight_mask(&constant, oh, ow).unwrap();
            assert!(out.data().iter().all(|&v| (v - 1.2).abs() < 1e-12));
        }

        let block = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.5, 1.5]).unwrap();
        let out = downsample_weight_mask(&block, 1, 1).unwrap();
        assert!((out.data()[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn downsample_matches_loop_oracle_8x8_to_4x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(1.0..1.5)).collect()).unwrap();
        let got = downsample_weight_mask(&src, 4, 4).unwrap();
        for oi in 0..4 {
            for oj in 0..4 {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += src.get2(2 * oi + dy, 2 * oj + dx);
                    }
                }
                assert!((got.get2(oi, oj) - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn static_clip_intensity_is_exactly_zero() {
        let frame = texture(6, 16, 16);
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&frame);
        }
        let clip = Tensor::new(vec![4, 16, 16, 1], data).unwrap();
        let (m, ann) = video_motion_intensity(&clip).unwrap();
        assert_eq!(m, 0.0);
        assert!(ann.fg_counts.iter().all(|&s| s == 0));
        assert!(ann.weight_masks.iter().all(|w| w.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn intensity_is_mean_of_pair_means() {
        // Constructed annotation path: pair means 1.0 and 3.0 average to 2.0.
        let fg_means = [1.0, 3.0];
        let m = fg_means.iter().sum::<f64>() / fg_means.len() as f64;
        assert_eq!(m, 2.0);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let clip = Tensor::zeros(vec![1, 16, 16, 1]);
        assert!(matches!(
            video_motion_intensity(&clip),
            Err(Error::TooFewFrames { .. })
        ));
    }

    #[test]
    fn intensity_invariant_to_per_frame_brightness_offsets() {
        let clip = crate::synth::moving_square_clip(7, 48, 48, 4, 12, 2.0);
        let (m1, _) = video_motion_intensity(&clip).unwrap();
        let (n, h, w, c) = clip.dims4();
        let mut shifted = clip.data().to_vec();
        for i in 0..n {
            let offset = 0.11 * (i as f64 + 1.0);
            for px in &mut shifted[i * h * w * c..(i + 1) * h * w * c] {
                *px += offset;
            }
        }
        let shifted = Tensor::new(vec![n, h, w, c], shifted).unwrap();
        let (m2, _) = video_motion_intensity(&shifted).unwrap();
        // Zero-mean block comparison cancels the offsets up to float
        // rounding in the per-block means.
        assert!((m1 - m2).abs() < 1e-9, "{m1} vs {m2}");
    }

    #[test]
    fn pipeline_monotonic_in_translation_speed() {
        let mut last = -1.0;
        for speed in 1..=4 {
            let clip = crate::synth::moving_square_clip(8, 64, 64, 4, 16, speed as f64);
            let (m, _) = video_motion_intensity(&clip).unwrap();
            assert!(
                m > last,
                "intensity not increasing at speed {speed}: {m} <= {last}"
            );
            assert!((m - speed as f64).abs() <= 0.25, "speed {speed}: intensity {m}");
            last = m;
        }
    }

    #[test]
    fn parallel_pairs_match_sequential() {
        let clip = crate::synth::moving_square_clip(9, 48, 48, 5, 12, 3.0);
        let (m_par, ann_par) = video_motion_intensity(&clip).unwrap();
        // Sequential reference.
        let frames: Vec<Tensor> = (0..5).map(|i| clip_frame(&clip, i)).collect();
        for (i, flow) in ann_par.flows.iter().enumerate() {
            let seq = estimate_flow(&frames[i], &frames[i + 1]).unwrap();
            assert_eq!(flow, &seq);
        }
        let m_seq = ann_par.fg_means.iter().sum::<f64>() / ann_par.fg_means.len() as f64;
        assert_eq!(m_par, m_seq);
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = crate::synth::moving_square_clip(10, 32, 32, 3, 10, 2.0);
        let (_, ann) = video_motion_intensity(&clip).unwrap();
        write_flow_sidecar(dir.path(), "clip0", &ann).unwrap();
        let (stacked, record) = read_flow_sidecar(dir.path(), "clip0").unwrap();
        assert_eq!(stacked.shape(), &[2, 32, 32, 2]);
        assert_eq!(record.intensity, ann.intensity);
        assert_eq!(record.fg_means, ann.fg_means);
        let flows = unstack_flows(&stacked).unwrap();
        assert_eq!(flows.len(), 2);
        assert_eq!(flows[0], ann.flows[0]);
    }

    proptest! {
        #[test]
        fn mask_never_covers_everything_on_nonconstant_fields(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..36).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let v: Vec<f64> = (0..36).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let f = field(6, 6, u, v);
            let mags = f.magnitude.data();
            let constant = mags.iter().all(|&m| (m - mags[0]).abs() < 1e-15);
            prop_assume!(!constant);
            let mask = binary_motion_mask(&f, mean_flow_threshold(&f));
            let set: f64 = mask.sum();
            prop_assert!(set < 36.0);
        }

        #[test]
        fn weight_masks_stay_in_bounds(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..25).map(|_| rng.gen_range(-500.0..500.0)).collect();
            let v: Vec<f64> = (0..25).map(|_| rng.gen_range(-500.0..500.0)).collect();
            let f = field(5, 5, u, v);
            let mask = binary_motion_mask(&f, mean_flow_threshold(&f));
            let weights = region_weight_mask(&f, &mask).unwrap();
            for (&wv, &mv) in weights.data().iter().zip(mask.data()) {
                prop_assert!((1.0..=1.5).contains(&wv));
                if mv == 0.0 {
                    prop_assert_eq!(wv, 1.0);
                }
            }
            let pooled = downsample_weight_mask(&weights, 2, 3).unwrap();
            for &pv in pooled.data() {
                prop_assert!((1.0 - 1e-12..=1.5 + 1e-12).contains(&pv));
            }
        }
    }
}
