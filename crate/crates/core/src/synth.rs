//! Synthetic clip and caption generators for tests, fixtures, and the
//! toy training corpus. Everything is seeded and deterministic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Uniform noise image in [0, amplitude), one channel.
pub fn noise_image(seed: u64, h: usize, w: usize, amplitude: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w).map(|_| rng.gen_range(0.0..amplitude)).collect()
}

/// Noise frame tensor [1, h, w, 1] in [-1, 1).
pub fn noise_frame(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![1, h, w, 1],
        (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("finite noise")
}

/// A high-contrast textured square translating horizontally at `speed`
/// pixels/frame over a faint static background texture. The flow pipeline
/// should read an intensity close to `speed` off such a clip: the square
/// supplies the above-threshold foreground, the background stays put.
pub fn moving_square_clip(
    seed: u64,
    h: usize,
    w: usize,
    frames: usize,
    side: usize,
    speed: f64,
) -> Tensor {
    let bg = noise_image(seed, h, w, 0.05);
    let obj = noise_image(seed.wrapping_add(1), side, side, 1.0);
    let x_start = 4usize;
    let y0 = (h - side) / 2;
    let max_x = x_start + (speed * (frames - 1) as f64).round() as usize + side;
    assert!(max_x <= w, "square leaves the frame: {max_x} > {w}");

    let mut data = Vec::with_capacity(frames * h * w);
    for i in 0..frames {
        let xi = x_start + (speed * i as f64).round() as usize;
        let mut frame = bg.clone();
        for oy in 0..side {
            for ox in 0..side {
                frame[(y0 + oy) * w + xi + ox] = obj[oy * side + ox];
            }
        }
        data.extend_from_slice(&frame);
    }
    Tensor::new(vec![frames, h, w, 1], data).expect("finite clip")
}

/// A smooth Gaussian blob oscillating horizontally around the frame center
/// with the given amplitude (pixels), over a static textured background.
/// Amplitude 0 produces a bitwise-static clip.
pub fn oscillating_blob_clip(seed: u64, size: usize, frames: usize, amplitude: f64) -> Tensor {
    let bg = noise_image(seed, size, size, 0.15);
    let center = (size as f64 - 1.0) / 2.0;
    let sigma = size as f64 / 7.0;
    let mut data = Vec::with_capacity(frames * size * size);
    for i in 0..frames {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / frames as f64;
        let cx = center + amplitude * phase.sin();
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - center;
                let dx = x as f64 - cx;
                let blob = 1.5 * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                data.push(bg[y * size + x] + blob);
            }
        }
    }
    Tensor::new(vec![frames, size, size, 1], data).expect("finite clip")
}

const CAPTION_SUBJECTS: &[&str] = &[
    "a young woman",
    "an older man",
    "a stylized portrait",
    "a person with glasses",
    "a singer",
];

const CAPTION_SCENES: &[&str] = &[
    "in a bright room",
    "against a plain backdrop",
    "under warm light",
    "near a window",
];

const ACTIONS: &[&str] = &["smiling", "talking", "nodding slowly", "blinking", "turning head"];

/// Deterministic toy caption for fixture manifests.
pub fn toy_caption(id: u64) -> String {
    let subject = CAPTION_SUBJECTS[(id as usize) % CAPTION_SUBJECTS.len()];
    let scene = CAPTION_SCENES[(id as usize / CAPTION_SUBJECTS.len()) % CAPTION_SCENES.len()];
    format!("{subject} {scene}")
}

/// Deterministic toy action phrase.
pub fn toy_action(id: u64) -> String {
    ACTIONS[(id as usize) % ACTIONS.len()].to_string()
}
