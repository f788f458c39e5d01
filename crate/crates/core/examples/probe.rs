use mchar_core::flow::*;
use mchar_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// candidate fixture: smooth object texture over faint background
fn clip(seed: u64, h: usize, w: usize, frames: usize, side: usize, speed: f64,
        bg_amp: f64, obj_hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..bg_amp)).collect();
    // smooth object texture: bilinear upsample of a coarse 4px lattice + sharp detail
    let lat = side / 4 + 2;
    let coarse: Vec<f64> = (0..lat * lat).map(|_| rng.gen_range(0.0..1.0)).collect();
    let fine: Vec<f64> = (0..side * side).map(|_| if obj_hi > 0.0 { rng.gen_range(0.0..obj_hi) } else { 0.0 }).collect();
    let mut obj = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let fy = y as f64 / 4.0;
            let fx = x as f64 / 4.0;
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let s = coarse[y0 * lat + x0] * (1.0 - ty) * (1.0 - tx)
                + coarse[y0 * lat + x0 + 1] * (1.0 - ty) * tx
                + coarse[(y0 + 1) * lat + x0] * ty * (1.0 - tx)
                + coarse[(y0 + 1) * lat + x0 + 1] * ty * tx;
            obj[y * side + x] = s + fine[y * side + x];
        }
    }
    let x_start = 4usize;
    let y0 = (h - side) / 2;
    let mut data = Vec::new();
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
    Tensor::new(vec![frames, h, w, 1], data).unwrap()
}

fn main() {
    for (bg_amp, obj_hi, side) in [(0.05, 0.0, 16), (0.01, 0.15, 16), (0.01, 0.15, 20), (0.02, 0.3, 20), (0.01, 0.3, 24)] {
        println!("bg={bg_amp} hi={obj_hi} side={side}");
        for speed in [1.0, 2.0, 3.0, 4.0] {
            let c = clip(8, 64, 64, 5, side, speed, bg_amp, obj_hi);
            let (m, ann) = video_motion_intensity(&c).unwrap();
            let worst = ann.fg_means.iter().map(|f| (f - speed).abs()).fold(0.0, f64::max);
            println!("  speed {speed}: M={m:.3} worst pair err={worst:.3} counts={:?}", ann.fg_counts);
        }
    }
}
