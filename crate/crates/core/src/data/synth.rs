use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::{to_u8, ImageBuffer};

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Stripes { angle: f64, period: f64, x0: f64, y0: f64, x1: f64, y1: f64 },
}

/// Deterministic procedural test image: a smooth two-colour gradient
/// overlaid with rectangles, discs and striped patches.
pub fn synth_image(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let colour = |rng: &mut ChaCha8Rng| -> [f64; 3] {
        [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
    };
    let c0 = colour(&mut rng);
    let c1 = colour(&mut rng);
    let grad = rng.random_range(0.0..std::f64::consts::TAU);
    let n = 4 + (width * height / 1024).min(12);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n)
        .map(|_| {
            let x0 = rng.random_range(0.0..w);
            let y0 = rng.random_range(0.0..h);
            let x1 = x0 + rng.random_range(2.0..w.max(3.0) / 2.0);
            let y1 = y0 + rng.random_range(2.0..h.max(3.0) / 2.0);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Rect { x0, y0, x1, y1 },
                1 => Shape::Disc {
                    cx: x0,
                    cy: y0,
                    r: rng.random_range(1.5..w.min(h).max(3.0) / 3.0),
                },
                _ => Shape::Stripes {
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    period: rng.random_range(3.0..12.0),
                    x0,
                    y0,
                    x1,
                    y1,
                },
            };
            (shape, colour(&mut rng))
        })
        .collect();
    let (gx, gy) = (grad.cos(), grad.sin());
    let span = w * gx.abs() + h * gy.abs();
    ImageBuffer::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let t = ((px - w / 2.0) * gx + (py - h / 2.0) * gy) / span.max(1.0) + 0.5;
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = c0[i] * (1.0 - t) + c1[i] * t;
        }
        for (shape, col) in &shapes {
            let alpha = match *shape {
                Shape::Rect { x0, y0, x1, y1 } => (px >= x0 && px < x1 && py >= y0 && py < y1) as u8 as f64,
                Shape::Disc { cx, cy, r } => {
                    let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                    (r + 0.5 - d).clamp(0.0, 1.0)
                }
                Shape::Stripes { angle, period, x0, y0, x1, y1 } => {
                    if px >= x0 && px < x1 && py >= y0 && py < y1 {
                        let u = px * angle.cos() + py * angle.sin();
                        0.5 + 0.5 * (std::f64::consts::TAU * u / period).sin()
                    } else {
                        0.0
                    }
                }
            };
            for i in 0..3 {
                c[i] = c[i] * (1.0 - alpha) + col[i] * alpha;
            }
        }
        [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]
    })
    .expect("positive dimensions")
}
