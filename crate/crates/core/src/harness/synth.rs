//! Procedural segmentation images: colored rectangles, disks and striped bands
//! over a textured gray background.

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::config::SynthConfig;
use crate::error::Result;
use crate::par;
use crate::tensor::{Shape, Tensor};

pub const BACKGROUND: u8 = 0;
pub const RECTANGLE: u8 = 1;
pub const DISK: u8 = 2;
pub const STRIPE_BAND: u8 = 3;

/// One image `(1, 3, s, s)` in `[0, 1]` with its `s * s` label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape().h
    }
}

fn sample_rng(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
        ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}

#[derive(Clone, Copy)]
enum Figure {
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Band {
        nx: f64,
        ny: f64,
        offset: f64,
        half: f64,
        period: f64,
    },
}

impl Figure {
    fn class(&self) -> u8 {
        match self {
            Figure::Rect { .. } => RECTANGLE,
            Figure::Disk { .. } => DISK,
            Figure::Band { .. } => STRIPE_BAND,
        }
    }

    /// Whether pixel centre `(x, y)` is covered, and a shading factor.
    fn cover(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            Figure::Rect { x0, y0, x1, y1 } => {
                (x >= x0 && x < x1 && y >= y0 && y < y1).then_some(1.0)
            }
            Figure::Disk { cx, cy, r } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                (d2 <= r * r).then(|| 1.0 - 0.25 * d2 / (r * r))
            }
            Figure::Band {
                nx,
                ny,
                offset,
                half,
                period,
            } => {
                let along = x * nx + y * ny - offset;
                if along.abs() > half {
                    return None;
                }
                let across = -x * ny + y * nx;
                let phase = (across / period).rem_euclid(1.0);
                Some(if phase < 0.5 { 1.0 } else { 0.7 })
            }
        }
    }
}

fn draw_figure(rng: &mut Xoshiro256PlusPlus, s: f64) -> Figure {
    match rng.gen_range(0..3) {
        0 => {
            let w = rng.gen_range(s / 6.0..s / 2.0);
            let h = rng.gen_range(s / 6.0..s / 2.0);
            let x0 = rng.gen_range(-w / 4.0..s - 3.0 * w / 4.0);
            let y0 = rng.gen_range(-h / 4.0..s - 3.0 * h / 4.0);
            Figure::Rect {
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
            }
        }
        1 => Figure::Disk {
            cx: rng.gen_range(0.1 * s..0.9 * s),
            cy: rng.gen_range(0.1 * s..0.9 * s),
            r: rng.gen_range(s / 10.0..s / 4.0),
        },
        _ => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (ny, nx) = theta.sin_cos();
            // offset so the band passes through the central region
            let centre = 0.5 * s * (nx + ny);
            Figure::Band {
                nx,
                ny,
                offset: centre + rng.gen_range(-0.3 * s..0.3 * s),
                half: rng.gen_range(s / 16.0..s / 8.0),
                period: rng.gen_range(3.0..6.0),
            }
        }
    }
}

fn base_color(class: u8) -> [f64; 3] {
    match class {
        RECTANGLE => [0.80, 0.30, 0.25],
        DISK => [0.25, 0.75, 0.30],
        STRIPE_BAND => [0.25, 0.35, 0.85],
        _ => [0.50, 0.50, 0.50],
    }
}

/// Renders image `index` of the dataset seeded by `seed`.
pub fn generate_sample(seed: u64, index: usize, size: usize) -> Sample {
    let mut rng = sample_rng(seed, index);
    let s = size as f64;
    let plane = size * size;
    loop {
        let count = rng.gen_range(2..=5);
        let figures: Vec<(Figure, [f64; 3])> = (0..count)
            .map(|_| {
                let f = draw_figure(&mut rng, s);
                let mut color = base_color(f.class());
                for c in &mut color {
                    *c += rng.gen_range(-0.12..0.12);
                }
                (f, color)
            })
            .collect();
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
        let (fx, fy, ph) = (
            rng.gen_range(0.15..0.6),
            rng.gen_range(0.15..0.6),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );

        let mut labels = vec![BACKGROUND; plane];
        let mut data = vec![0.0; 3 * plane];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * size + x;
                let texture = 0.08 * (fx * px + ph).sin() * (fy * py).cos();
                let mut rgb: [f64; 3] = std::array::from_fn(|c| 0.5 + tint[c] + texture);
                // later figures are drawn on top
                for (f, color) in &figures {
                    if let Some(shade) = f.cover(px, py) {
                        labels[i] = f.class();
                        rgb = color.map(|v| v * shade);
                    }
                }
                for c in 0..3 {
                    let noise = rng.gen_range(-0.05..0.05);
                    data[c * plane + i] = (rgb[c] + noise).clamp(0.0, 1.0);
                }
            }
        }
        let mut seen = [false; 4];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().filter(|&&b| b).count() >= 2 {
            let shape = Shape {
                n: 1,
                c: 3,
                h: size,
                w: size,
            };
            let image = Tensor::from_vec(shape, data).expect("image size");
            return Sample { image, labels };
        }
    }
}

/// Images `start_index..start_index + num_images`; each depends only on
/// `(seed, index)`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let start = cfg.start_index;
    Ok(generate_range(
        cfg.seed,
        start..start + cfg.num_images,
        cfg.size,
    ))
}

pub fn generate_range(seed: u64, range: std::ops::Range<usize>, size: usize) -> Vec<Sample> {
    let start = range.start;
    par::map_indices(range.len(), |i| generate_sample(seed, start + i, size))
}

/// Pixel count per class over a set of samples.
pub fn class_histogram(samples: &[Sample], classes: usize) -> Vec<u64> {
    let mut h = vec![0u64; classes];
    for s in samples {
        for &l in &s.labels {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
    }
    h
}
