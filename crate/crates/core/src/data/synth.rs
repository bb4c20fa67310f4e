//! Synthetic bitemporal pairs: textured scenes with shapes added or removed
//! between the two dates, and a regional photometric shift applied to the
//! second date.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::stats;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub size: usize,
    pub num_shapes: usize,
    pub max_added: usize,
    pub remove_prob: f64,
    pub style_strength: f64,
    pub noise_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            size: 64,
            num_shapes: 6,
            max_added: 2,
            remove_prob: 0.3,
            style_strength: 0.25,
            noise_sigma: 0.01,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::invalid("gen_config", format!("size {} is not a positive multiple of 32", self.size)));
        }
        if !(0.0..=1.0).contains(&self.remove_prob) || !(0.0..1.0).contains(&self.style_strength) || !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid(
                "gen_config",
                "need remove_prob in [0, 1], style_strength in [0, 1), noise_sigma >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Rect { row0: f64, col0: f64, rows: f64, cols: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Geometry {
    /// Whether the pixel centre `(r + 0.5, c + 0.5)` lies inside.
    pub fn covers(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match *self {
            Geometry::Rect { row0, col0, rows, cols } => {
                y >= row0 && y < row0 + rows && x >= col0 && x < col0 + cols
            }
            Geometry::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub geometry: Geometry,
    pub color: [f64; 3],
    pub in_a: bool,
    pub in_b: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wave {
    pub fy: f64,
    pub fx: f64,
    pub phase: f64,
    pub amp: [f64; 3],
}

/// Geometry and colours shared by both dates; shapes are painted in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
    pub shapes: Vec<Shape>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub style_strength: f64,
    pub num_shapes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePairSample {
    pub xa: Tensor<f64>,
    pub xb: Tensor<f64>,
    /// `1 x H x W`, 1 where the scene geometry differs.
    pub mask: Tensor<f64>,
    /// `1 x H x W`, 1 on unchanged pixels the affine style stage moved by at least
    /// one 8-bit level in some channel.
    pub style_shifted: Tensor<f64>,
    pub meta: SampleMeta,
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[f64; 3]) -> [f64; 3] {
    loop {
        let c = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let d: f64 = c.iter().zip(avoid).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if d >= 0.25 {
            return c;
        }
    }
}

fn random_geometry(rng: &mut ChaCha8Rng, size: usize) -> Geometry {
    let s = size as f64;
    if rng.random_bool(0.5) {
        let rows = rng.random_range(s / 10.0..s / 4.0);
        let cols = rng.random_range(s / 10.0..s / 4.0);
        Geometry::Rect {
            row0: rng.random_range(0.0..s - rows),
            col0: rng.random_range(0.0..s - cols),
            rows,
            cols,
        }
    } else {
        let r = rng.random_range(s / 16.0..s / 8.0);
        Geometry::Disc {
            cy: rng.random_range(r..s - r),
            cx: rng.random_range(r..s - r),
            r,
        }
    }
}

/// Random scene: `num_shapes` shapes at date A, each removed at date B
/// with `remove_prob`, plus up to `max_added` new ones.
pub fn generate_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    let base = [
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
        rng.random_range(0.25..0.75),
    ];
    let waves = (0..2)
        .map(|_| Wave {
            fy: rng.random_range(0.05..0.5),
            fx: rng.random_range(0.05..0.5),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amp: [
                rng.random_range(0.02..0.06),
                rng.random_range(0.02..0.06),
                rng.random_range(0.02..0.06),
            ],
        })
        .collect();
    let mut shapes = Vec::new();
    for _ in 0..cfg.num_shapes {
        let geometry = random_geometry(rng, cfg.size);
        let color = random_color(rng, &base);
        let in_b = !rng.random_bool(cfg.remove_prob);
        shapes.push(Shape {
            geometry,
            color,
            in_a: true,
            in_b,
        });
    }
    let added = rng.random_range(0..=cfg.max_added);
    for _ in 0..added {
        let geometry = random_geometry(rng, cfg.size);
        let color = random_color(rng, &base);
        shapes.push(Shape {
            geometry,
            color,
            in_a: false,
            in_b: true,
        });
    }
    Scene {
        size: cfg.size,
        base,
        waves,
        shapes,
    }
}

impl Scene {
    /// Index of the topmost shape covering each pixel at one date.
    pub fn labels(&self, date_b: bool) -> Vec<Option<usize>> {
        let s = self.size;
        let mut out = vec![None; s * s];
        for (k, sh) in self.shapes.iter().enumerate() {
            if (date_b && !sh.in_b) || (!date_b && !sh.in_a) {
                continue;
            }
            for r in 0..s {
                for c in 0..s {
                    if sh.geometry.covers(r, c) {
                        out[r * s + c] = Some(k);
                    }
                }
            }
        }
        out
    }

    /// Noise-free `3 x H x W` image of one date.
    pub fn render(&self, date_b: bool) -> Tensor<f64> {
        let s = self.size;
        let labels = self.labels(date_b);
        let mut data = vec![0.0; 3 * s * s];
        for r in 0..s {
            for c in 0..s {
                let color = labels[r * s + c].map_or(self.base, |k| self.shapes[k].color);
                for ch in 0..3 {
                    let tex: f64 = self
                        .waves
                        .iter()
                        .map(|w| w.amp[ch] * (w.fy * r as f64 + w.fx * c as f64 + w.phase).sin())
                        .sum();
                    data[ch * s * s + r * s + c] = (color[ch] + tex).clamp(0.0, 1.0);
                }
            }
        }
        Tensor::new(&[3, s, s], data).expect("sized")
    }

    /// `1 x H x W` change mask: pixels whose topmost shape differs.
    pub fn change_mask(&self) -> Tensor<f64> {
        let a = self.labels(false);
        let b = self.labels(true);
        let s = self.size;
        Tensor::new(
            &[1, s, s],
            a.iter().zip(&b).map(|(x, y)| if x != y { 1.0 } else { 0.0 }).collect(),
        )
        .expect("sized")
    }
}

/// Per-region per-channel affine shift on a random 2..=4 grid, Gaussian
/// noise, clamp to `[0, 1]`.
pub fn style_shift(x: &Tensor<f64>, strength: f64, noise_sigma: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let mut out = style_affine(x, strength, rng)?;
    add_noise(out.data_mut(), noise_sigma, rng)?;
    Ok(out)
}

/// The affine stage of [`style_shift`] alone, unclamped.
pub fn style_affine(x: &Tensor<f64>, strength: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid("style_shift", "expected C x H x W")),
    };
    let lambda = rng.random_range(2..=4).min(h.min(w));
    let grid = stats::make_grid(h, w, lambda)?;
    let mut out = x.data().to_vec();
    for b in &grid.boxes {
        for ch in 0..c {
            let (a, off) = if strength > 0.0 {
                (
                    rng.random_range(1.0 - strength..=1.0 + strength),
                    rng.random_range(-strength..=strength),
                )
            } else {
                (1.0, 0.0)
            };
            for o in b.offsets(w) {
                let v = &mut out[ch * h * w + o];
                *v = a * *v + off;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Gaussian sensor noise, then clamp to `[0, 1]`.
pub fn add_noise(values: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid("add_noise", e.to_string()))?;
        values.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(())
}

/// Deterministic pair for `seed`.
pub fn generate_pair(cfg: &GenConfig, seed: u64) -> Result<ImagePairSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_scene(cfg, &mut rng);
    sample_from_scene(&scene, cfg, seed, &mut rng)
}

pub fn sample_from_scene(scene: &Scene, cfg: &GenConfig, seed: u64, rng: &mut ChaCha8Rng) -> Result<ImagePairSample> {
    let mut xa = scene.render(false);
    let clean_b = scene.render(true);
    let mut xb = style_affine(&clean_b, cfg.style_strength, rng)?;
    let styled = xb.data().iter().map(|v| v.clamp(0.0, 1.0)).collect::<Vec<_>>();
    add_noise(xb.data_mut(), cfg.noise_sigma, rng)?;
    add_noise(xa.data_mut(), cfg.noise_sigma, rng)?;
    let mask = scene.change_mask();
    let s = scene.size;
    let level = 1.0 / 255.0;
    let shifted = (0..s * s)
        .map(|p| {
            let moved = (0..3).any(|ch| (styled[ch * s * s + p] - clean_b.data()[ch * s * s + p]).abs() >= level);
            if moved && mask.data()[p] == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok(ImagePairSample {
        xa,
        xb,
        mask,
        style_shifted: Tensor::new(&[1, s, s], shifted)?,
        meta: SampleMeta {
            seed,
            style_strength: cfg.style_strength,
            num_shapes: cfg.num_shapes,
        },
    })
}

/// Per-sample seed derived from a global seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(index))
}

/// `n` pairs generated in parallel from derived seeds.
pub fn generate_dataset(cfg: &GenConfig, n: usize, seed: u64) -> Result<Vec<ImagePairSample>> {
    cfg.validate()?;
    exec::map_indexed(n, |i| generate_pair(cfg, derive_seed(seed, i as u64)))
        .into_iter()
        .collect()
}
