//! Procedural multispectral scenes with a scene-classification raster.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BANDS: usize = 12;

/// Scene-classification codes (public Sentinel-2 SCL numbering).
pub mod scl {
    pub const NO_DATA: u8 = 0;
    pub const SATURATED: u8 = 1;
    pub const DARK: u8 = 2;
    pub const CLOUD_SHADOW: u8 = 3;
    pub const VEGETATION: u8 = 4;
    pub const BARE_SOIL: u8 = 5;
    pub const WATER: u8 = 6;
    pub const UNCLASSIFIED: u8 = 7;
    pub const CLOUD_MEDIUM: u8 = 8;
    pub const CLOUD_HIGH: u8 = 9;
    pub const CIRRUS: u8 = 10;
    pub const SNOW: u8 = 11;
    pub const CLASS_COUNT: u8 = 12;

    pub fn is_cloud(code: u8) -> bool {
        code == CLOUD_MEDIUM || code == CLOUD_HIGH
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    /// `height x width x 12` reflectances in `[0, 1]`.
    pub reflectance: Vec<f32>,
    pub scl: Vec<u8>,
    pub seed: u64,
}

impl Scene {
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        &self.reflectance[(y * self.width + x) * BANDS..][..BANDS]
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.scl[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    /// Fraction of the scene in [0, 1] cloud-covered.
    pub cloud_density: f64,
    /// Blank out a triangular corner as no-data, like a granule edge.
    pub nodata_corner: bool,
    /// Feature size of the cloud field, in pixels.
    pub cloud_scale: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions { cloud_density: 0.3, nodata_corner: false, cloud_scale: 48.0 }
    }
}

// B1 B2 B3 B4 B5 B6 B7 B8 B8A B9 B11 B12
const VEGETATION: [f32; BANDS] = [0.03, 0.04, 0.07, 0.04, 0.10, 0.25, 0.30, 0.33, 0.34, 0.30, 0.17, 0.08];
const BARE_SOIL: [f32; BANDS] = [0.08, 0.10, 0.14, 0.18, 0.21, 0.24, 0.26, 0.27, 0.28, 0.27, 0.32, 0.26];
const WATER: [f32; BANDS] = [0.06, 0.05, 0.04, 0.03, 0.02, 0.015, 0.01, 0.01, 0.01, 0.01, 0.005, 0.003];
const DARK: [f32; BANDS] = [0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.03, 0.02, 0.02];
const SNOW: [f32; BANDS] = [0.85, 0.85, 0.83, 0.80, 0.78, 0.75, 0.72, 0.70, 0.68, 0.60, 0.10, 0.07];
const CLOUD: [f32; BANDS] = [0.70, 0.72, 0.73, 0.74, 0.74, 0.75, 0.75, 0.75, 0.75, 0.60, 0.55, 0.45];

/// Smooth value noise in [0, 1): bilinear interpolation of hashed lattice
/// values with a smoothstep fade, summed over octaves.
struct ValueNoise {
    seed: u64,
    scale: f64,
    octaves: u32,
}

impl ValueNoise {
    fn lattice(&self, octave: u32, gx: i64, gy: i64) -> f64 {
        let key = ((gx as u64) << 32) ^ (gy as u64 & 0xffff_ffff) ^ ((octave as u64) << 58);
        (Rng::draw_at(self.seed, key) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        let (mut sum, mut norm, mut amp, mut scale) = (0.0, 0.0, 1.0, self.scale);
        for o in 0..self.octaves {
            let fy = y as f64 / scale;
            let fx = x as f64 / scale;
            let (gy, gx) = (fy.floor(), fx.floor());
            let fade = |t: f64| t * t * (3.0 - 2.0 * t);
            let (ty, tx) = (fade(fy - gy), fade(fx - gx));
            let (gy, gx) = (gy as i64, gx as i64);
            let top = self.lattice(o, gx, gy) * (1.0 - tx) + self.lattice(o, gx + 1, gy) * tx;
            let bot = self.lattice(o, gx, gy + 1) * (1.0 - tx) + self.lattice(o, gx + 1, gy + 1) * tx;
            sum += amp * (top * (1.0 - ty) + bot * ty);
            norm += amp;
            amp *= 0.5;
            scale = (scale * 0.5).max(1.0);
        }
        sum / norm
    }

    fn field(&self, h: usize, w: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(self.at(y, x));
            }
        }
        v
    }
}

/// Threshold with roughly `fraction_above` of the field at or above it.
fn upper_threshold(field: &[f64], fraction_above: f64) -> f64 {
    if fraction_above <= 0.0 {
        return f64::INFINITY;
    }
    if fraction_above >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = field.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let k = ((1.0 - fraction_above) * sorted.len() as f64).round() as usize;
    sorted[k.min(sorted.len() - 1)]
}

pub fn generate_scene(seed: u64, h: usize, w: usize, cloud_density: f64) -> Scene {
    generate_scene_with(seed, h, w, &SceneOptions { cloud_density, ..Default::default() })
}

pub fn generate_scene_with(seed: u64, h: usize, w: usize, opts: &SceneOptions) -> Scene {
    let root = Rng::new(seed);
    let terrain = ValueNoise { seed: root.fork(1).next_u64(), scale: 64.0, octaves: 3 }.field(h, w);
    let moisture = ValueNoise { seed: root.fork(2).next_u64(), scale: 40.0, octaves: 2 }.field(h, w);
    let clouds = ValueNoise { seed: root.fork(3).next_u64(), scale: opts.cloud_scale, octaves: 4 }.field(h, w);
    let density = opts.cloud_density.clamp(0.0, 1.0);
    let cloud_thr = upper_threshold(&clouds, density);
    // the densest part of each cloud is high-probability cloud
    let high_thr = upper_threshold(&clouds, density * 0.5);
    let cirrus_thr = upper_threshold(&clouds, (density + 0.06).min(1.0));
    let shadow_shift = (h.min(w) / 40).max(2);

    let mut noise = root.fork(4);
    let mut reflectance = Vec::with_capacity(h * w * BANDS);
    let mut scl_raster = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (t, m) = (terrain[i], moisture[i]);
            let (mut class, base) = if t < 0.32 {
                (scl::WATER, &WATER)
            } else if t > 0.78 {
                (scl::SNOW, &SNOW)
            } else if m > 0.62 {
                (scl::DARK, &DARK)
            } else if m > 0.42 {
                (scl::VEGETATION, &VEGETATION)
            } else {
                (scl::BARE_SOIL, &BARE_SOIL)
            };
            let gain = 1.0 + 0.08 * noise.normal();
            let mut px: [f64; BANDS] = std::array::from_fn(|b| base[b] as f64 * gain + 0.01 * noise.normal());

            let c = clouds[i];
            if density > 0.0 && c >= cloud_thr {
                let (lo, alpha_lo, alpha_hi) = if c >= high_thr { (high_thr, 0.85, 1.0) } else { (cloud_thr, 0.55, 0.85) };
                // opacity ramps up over the first 0.12 of noise above the edge
                let alpha = alpha_lo + (alpha_hi - alpha_lo) * ((c - lo) / 0.12).min(1.0);
                for (v, &cv) in px.iter_mut().zip(&CLOUD) {
                    *v = (1.0 - alpha) * *v + alpha * cv as f64 * (1.0 + 0.03 * noise.normal());
                }
                class = if c >= high_thr { scl::CLOUD_HIGH } else { scl::CLOUD_MEDIUM };
            } else if density > 0.0 && c >= cirrus_thr {
                for v in px.iter_mut().take(10) {
                    *v += 0.08;
                }
                class = scl::CIRRUS;
            } else if density > 0.0 && y >= shadow_shift && x >= shadow_shift {
                let j = (y - shadow_shift) * w + (x - shadow_shift);
                if clouds[j] >= high_thr {
                    for v in px.iter_mut() {
                        *v *= 0.45;
                    }
                    class = scl::CLOUD_SHADOW;
                }
            }
            if opts.nodata_corner && x + y < h.min(w) / 3 {
                px = [0.0; BANDS];
                class = scl::NO_DATA;
            }
            reflectance.extend(px.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            scl_raster.push(class);
        }
    }
    Scene { height: h, width: w, reflectance, scl: scl_raster, seed }
}

/// Binary cloud mask: 1 for medium/high-probability cloud, else 0.
pub fn remap_scl(raster: &[u8]) -> Result<Vec<u8>> {
    raster
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if c >= scl::CLASS_COUNT {
                Err(Error::Data(format!("unknown scene class code {c} at pixel {i}")))
            } else {
                Ok(scl::is_cloud(c) as u8)
            }
        })
        .collect()
}
