//! Tiling, threshold labelling, balancing/splitting and pixel sampling.

use crate::data::scene::{remap_scl, scl, Scene, BANDS};
use crate::data::{Dataset, Record, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CLOUDY_THRESHOLD: f64 = 0.70;

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    /// `size x size x bands`, row-major.
    pub pixels: Vec<f32>,
    pub mask: Vec<u8>,
    pub size: usize,
    pub bands: usize,
    /// 1 = cloudy, 0 = not cloudy.
    pub label: u8,
    pub cloud_fraction: f64,
    /// Top-left corner in the source scene.
    pub origin: (usize, usize),
}

impl TileRecord {
    /// Input `[1, n, n, bands]` with a scalar cloudy/not-cloudy target.
    pub fn to_classification_record(&self) -> Record {
        Record {
            input: Tensor::from_f32(&[1, self.size, self.size, self.bands], self.pixels.clone()).expect("tile shape"),
            target: Tensor::from_f32(&[1, 1], vec![self.label as f32]).unwrap(),
            label: self.label,
            cloud_fraction: self.cloud_fraction,
        }
    }

    /// Input `[1, n, n, bands]` with the per-pixel mask `[1, n, n, 1]` as target.
    pub fn to_segmentation_record(&self) -> Record {
        let n = self.size;
        Record {
            input: Tensor::from_f32(&[1, n, n, self.bands], self.pixels.clone()).expect("tile shape"),
            target: Tensor::from_f32(&[1, n, n, 1], self.mask.iter().map(|&m| m as f32).collect()).unwrap(),
            label: self.label,
            cloud_fraction: self.cloud_fraction,
        }
    }
}

pub fn label_for(fraction: f64, threshold: f64) -> u8 {
    (fraction >= threshold) as u8
}

/// Non-overlapping `tile x tile` crops; tiles touching any no-data pixel are
/// dropped and the remainder at the right/bottom edge is cropped.
pub fn tile_and_label(scene: &Scene, tile: usize, threshold: f64) -> Result<Vec<TileRecord>> {
    if tile == 0 {
        return Err(Error::Argument("tile size must be positive".into()));
    }
    let mask = remap_scl(&scene.scl)?;
    let mut out = Vec::new();
    for ty in 0..scene.height / tile {
        for tx in 0..scene.width / tile {
            let (y0, x0) = (ty * tile, tx * tile);
            let mut pixels = Vec::with_capacity(tile * tile * BANDS);
            let mut tmask = Vec::with_capacity(tile * tile);
            let mut nodata = false;
            for y in y0..y0 + tile {
                let row = y * scene.width;
                nodata |= scene.scl[row + x0..row + x0 + tile].contains(&scl::NO_DATA);
                pixels.extend_from_slice(&scene.reflectance[(row + x0) * BANDS..(row + x0 + tile) * BANDS]);
                tmask.extend_from_slice(&mask[row + x0..row + x0 + tile]);
            }
            if nodata {
                continue;
            }
            let cloudy = tmask.iter().filter(|&&m| m == 1).count();
            let fraction = cloudy as f64 / (tile * tile) as f64;
            out.push(TileRecord {
                pixels,
                mask: tmask,
                size: tile,
                bands: BANDS,
                label: label_for(fraction, threshold),
                cloud_fraction: fraction,
                origin: (y0, x0),
            });
        }
    }
    Ok(out)
}

/// Indices of a balanced, stratified train/validation split over binary
/// `labels`. The majority class is randomly downsampled to the minority size;
/// each class is then split `round(n * train_frac)` / rest. Indices come back
/// in ascending order.
pub fn balance_and_split_indices(labels: &[u8], train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::Argument(format!("train fraction {train_frac} outside [0, 1]")));
    }
    let by_class: [Vec<usize>; 2] =
        std::array::from_fn(|c| (0..labels.len()).filter(|&i| labels[i] == c as u8).collect());
    let n = by_class[0].len().min(by_class[1].len());
    if n == 0 {
        return Err(Error::Data(format!(
            "cannot balance: {} not-cloudy vs {} cloudy records",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let mut rng = Rng::new(seed);
    let n_train = (n as f64 * train_frac).round() as usize;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in &by_class {
        let mut members = class.clone();
        rng.shuffle(&mut members);
        members.truncate(n);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn balance_and_split<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> u8,
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    let labels: Vec<u8> = items.iter().map(label).collect();
    let (tr, va) = balance_and_split_indices(&labels, train_frac, seed)?;
    Ok((tr.iter().map(|&i| items[i].clone()).collect(), va.iter().map(|&i| items[i].clone()).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Single-pixel spectra shaped `[1, 12, 1, 1]`.
    Spectra,
    /// 5x5 neighbourhoods shaped `[1, 5, 5, 12]`, labelled by the centre.
    Patches5x5,
}

impl SampleMode {
    fn radius(self) -> usize {
        match self {
            SampleMode::Spectra => 0,
            SampleMode::Patches5x5 => 2,
        }
    }
}

/// Draws exactly `n_per_class` cloudy and `n_per_class` clear samples from the
/// scenes (no-data excluded, patches must lie fully inside clean data).
pub fn sample_pixels(scenes: &[Scene], n_per_class: usize, mode: SampleMode, seed: u64) -> Result<Dataset> {
    let r = mode.radius();
    // (scene, y, x) candidates per class
    let mut cands: [Vec<(usize, usize, usize)>; 2] = [Vec::new(), Vec::new()];
    for (si, s) in scenes.iter().enumerate() {
        let mask = remap_scl(&s.scl)?;
        for y in r..s.height.saturating_sub(r) {
            for x in r..s.width.saturating_sub(r) {
                let clean = (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| s.class_at(yy, xx) != scl::NO_DATA));
                if clean {
                    cands[mask[y * s.width + x] as usize].push((si, y, x));
                }
            }
        }
    }
    for (c, list) in cands.iter().enumerate() {
        if list.len() < n_per_class {
            return Err(Error::Data(format!(
                "class {c} has {} candidate pixels, short by {}",
                list.len(),
                n_per_class - list.len()
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let mut picks: Vec<(u8, (usize, usize, usize))> = Vec::with_capacity(2 * n_per_class);
    for (c, list) in cands.iter().enumerate() {
        let mut idx = rng.sample_indices(list.len(), n_per_class);
        idx.sort_unstable();
        picks.extend(idx.into_iter().map(|i| (c as u8, list[i])));
    }
    rng.shuffle(&mut picks);
    let records = picks
        .into_iter()
        .map(|(label, (si, y, x))| {
            let s = &scenes[si];
            let input = match mode {
                SampleMode::Spectra => Tensor::from_f32(&[1, BANDS, 1, 1], s.pixel(y, x).to_vec()),
                SampleMode::Patches5x5 => {
                    let mut v = Vec::with_capacity(25 * BANDS);
                    for yy in y - 2..=y + 2 {
                        for xx in x - 2..=x + 2 {
                            v.extend_from_slice(s.pixel(yy, xx));
                        }
                    }
                    Tensor::from_f32(&[1, 5, 5, BANDS], v)
                }
            }
            .expect("sample shape");
            Record {
                input,
                target: Tensor::from_f32(&[1, 1], vec![label as f32]).unwrap(),
                label,
                cloud_fraction: label as f64,
            }
        })
        .collect();
    Ok(Dataset { split: Split::Train, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::generate_scene;

    fn flat_scene(classes: Vec<u8>, h: usize, w: usize) -> Scene {
        Scene { height: h, width: w, reflectance: vec![0.5; h * w * BANDS], scl: classes, seed: 0 }
    }

    fn scene_with_cloud_count(cloudy: usize, tile: usize) -> Scene {
        let n = tile * tile;
        let scl: Vec<u8> = (0..n).map(|i| if i < cloudy { scl::CLOUD_HIGH } else { scl::VEGETATION }).collect();
        flat_scene(scl, tile, tile)
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        // 0.70 of a 10x10 tile and 45,875 / 65,536 of a 256x256 tile
        let t = tile_and_label(&scene_with_cloud_count(70, 10), 10, CLOUDY_THRESHOLD).unwrap();
        assert_eq!((t[0].cloud_fraction, t[0].label), (0.7, 1));
        let t = tile_and_label(&scene_with_cloud_count(69, 10), 10, CLOUDY_THRESHOLD).unwrap();
        assert_eq!(t[0].label, 0);
        let t = tile_and_label(&scene_with_cloud_count(45_875, 256), 256, CLOUDY_THRESHOLD).unwrap();
        assert!(t[0].cloud_fraction < 0.7 && t[0].cloud_fraction > 0.699);
        assert_eq!(t[0].label, 0);
        let t = tile_and_label(&scene_with_cloud_count(45_876, 256), 256, CLOUDY_THRESHOLD).unwrap();
        assert_eq!(t[0].label, 1);
    }

    #[test]
    fn nodata_tiles_excluded_and_remainder_cropped() {
        let mut classes = vec![scl::WATER; 25 * 21];
        classes[3 * 21 + 14] = scl::NO_DATA; // falls into tile (0, 1)
        let tiles = tile_and_label(&flat_scene(classes, 25, 21), 10, 0.7).unwrap();
        let origins: Vec<_> = tiles.iter().map(|t| t.origin).collect();
        assert_eq!(origins, vec![(0, 0), (10, 0), (10, 10)]);
    }

    #[test]
    fn labels_agree_with_mask_mean() {
        let s = generate_scene(9, 128, 128, 0.6);
        for t in tile_and_label(&s, 32, CLOUDY_THRESHOLD).unwrap() {
            let mean = t.mask.iter().map(|&m| m as f64).sum::<f64>() / t.mask.len() as f64;
            assert_eq!(mean, t.cloud_fraction);
            assert_eq!(t.label == 1, mean >= CLOUDY_THRESHOLD);
        }
    }

    #[test]
    fn balancing_counts() {
        let mut labels = vec![0u8; 2976];
        labels.extend(vec![1u8; 1255]);
        let (tr, va) = balance_and_split_indices(&labels, 0.7, 1).unwrap();
        let count = |v: &[usize], c| v.iter().filter(|&&i| labels[i] == c).count();
        assert_eq!(count(&tr, 0) + count(&va, 0), 1255);
        assert_eq!(count(&tr, 1) + count(&va, 1), 1255);
        assert_eq!(count(&tr, 0), count(&tr, 1));

        let labels: Vec<u8> = (0..2000).map(|i| (i % 2) as u8).collect();
        let count = |v: &[usize], c| v.iter().filter(|&&i| labels[i] == c).count();
        let (tr, va) = balance_and_split_indices(&labels, 0.7, 5).unwrap();
        assert_eq!((count(&tr, 0), count(&tr, 1), count(&va, 0), count(&va, 1)), (700, 700, 300, 300));
        assert!(tr.iter().all(|i| va.binary_search(i).is_err()));
        assert_eq!(balance_and_split_indices(&labels, 0.7, 5).unwrap(), (tr, va));
        assert!(matches!(balance_and_split_indices(&[0, 0, 0], 0.7, 1), Err(Error::Data(_))));
    }

    #[test]
    fn pixel_and_patch_sampling() {
        let scenes = vec![generate_scene(2, 96, 96, 0.5)];
        let ds = sample_pixels(&scenes, 300, SampleMode::Spectra, 4).unwrap();
        assert_eq!(ds.records.len(), 600);
        assert_eq!(ds.class_counts(), [300, 300]);
        assert!(ds.records.iter().all(|r| r.input.shape() == [1, 12, 1, 1]));

        let ds = sample_pixels(&scenes, 500, SampleMode::Patches5x5, 4).unwrap();
        for r in &ds.records {
            assert_eq!(r.input.shape(), &[1, 5, 5, 12]);
            // find the centre back in the scene and recheck its class
            let centre = &r.input.as_f32().unwrap()[12 * 12..13 * 12];
            let s = &scenes[0];
            let hit = (0..s.height * s.width).find(|&i| s.pixel(i / s.width, i % s.width) == centre).unwrap();
            assert_eq!(scl::is_cloud(s.scl[hit]) as u8, r.label);
        }
        assert_eq!(ds, sample_pixels(&scenes, 500, SampleMode::Patches5x5, 4).unwrap());
        let err = sample_pixels(&scenes, 1_000_000, SampleMode::Spectra, 4).unwrap_err();
        assert!(err.to_string().contains("short by"));
    }
}
