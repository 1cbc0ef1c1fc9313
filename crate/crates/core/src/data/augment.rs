//! Dihedral augmentation: the eight lossless rotations/flips of a square.

use crate::data::{Record, TileRecord};
use crate::rng::Rng;
use crate::tensor::{Data, Tensor};

/// One of the 8 elements of the dihedral group: rotate by `quarter_turns`
/// x 90 degrees counter-clockwise, after an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, quarter_turns: 0 };
    pub const FLIP_H: Dihedral = Dihedral { flip: true, quarter_turns: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral { flip: i >= 4, quarter_turns: i % 4 })
    }

    pub fn sample(rng: &mut Rng) -> Dihedral {
        let i = rng.below(8) as u8;
        Dihedral { flip: i >= 4, quarter_turns: i % 4 }
    }

    /// Source position read by output position `(y, x)` on an `n x n` grid.
    fn source(self, y: usize, x: usize, n: usize) -> (usize, usize) {
        // undo the rotation, then the flip
        let (mut sy, mut sx) = (y, x);
        for _ in 0..self.quarter_turns {
            // inverse of a CCW quarter turn (y, x) -> (n-1-x, y)
            (sy, sx) = (sx, n - 1 - sy);
        }
        if self.flip {
            sx = n - 1 - sx;
        }
        (sy, sx)
    }

    /// Applies the transform to an `n x n x c` row-major buffer.
    pub fn apply<T: Copy>(self, data: &[T], n: usize, c: usize) -> Vec<T> {
        assert_eq!(data.len(), n * n * c);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                out.extend_from_slice(&data[(sy * n + sx) * c..][..c]);
            }
        }
        out
    }

    /// Applies to a `[1, n, n, c]` tensor; other shapes are returned as-is.
    pub fn apply_tensor(self, t: &Tensor) -> Tensor {
        let s = t.shape();
        if s.len() != 4 || s[1] != s[2] || s[1] < 2 {
            return t.clone();
        }
        let (n, c) = (s[1], s[3]);
        let data = match t.data() {
            Data::F32(v) => Data::F32(self.apply(v, n, c)),
            Data::F64(v) => Data::F64(self.apply(v, n, c)),
            Data::I8(v) => Data::I8(self.apply(v, n, c)),
        };
        Tensor::from_data(s, data, t.quant()).expect("same shape")
    }
}

/// Random dihedral transform applied identically to pixels and mask; label
/// and cloud fraction are unchanged.
pub fn augment(record: &TileRecord, rng: &mut Rng) -> TileRecord {
    augment_with(record, Dihedral::sample(rng))
}

pub fn augment_with(record: &TileRecord, t: Dihedral) -> TileRecord {
    let n = record.size;
    TileRecord {
        pixels: t.apply(&record.pixels, n, record.bands),
        mask: t.apply(&record.mask, n, 1),
        ..record.clone()
    }
}

/// Training-time augmentation of a generic record: spatial targets follow
/// the input; scalar targets are untouched.
pub fn augment_record(record: &Record, rng: &mut Rng) -> Record {
    let t = Dihedral::sample(rng);
    Record { input: t.apply_tensor(&record.input), target: t.apply_tensor(&record.target), ..record.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn tile(n: usize, seed: u64) -> TileRecord {
        let mut rng = Rng::new(seed);
        let pixels: Vec<f32> = (0..n * n * 3).map(|_| rng.next_f64() as f32).collect();
        let mask: Vec<u8> = (0..n * n).map(|_| rng.below(2) as u8).collect();
        let frac = mask.iter().map(|&m| m as f64).sum::<f64>() / (n * n) as f64;
        TileRecord { pixels, mask, size: n, bands: 3, label: 0, cloud_fraction: frac, origin: (0, 0) }
    }

    #[test]
    fn identity_and_involution() {
        let r = tile(5, 1);
        assert_eq!(augment_with(&r, Dihedral::IDENTITY), r);
        let twice = augment_with(&augment_with(&r, Dihedral::FLIP_H), Dihedral::FLIP_H);
        assert_eq!(twice, r);
    }

    #[test]
    fn group_elements_distinct_and_quarter_turn_order_four() {
        let data: Vec<u32> = (0..16).collect();
        let images: Vec<Vec<u32>> = Dihedral::all().map(|t| t.apply(&data, 4, 1)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j]);
            }
        }
        let rot = Dihedral { flip: false, quarter_turns: 1 };
        let mut d = data.clone();
        for _ in 0..4 {
            d = rot.apply(&d, 4, 1);
        }
        assert_eq!(d, data);
        // a CCW quarter turn moves the top-right corner to the top-left
        assert_eq!(rot.apply(&data, 4, 1)[0], 3);
    }

    proptest! {
        #[test]
        fn histogram_and_label_preserved(seed in 0u64..1000, n in 2usize..9) {
            let r = tile(n, seed);
            let a = augment(&r, &mut Rng::new(seed ^ 0xabc));
            let mut p1: Vec<u32> = r.pixels.iter().map(|x| x.to_bits()).collect();
            let mut p2: Vec<u32> = a.pixels.iter().map(|x| x.to_bits()).collect();
            p1.sort_unstable();
            p2.sort_unstable();
            prop_assert_eq!(p1, p2);
            prop_assert_eq!(a.label, r.label);
            prop_assert!(a.cloud_fraction == r.cloud_fraction);
            let ones = a.mask.iter().filter(|&&m| m == 1).count();
            prop_assert_eq!(ones, r.mask.iter().filter(|&&m| m == 1).count());
        }
    }
}
