//! Class-balanced patch sampling with mirror padding and light augmentation.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::LabeledVolume;
use crate::tensor::{Extent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip: bool,
    /// Quarter-turn rotations in the height/width plane (square patches only).
    pub rotate: bool,
    /// Image intensities are multiplied by a factor drawn from `[1 - s, 1 + s]`.
    pub intensity_scale: f64,
}

impl Augment {
    pub const NONE: Augment = Augment {
        flip: false,
        rotate: false,
        intensity_scale: 0.0,
    };
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            flip: true,
            rotate: true,
            intensity_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `[n, 1, spatial..]`
    pub inputs: Tensor<f32>,
    /// Binary masks aligned with `inputs`.
    pub targets: Tensor<f32>,
    /// `(volume id, patch origin [z, y, x])`; the origin may be negative at mirrored borders.
    pub provenance: Vec<(u64, [isize; 3])>,
    /// Whether each patch was centered inside a lesion.
    pub foreground: Vec<bool>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Concatenates batches with equal patch shapes.
    pub fn concat(parts: &[PatchBatch]) -> Result<PatchBatch> {
        let first = parts.first().ok_or_else(|| Error::Shape("no batches".into()))?;
        let mut shape = first.inputs.shape().to_vec();
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut provenance = Vec::new();
        let mut foreground = Vec::new();
        for p in parts {
            if p.inputs.shape()[1..] != shape[1..] {
                return Err(Error::Shape("patch shapes differ".into()));
            }
            inputs.extend_from_slice(p.inputs.data());
            targets.extend_from_slice(p.targets.data());
            provenance.extend_from_slice(&p.provenance);
            foreground.extend_from_slice(&p.foreground);
        }
        shape[0] = provenance.len();
        Ok(PatchBatch {
            inputs: Tensor::new(shape.clone(), inputs)?,
            targets: Tensor::new(shape, targets)?,
            provenance,
            foreground,
        })
    }

    /// Reorders patches by `order` (a permutation of `0..len`).
    pub fn permuted(&self, order: &[usize]) -> Result<PatchBatch> {
        self.select(order)
    }

    /// Patches at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<PatchBatch> {
        let s = self.inputs.sample_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let mut inputs = Vec::with_capacity(idx.len() * s);
        let mut targets = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            inputs.extend_from_slice(self.inputs.sample(i));
            targets.extend_from_slice(self.targets.sample(i));
        }
        Ok(PatchBatch {
            inputs: Tensor::new(shape.clone(), inputs)?,
            targets: Tensor::new(shape, targets)?,
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
            foreground: idx.iter().map(|&i| self.foreground[i]).collect(),
        })
    }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Samples `n` patches: `ceil(n * fg_fraction)` centered on lesion voxels (a lesion is chosen
/// uniformly, then a voxel inside it) when the volume has lesions, the rest centered uniformly.
pub fn sample_patches<R: Rng + ?Sized>(
    volume: &LabeledVolume,
    n: usize,
    fg_fraction: f64,
    patch: Extent,
    augment: &Augment,
    rng: &mut R,
) -> Result<PatchBatch> {
    if n == 0 {
        return Err(Error::Config("patch count must be at least 1".into()));
    }
    let ext = volume.extent;
    if patch.ndim() != ext.ndim() {
        return Err(Error::Shape(format!("{}D patch from a {}D volume", patch.ndim(), ext.ndim())));
    }
    let (pd, vd) = (patch.dhw(), ext.dhw());
    if (0..3).any(|a| pd[a] > vd[a]) {
        return Err(Error::Shape(format!("patch {:?} larger than volume {:?}", patch.dims(), ext.dims())));
    }
    let n_fg = if volume.lesions.is_empty() {
        0
    } else {
        ((n as f64 * fg_fraction).ceil() as usize).min(n)
    };
    let plen = patch.len();
    let image = volume.normalized_image();
    let mut inputs = Vec::with_capacity(n * plen);
    let mut targets = Vec::with_capacity(n * plen);
    let mut provenance = Vec::with_capacity(n);
    let mut foreground = Vec::with_capacity(n);
    for k in 0..n {
        let center = if k < n_fg {
            let lesion = volume.lesions.choose(rng).expect("nonempty");
            let v = *lesion.voxels.choose(rng).expect("lesions are nonempty");
            ext.coords(v as usize)
        } else {
            [rng.gen_range(0..vd[0]), rng.gen_range(0..vd[1]), rng.gen_range(0..vd[2])]
        };
        let origin = [
            center[0] as isize - (pd[0] / 2) as isize,
            center[1] as isize - (pd[1] / 2) as isize,
            center[2] as isize - (pd[2] / 2) as isize,
        ];
        let mut img = Vec::with_capacity(plen);
        let mut msk = Vec::with_capacity(plen);
        for z in 0..pd[0] {
            let sz = mirror(origin[0] + z as isize, vd[0]);
            for y in 0..pd[1] {
                let sy = mirror(origin[1] + y as isize, vd[1]);
                for x in 0..pd[2] {
                    let sx = mirror(origin[2] + x as isize, vd[2]);
                    let i = ext.index(sz, sy, sx);
                    img.push(image[i]);
                    msk.push(f32::from(volume.mask[i]));
                }
            }
        }
        apply_augment(&mut img, &mut msk, patch, augment, rng);
        inputs.extend(img);
        targets.extend(msk);
        provenance.push((volume.id, origin));
        foreground.push(k < n_fg);
    }
    let mut shape = vec![n, 1];
    shape.extend(patch.dims());
    Ok(PatchBatch {
        inputs: Tensor::new(shape.clone(), inputs)?,
        targets: Tensor::new(shape, targets)?,
        provenance,
        foreground,
    })
}

fn apply_augment<R: Rng + ?Sized>(img: &mut Vec<f32>, msk: &mut Vec<f32>, patch: Extent, aug: &Augment, rng: &mut R) {
    let [d, h, w] = patch.dhw();
    let axes: &[usize] = if patch.ndim() == 3 { &[0, 1, 2] } else { &[1, 2] };
    if aug.flip {
        for &axis in axes {
            if rng.gen_bool(0.5) {
                let remap = |i: usize| {
                    let [z, y, x] = patch.coords(i);
                    match axis {
                        0 => patch.index(d - 1 - z, y, x),
                        1 => patch.index(z, h - 1 - y, x),
                        _ => patch.index(z, y, w - 1 - x),
                    }
                };
                *img = (0..img.len()).map(|i| img[remap(i)]).collect();
                *msk = (0..msk.len()).map(|i| msk[remap(i)]).collect();
            }
        }
    }
    if aug.rotate && h == w {
        let quarter_turns = rng.gen_range(0..4);
        for _ in 0..quarter_turns {
            // (y, x) <- (x, h - 1 - y)
            let remap = |i: usize| {
                let [z, y, x] = patch.coords(i);
                patch.index(z, w - 1 - x, y)
            };
            *img = (0..img.len()).map(|i| img[remap(i)]).collect();
            *msk = (0..msk.len()).map(|i| msk[remap(i)]).collect();
        }
    }
    if aug.intensity_scale > 0.0 {
        let s = aug.intensity_scale;
        let f = rng.gen_range(1.0 - s..=1.0 + s) as f32;
        for v in img.iter_mut() {
            *v *= f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_volume, CenterShift, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vol(lesions: Option<usize>) -> LabeledVolume {
        let spec = TaskSpec {
            forced_lesion_count: lesions,
            ..TaskSpec::default()
        };
        generate_volume(&spec, &CenterShift::IDENTITY, 7, 21)
    }

    #[test]
    fn mirror_indices() {
        assert_eq!(mirror(-1, 5), 0);
        assert_eq!(mirror(-2, 5), 1);
        assert_eq!(mirror(5, 5), 4);
        assert_eq!(mirror(6, 5), 3);
        assert_eq!(mirror(3, 5), 3);
    }

    #[test]
    fn background_only_volume() {
        let v = vol(Some(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_patches(&v, 10, 0.5, Extent::d2(18, 18), &Augment::NONE, &mut rng).unwrap();
        assert_eq!(b.len(), 10);
        assert!(b.foreground.iter().all(|f| !f));
    }

    #[test]
    fn foreground_count_is_forced() {
        let v = vol(Some(3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_patches(&v, 10, 0.5, Extent::d2(18, 18), &Augment::default(), &mut rng).unwrap();
        assert_eq!(b.foreground.iter().filter(|&&f| f).count(), 5);
        // every foreground-centered patch holds its lesion voxel at the center
        for (i, &fg) in b.foreground.iter().enumerate() {
            if fg {
                assert!(b.targets.sample(i).iter().any(|&t| t > 0.5));
            }
        }
        let b = sample_patches(&v, 7, 0.5, Extent::d2(18, 18), &Augment::NONE, &mut rng).unwrap();
        assert_eq!(b.foreground.iter().filter(|&&f| f).count(), 4);
    }

    #[test]
    fn same_seed_same_batch() {
        let v = vol(None);
        let a = sample_patches(&v, 8, 0.5, Extent::d2(12, 12), &Augment::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_patches(&v, 8, 0.5, Extent::d2(12, 12), &Augment::default(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_oversized_patch() {
        let v = vol(None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_patches(&v, 2, 0.5, Extent::d2(64, 8), &Augment::NONE, &mut rng).is_err());
        assert!(sample_patches(&v, 0, 0.5, Extent::d2(8, 8), &Augment::NONE, &mut rng).is_err());
    }

    #[test]
    fn unaugmented_patch_copies_the_volume() {
        let v = vol(Some(2));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = sample_patches(&v, 4, 0.0, Extent::d2(6, 6), &Augment::NONE, &mut rng).unwrap();
        let image = v.normalized_image();
        for i in 0..4 {
            let (_, o) = b.provenance[i];
            for y in 0..6 {
                for x in 0..6 {
                    let sy = mirror(o[1] + y as isize, 48);
                    let sx = mirror(o[2] + x as isize, 48);
                    assert_eq!(b.inputs.sample(i)[y * 6 + x], image[sy * 48 + sx]);
                }
            }
        }
    }

    #[test]
    fn augmentation_keeps_image_and_mask_aligned() {
        // flips and rotations permute voxels; image/mask pairs must survive as a multiset
        let v = vol(Some(2));
        let aug = Augment { intensity_scale: 0.0, ..Augment::default() };
        for seed in 0..16 {
            // one patch per draw so both runs pick the same center before augmenting
            let plain = sample_patches(&v, 1, 1.0, Extent::d2(10, 10), &Augment::NONE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let augmented = sample_patches(&v, 1, 1.0, Extent::d2(10, 10), &aug, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let pairs = |b: &PatchBatch| {
                let mut p: Vec<(u32, u32)> = b.inputs.data().iter().zip(b.targets.data()).map(|(x, t)| (x.to_bits(), t.to_bits())).collect();
                p.sort_unstable();
                p
            };
            assert_eq!(pairs(&plain), pairs(&augmented));
        }
    }
}
