//! Deterministic synthetic multi-center lesion data.
//!
//! Lesions are Gaussian blobs whose mask is the half-maximum region. Small lesions get lower
//! contrast than large ones, and elongated vessel-like distractors of similar brightness are
//! painted into the image but never into the mask. Each center applies its own intensity shift.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::tensor::Extent;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub extent: Extent,
    /// Poisson mean of the lesion count.
    pub lesions_per_volume: f64,
    /// Overrides the Poisson draw when set.
    pub forced_lesion_count: Option<usize>,
    pub small_lesion_fraction: f64,
    /// Half-maximum radius range of small lesions, in voxels.
    pub small_radius: (f64, f64),
    pub large_radius: (f64, f64),
    pub small_contrast: f64,
    pub large_contrast: f64,
    /// Each lesion's contrast is scaled by a uniform draw from `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    pub background_level: f64,
    /// Amplitude and correlation length (voxels) of the smooth background texture.
    pub texture_amplitude: f64,
    pub texture_scale: f64,
    /// White noise present in every volume, before the center shift.
    pub base_noise: f64,
    pub distractors_per_volume: f64,
    /// Length range of the distractors, in voxels.
    pub distractor_length: (f64, f64),
    pub distractor_width: f64,
    pub distractor_contrast: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            extent: Extent::d2(48, 48),
            lesions_per_volume: 2.2,
            forced_lesion_count: None,
            small_lesion_fraction: 0.444,
            small_radius: (1.0, 1.8),
            large_radius: (2.5, 4.5),
            small_contrast: 0.3,
            large_contrast: 0.6,
            contrast_jitter: 0.9,
            background_level: 0.2,
            texture_amplitude: 0.02,
            texture_scale: 6.0,
            base_noise: 0.02,
            distractors_per_volume: 1.0,
            distractor_length: (6.0, 14.0),
            distractor_width: 0.7,
            distractor_contrast: 0.3,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("task: {m}")));
        if !(0.0..=1.0).contains(&self.small_lesion_fraction) {
            return bad("small_lesion_fraction must lie in [0, 1]");
        }
        if !(self.lesions_per_volume >= 0.0) || !(self.distractors_per_volume >= 0.0) {
            return bad("rates must be non-negative");
        }
        for (lo, hi) in [self.small_radius, self.large_radius, self.distractor_length] {
            if !(lo > 0.0 && hi >= lo) {
                return bad("ranges must be positive and ordered");
            }
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return bad("contrast_jitter must lie in [0, 1)");
        }
        if !(self.distractor_width > 0.0 && self.texture_scale > 0.0) {
            return bad("widths must be positive");
        }
        let rmax = self.small_radius.1.max(self.large_radius.1);
        let spatial = self.extent.dims();
        if spatial.iter().any(|&d| (d as f64) < 4.0 * rmax) {
            return bad("every extent must be at least 4x the largest lesion radius");
        }
        Ok(())
    }
}

/// Intensity transform of one center: `gain * clamp(x, 0)^gamma + bias + N(0, noise_sigma)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterShift {
    pub intensity_gain: f64,
    pub intensity_bias: f64,
    pub noise_sigma: f64,
    pub contrast_gamma: f64,
}

impl CenterShift {
    pub const IDENTITY: CenterShift = CenterShift {
        intensity_gain: 1.0,
        intensity_bias: 0.0,
        noise_sigma: 0.0,
        contrast_gamma: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.intensity_gain > 0.0 && self.contrast_gamma > 0.0 && self.noise_sigma >= 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid center shift {self:?}")))
        }
    }

    /// Evenly spaced shifts: gain 0.8..1.2, bias -0.1..0.1, sigma 0.01..0.05, gamma 0.8..1.25.
    pub fn evenly_spaced(n: usize) -> Vec<CenterShift> {
        let lerp = |lo: f64, hi: f64, i: usize| {
            if n <= 1 {
                (lo + hi) / 2.0
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        (0..n)
            .map(|i| CenterShift {
                intensity_gain: lerp(0.8, 1.2, i),
                intensity_bias: lerp(-0.1, 0.1, i),
                noise_sigma: lerp(0.01, 0.05, i),
                contrast_gamma: lerp(0.8, 1.25, i),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub id: u32,
    /// `[z, y, x]` in voxels.
    pub centroid: [f64; 3],
    /// Half-maximum radius; equivalent-sphere radius after a merge.
    pub radius: f64,
    pub small: bool,
    /// Linear indices of the lesion's mask voxels, ascending.
    pub voxels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub id: u64,
    pub seed: u64,
    pub extent: Extent,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub lesions: Vec<Lesion>,
}

impl LabeledVolume {
    /// The image centered on its median and scaled by its median absolute deviation, which is
    /// what networks consume. Lesions are too sparse to move either statistic.
    pub fn normalized_image(&self) -> Vec<f32> {
        let median = |v: &mut Vec<f32>| {
            let mid = v.len() / 2;
            *v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
        };
        let mut buf = self.image.clone();
        if buf.is_empty() {
            return buf;
        }
        let m = median(&mut buf);
        let mut dev: Vec<f32> = self.image.iter().map(|&v| (v - m).abs()).collect();
        let scale = (1.4826 * median(&mut dev)).max(1e-6);
        self.image.iter().map(|&v| (v - m) / scale).collect()
    }

    pub fn foreground_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// SplitMix64 finalizer, used to derive independent per-volume seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn smooth_texture<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Vec<f64> {
    let [d, h, w] = spec.extent.dhw();
    let s = spec.texture_scale;
    let grid = |n: usize| if n == 1 { 1 } else { (n as f64 / s).ceil() as usize + 2 };
    let (gd, gh, gw) = (grid(d), grid(h), grid(w));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let coarse: Vec<f64> = (0..gd * gh * gw).map(|_| normal.sample(rng)).collect();
    let at = |z: usize, y: usize, x: usize| coarse[(z * gh + y) * gw + x];
    let lerp_idx = |v: usize, n: usize, g: usize| -> (usize, usize, f64) {
        if g == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let f = v as f64 / s;
        let i = (f.floor() as usize).min(g - 2);
        (i, i + 1, f - i as f64)
    };
    let mut out = Vec::with_capacity(d * h * w);
    for z in 0..d {
        let (z0, z1, fz) = lerp_idx(z, d, gd);
        for y in 0..h {
            let (y0, y1, fy) = lerp_idx(y, h, gh);
            for x in 0..w {
                let (x0, x1, fx) = lerp_idx(x, w, gw);
                let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.push(spec.texture_amplitude * (c0 * (1.0 - fz) + c1 * fz));
            }
        }
    }
    out
}

struct Placed {
    center: [f64; 3],
    radius: f64,
    small: bool,
    contrast: f64,
}

/// Draws one volume. Identical `(spec, shift, seed)` give identical volumes.
pub fn generate_volume(spec: &TaskSpec, shift: &CenterShift, id: u64, seed: u64) -> LabeledVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = spec.extent;
    let [d, h, w] = ext.dhw();
    let is3d = ext.ndim() == 3;

    let count = match spec.forced_lesion_count {
        Some(n) => n,
        None if spec.lesions_per_volume > 0.0 => {
            Poisson::new(spec.lesions_per_volume)
                .expect("positive rate")
                .sample(&mut rng) as usize
        }
        None => 0,
    };

    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        let small = rng.gen_bool(spec.small_lesion_fraction);
        let (lo, hi) = if small { spec.small_radius } else { spec.large_radius };
        let radius = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let base = if small { spec.small_contrast } else { spec.large_contrast };
        let j = spec.contrast_jitter;
        let contrast = if j > 0.0 { base * rng.gen_range(1.0 - j..=1.0 + j) } else { base };
        let margin = radius.ceil() as usize;
        let pick = |rng: &mut ChaCha8Rng, n: usize| -> f64 {
            if n == 1 {
                0.0
            } else {
                rng.gen_range(margin.min(n - 1)..n.saturating_sub(margin).max(margin.min(n - 1) + 1)) as f64
            }
        };
        let mut center = [0.0; 3];
        for _attempt in 0..20 {
            center = [pick(&mut rng, d), pick(&mut rng, h), pick(&mut rng, w)];
            let clear = placed.iter().all(|p| {
                let dist = (0..3).map(|a| (p.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                dist > p.radius + radius + 2.0
            });
            if clear {
                break;
            }
        }
        placed.push(Placed {
            center,
            radius,
            small,
            contrast,
        });
    }

    let mut image: Vec<f64> = smooth_texture(spec, &mut rng)
        .into_iter()
        .map(|t| spec.background_level + t)
        .collect();
    let mut mask = vec![0u8; ext.len()];
    let mut owner = vec![u32::MAX; ext.len()];
    for (li, p) in placed.iter().enumerate() {
        let sigma = p.radius / (2.0 * std::f64::consts::LN_2).sqrt();
        let contrast = p.contrast;
        let reach = (3.0 * sigma).ceil() as isize;
        let zr = if is3d { reach } else { 0 };
        let c = [p.center[0] as isize, p.center[1] as isize, p.center[2] as isize];
        for dz in -zr..=zr {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let Some(idx) = ext.offset([c[0] as usize, c[1] as usize, c[2] as usize], [dz, dy, dx]) else {
                        continue;
                    };
                    let r2 = (dz * dz + dy * dy + dx * dx) as f64;
                    image[idx] += contrast * (-r2 / (2.0 * sigma * sigma)).exp();
                    if r2 <= p.radius * p.radius {
                        mask[idx] = 1;
                        if owner[idx] == u32::MAX {
                            owner[idx] = li as u32;
                        }
                    }
                }
            }
        }
    }

    let n_distractors = if spec.distractors_per_volume > 0.0 {
        Poisson::new(spec.distractors_per_volume)
            .expect("positive rate")
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..n_distractors {
        let start = [
            if is3d { rng.gen_range(0.0..d as f64) } else { 0.0 },
            rng.gen_range(0.0..h as f64),
            rng.gen_range(0.0..w as f64),
        ];
        let (lo, hi) = spec.distractor_length;
        let len = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let phi: f64 = if is3d { rng.gen_range(-1.0f64..1.0).asin() } else { 0.0 };
        let dir = [phi.sin(), theta.sin() * phi.cos(), theta.cos() * phi.cos()];
        let wsig = spec.distractor_width;
        for idx in 0..ext.len() {
            let [z, y, x] = ext.coords(idx);
            let rel = [z as f64 - start[0], y as f64 - start[1], x as f64 - start[2]];
            let t = (rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2]).clamp(0.0, len);
            let perp2: f64 = (0..3).map(|a| (rel[a] - t * dir[a]).powi(2)).sum();
            if perp2 < 9.0 * wsig * wsig {
                image[idx] += spec.distractor_contrast * (-perp2 / (2.0 * wsig * wsig)).exp();
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let image: Vec<f32> = image
        .into_iter()
        .map(|v| {
            let base = v + spec.base_noise * noise.sample(&mut rng);
            let shifted = shift.intensity_gain * base.max(0.0).powf(shift.contrast_gamma)
                + shift.intensity_bias
                + shift.noise_sigma * noise.sample(&mut rng);
            shifted as f32
        })
        .collect();

    let lesions = register(ext, &mask, &owner, &placed);
    LabeledVolume {
        id,
        seed,
        extent: ext,
        image,
        mask,
        lesions,
    }
}

/// Registry from the mask's connected components; touching lesions become one merged entry.
fn register(ext: Extent, mask: &[u8], owner: &[u32], placed: &[Placed]) -> Vec<Lesion> {
    let comps = crate::metrics::connected_components(mask, ext);
    comps
        .components
        .into_iter()
        .enumerate()
        .map(|(i, voxels)| {
            let mut centroid = [0.0; 3];
            let mut owners: Vec<u32> = Vec::new();
            for &v in &voxels {
                let c = ext.coords(v as usize);
                for a in 0..3 {
                    centroid[a] += c[a] as f64;
                }
                let o = owner[v as usize];
                if !owners.contains(&o) {
                    owners.push(o);
                }
            }
            for c in &mut centroid {
                *c /= voxels.len() as f64;
            }
            let (radius, small) = if owners.len() == 1 {
                let p = &placed[owners[0] as usize];
                (p.radius, p.small)
            } else {
                let n = voxels.len() as f64;
                let r = if ext.ndim() == 3 {
                    (3.0 * n / (4.0 * std::f64::consts::PI)).cbrt()
                } else {
                    (n / std::f64::consts::PI).sqrt()
                };
                (r, owners.iter().all(|&o| placed[o as usize].small))
            };
            Lesion {
                id: i as u32,
                centroid,
                radius,
                small,
                voxels,
            }
        })
        .collect()
}

/// Stream tags keep the seed sets of centers, validation and test disjoint.
pub const VALIDATION_STREAM: u64 = 0xFFFF_0001;
pub const TEST_STREAM: u64 = 0xFFFF_0002;

pub fn volume_id(stream: u64, index: usize) -> u64 {
    (stream << 32) | index as u64
}

pub fn generate_set(
    spec: &TaskSpec,
    shift: &CenterShift,
    stream: u64,
    count: usize,
    master_seed: u64,
) -> Vec<LabeledVolume> {
    (0..count)
        .map(|i| {
            let id = volume_id(stream, i);
            generate_volume(spec, shift, id, mix_seed(master_seed, id))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CenterData {
    /// 1-based ordinal on the ring.
    pub id: usize,
    pub shift: CenterShift,
    pub volumes: Vec<LabeledVolume>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub centers: Vec<CenterData>,
    pub validation: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
}

impl Scenario {
    pub fn pooled(&self) -> Vec<LabeledVolume> {
        self.centers.iter().flat_map(|c| c.volumes.iter().cloned()).collect()
    }
}

pub fn build_scenario(
    spec: &TaskSpec,
    n_centers: usize,
    per_center: usize,
    val_n: usize,
    test_n: usize,
    shifts: &[CenterShift],
    master_seed: u64,
) -> Result<Scenario> {
    spec.validate()?;
    if n_centers == 0 {
        return Err(Error::Config("at least one center".into()));
    }
    if shifts.len() != n_centers {
        return Err(Error::Config(format!(
            "{} shifts for {n_centers} centers",
            shifts.len()
        )));
    }
    for s in shifts {
        s.validate()?;
    }
    let centers = shifts
        .iter()
        .enumerate()
        .map(|(i, shift)| CenterData {
            id: i + 1,
            shift: *shift,
            volumes: generate_set(spec, shift, (i + 1) as u64, per_center, master_seed),
        })
        .collect();
    Ok(Scenario {
        centers,
        validation: generate_set(spec, &CenterShift::IDENTITY, VALIDATION_STREAM, val_n, master_seed),
        test: generate_set(spec, &CenterShift::IDENTITY, TEST_STREAM, test_n, master_seed),
    })
}

/// Writes one volume: magic "RFVL", ndim u8, extents u32 x3 (d, h, w), lesion count u32,
/// image as f32, mask as bits packed LSB first.
pub fn encode_volume(v: &LabeledVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + v.image.len() * 4 + v.mask.len() / 8 + 1);
    out.extend_from_slice(b"RFVL");
    out.push(v.extent.ndim() as u8);
    for d in v.extent.dhw() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(v.lesions.len() as u32).to_le_bytes());
    for x in &v.image {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for chunk in v.mask.chunks(8) {
        let mut b = 0u8;
        for (i, &m) in chunk.iter().enumerate() {
            if m != 0 {
                b |= 1 << i;
            }
        }
        out.push(b);
    }
    out
}

/// Reads back image, mask and lesion count written by [`encode_volume`].
pub fn decode_volume(bytes: &[u8]) -> Result<(Extent, Vec<f32>, Vec<u8>, u32)> {
    let bad = || Error::Checkpoint("malformed volume dump".into());
    if bytes.len() < 21 || &bytes[..4] != b"RFVL" {
        return Err(bad());
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (d, h, w) = (u(5), u(9), u(13));
    let ext = match bytes[4] {
        2 if d == 1 => Extent::d2(h, w),
        3 => Extent::d3(d, h, w),
        _ => return Err(bad()),
    };
    let lesions = u(17) as u32;
    let n = ext.len();
    let img_end = 21 + 4 * n;
    if bytes.len() != img_end + n.div_ceil(8) {
        return Err(bad());
    }
    let image = bytes[21..img_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mask = (0..n).map(|i| (bytes[img_end + i / 8] >> (i % 8)) & 1).collect();
    Ok((ext, image, mask, lesions))
}

/// Dumps every volume of a scenario plus `manifest.csv` into `dir`.
pub fn dump_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("volume_id,center,seed,lesions,small_lesions,foreground_voxels\n");
    let sets = scenario
        .centers
        .iter()
        .map(|c| (c.id.to_string(), &c.volumes))
        .chain([
            ("validation".to_string(), &scenario.validation),
            ("test".to_string(), &scenario.test),
        ]);
    for (center, vols) in sets {
        for v in vols {
            let name = format!("vol_{:016x}.bin", v.id);
            crate::checkpoint::write_atomic(&dir.join(&name), &encode_volume(v))?;
            manifest.push_str(&format!(
                "{},{},{},{},{},{}\n",
                v.id,
                center,
                v.seed,
                v.lesions.len(),
                v.lesions.iter().filter(|l| l.small).count(),
                v.foreground_voxels()
            ));
        }
    }
    let mut f = fs::File::create(dir.join("manifest.csv"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}
