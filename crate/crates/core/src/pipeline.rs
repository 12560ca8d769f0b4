//! Preprocessing and sampling: HU windowing, 2.5D slab extraction, on-the-fly
//! augmentation, lung-region cropping, and the balanced per-format epoch
//! sampler over partially labeled sources.

use crate::error::{Error, Result};
use crate::hierarchy::TargetFormat;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 600.0;

/// A volume still in Hounsfield units.
#[derive(Clone, Debug)]
pub struct HuVolume(pub Array3<f32>);

/// A volume windowed to `[-1024, 600]` HU and scaled to `[0, 1]`. The
/// distinct type is the pipeline-stage tag: normalization cannot be applied
/// twice.
#[derive(Clone, Debug)]
pub struct NormVolume(pub Array3<f32>);

/// Window one HU value into `[0, 1]`.
pub fn normalize_hu(v: f32) -> Result<f32> {
    if v.is_nan() {
        return Err(Error::Contract("normalize_hu: NaN input".into()));
    }
    let clipped = v.clamp(HU_MIN, HU_MAX);
    Ok((clipped - HU_MIN) / (HU_MAX - HU_MIN))
}

pub fn normalize_volume(v: &HuVolume) -> Result<NormVolume> {
    if v.0.iter().any(|x| x.is_nan()) {
        return Err(Error::Contract("normalize_volume: NaN voxel".into()));
    }
    Ok(NormVolume(
        v.0.mapv(|x| (x.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)),
    ))
}

/// A 2.5D training sample.
#[derive(Clone, Debug)]
pub struct Slab {
    /// Three normalized axial slices, `[3, H, W]`.
    pub intensity: Array3<f32>,
    /// Integer labels of the center slice.
    pub labels: Array2<u8>,
    pub format: TargetFormat,
    pub source: usize,
    pub slice: usize,
}

impl Slab {
    /// One-hot target channels for the slab's format.
    pub fn target_one_hot(&self) -> Result<Array3<f32>> {
        crate::hierarchy::encode_target(self.labels.view(), self.format)
    }
}

/// Extract the (z-1, z, z+1) slice triplet; single-slice volumes repeat the
/// slice, and boundary slices replicate the edge.
pub fn extract_slab(vol: &NormVolume, z: usize) -> Result<Array3<f32>> {
    let (d, h, w) = vol.0.dim();
    if z >= d {
        return Err(Error::Shape(format!("slice {z} out of range for depth {d}")));
    }
    let pick = |zz: i64| -> usize { zz.clamp(0, d as i64 - 1) as usize };
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (c, dz) in (-1i64..=1).enumerate() {
        let src = vol.0.index_axis(ndarray::Axis(0), pick(z as i64 + dz));
        out.index_axis_mut(ndarray::Axis(0), c).assign(&src);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Random crop size; also the network patch size.
    pub patch: usize,
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
    pub rotate_prob: f64,
    pub rotate_range_deg: (f64, f64),
    /// Applied independently per in-plane axis.
    pub mirror_prob: f64,
    pub noise_prob: f64,
    pub noise_sigma_range: (f64, f64),
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub brightness_prob: f64,
    pub brightness_range: (f64, f64),
    pub contrast_prob: f64,
    pub contrast_range: (f64, f64),
    /// Random morphology on the lesion class, lesion-format targets only.
    pub lesion_morph_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            patch: 64,
            scale_prob: 0.2,
            scale_range: (0.7, 1.4),
            rotate_prob: 0.2,
            rotate_range_deg: (-180.0, 180.0),
            mirror_prob: 0.5,
            noise_prob: 0.15,
            noise_sigma_range: (0.0, 0.1),
            blur_prob: 0.2,
            blur_sigma_range: (0.5, 1.5),
            brightness_prob: 0.15,
            brightness_range: (0.7, 1.3),
            contrast_prob: 0.15,
            contrast_range: (0.65, 1.5),
            lesion_morph_prob: 0.15,
        }
    }
}

impl AugmentConfig {
    /// All stochastic steps disabled; only the (center) crop remains.
    pub fn disabled(patch: usize) -> Self {
        AugmentConfig {
            patch,
            scale_prob: 0.0,
            rotate_prob: 0.0,
            mirror_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            lesion_morph_prob: 0.0,
            ..AugmentConfig::default()
        }
    }
}

/// Independent RNG stream for one draw of one epoch, so augmentation results
/// do not depend on worker scheduling.
pub fn draw_rng(epoch_seed: u64, draw_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    rng.set_stream(draw_index as u64 + 1);
    rng
}

/// Apply the augmentation chain: scale, rotation, mirroring, noise, blur,
/// brightness, contrast, then the random crop. Geometric transforms hit
/// intensity (bilinear) and labels (nearest-neighbor) identically; intensity
/// is re-clipped to `[0, 1]`.
pub fn augment(slab: &Slab, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Slab> {
    let (_, h, w) = slab.intensity.dim();
    if cfg.patch > h || cfg.patch > w {
        return Err(Error::Config(format!(
            "patch {} larger than slab {h}x{w}",
            cfg.patch
        )));
    }
    let mut intensity = slab.intensity.clone();
    let mut labels = slab.labels.clone();

    // combined scale + rotation, resampled about the slab center
    let scale = if rng.random_bool(cfg.scale_prob) {
        rng.random_range(cfg.scale_range.0..=cfg.scale_range.1)
    } else {
        1.0
    };
    let angle = if rng.random_bool(cfg.rotate_prob) {
        rng.random_range(cfg.rotate_range_deg.0..=cfg.rotate_range_deg.1)
            .to_radians()
    } else {
        0.0
    };
    if scale != 1.0 || angle != 0.0 {
        let (ri, rl) = resample_affine(&intensity, &labels, scale, angle);
        intensity = ri;
        labels = rl;
    }

    for axis in [1usize, 2] {
        if rng.random_bool(cfg.mirror_prob) {
            intensity.invert_axis(ndarray::Axis(axis));
            labels.invert_axis(ndarray::Axis(axis - 1));
        }
    }

    if rng.random_bool(cfg.noise_prob) {
        let sigma = rng.random_range(cfg.noise_sigma_range.0..=cfg.noise_sigma_range.1);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f64, sigma).unwrap();
            for v in intensity.iter_mut() {
                *v += normal.sample(rng) as f32;
            }
        }
    }

    if rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma_range.0..=cfg.blur_sigma_range.1);
        gaussian_blur_inplace(&mut intensity, sigma);
    }

    if rng.random_bool(cfg.brightness_prob) {
        let f = rng.random_range(cfg.brightness_range.0..=cfg.brightness_range.1) as f32;
        intensity.mapv_inplace(|v| v * f);
    }

    if rng.random_bool(cfg.contrast_prob) {
        let f = rng.random_range(cfg.contrast_range.0..=cfg.contrast_range.1) as f32;
        let mean = intensity.sum() / intensity.len() as f32;
        intensity.mapv_inplace(|v| mean + (v - mean) * f);
    }

    intensity.mapv_inplace(|v| v.clamp(0.0, 1.0));

    // random crop
    let (hh, ww) = labels.dim();
    let dy = if hh > cfg.patch {
        rng.random_range(0..=hh - cfg.patch)
    } else {
        0
    };
    let dx = if ww > cfg.patch {
        rng.random_range(0..=ww - cfg.patch)
    } else {
        0
    };
    let intensity = intensity
        .slice(ndarray::s![.., dy..dy + cfg.patch, dx..dx + cfg.patch])
        .to_owned();
    let mut labels = labels
        .slice(ndarray::s![dy..dy + cfg.patch, dx..dx + cfg.patch])
        .to_owned();

    if slab.format == TargetFormat::Lesion && rng.random_bool(cfg.lesion_morph_prob) {
        // one iteration of dilation or erosion of the lesion class with a
        // 3x3 cross, kept inside the annotated lung so the hierarchy holds
        let dilate = rng.random_bool(0.5);
        labels = lesion_morphology(&labels, dilate);
    }

    Ok(Slab {
        intensity,
        labels,
        format: slab.format,
        source: slab.source,
        slice: slab.slice,
    })
}

fn resample_affine(
    intensity: &Array3<f32>,
    labels: &Array2<u8>,
    scale: f64,
    angle: f64,
) -> (Array3<f32>, Array2<u8>) {
    let (c, h, w) = intensity.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let mut out_i = Array3::<f32>::zeros((c, h, w));
    let mut out_l = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate by -angle, divide by scale
            let oy = y as f64 - cy;
            let ox = x as f64 - cx;
            let sy = (oy * cos + ox * sin) / scale + cy;
            let sx = (-oy * sin + ox * cos) / scale + cx;
            // nearest neighbor for labels
            let ny = sy.round() as i64;
            let nx = sx.round() as i64;
            if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                out_l[[y, x]] = labels[[ny as usize, nx as usize]];
            }
            // bilinear for intensity
            if sy >= 0.0 && sx >= 0.0 && sy <= h as f64 - 1.0 && sx <= w as f64 - 1.0 {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = (sy - y0 as f64) as f32;
                let fx = (sx - x0 as f64) as f32;
                for k in 0..c {
                    let a = intensity[[k, y0, x0]];
                    let b = intensity[[k, y0, x1]];
                    let cc = intensity[[k, y1, x0]];
                    let d = intensity[[k, y1, x1]];
                    let top = a + (b - a) * fx;
                    let bot = cc + (d - cc) * fx;
                    out_i[[k, y, x]] = top + (bot - top) * fy;
                }
            }
        }
    }
    (out_i, out_l)
}

fn gaussian_blur_inplace(intensity: &mut Array3<f32>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0f64;
    for i in -radius..=radius {
        let v = (-0.5 * (i as f64 / sigma).powi(2)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (c, h, w) = intensity.dim();
    // separable passes
    for k in 0..c {
        let mut tmp = Array2::<f32>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += kv * intensity[[k, y, sx]] as f64;
                }
                tmp[[y, x]] = acc as f32;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[[sy, x]] as f64;
                }
                intensity[[k, y, x]] = acc as f32;
            }
        }
    }
}

/// Dilation adds lesion over adjacent healthy lung; erosion peels lesion
/// boundary voxels back to healthy lung. 3x3 cross element, one iteration.
fn lesion_morphology(labels: &Array2<u8>, dilate: bool) -> Array2<u8> {
    let (h, w) = labels.dim();
    let mut out = labels.clone();
    let cross = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
    for y in 0..h {
        for x in 0..w {
            let near_lesion = cross.iter().any(|&(dy, dx)| {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                ny >= 0
                    && nx >= 0
                    && ny < h as i64
                    && nx < w as i64
                    && labels[[ny as usize, nx as usize]] == 2
            });
            if dilate {
                if labels[[y, x]] == 1 && near_lesion {
                    out[[y, x]] = 2;
                }
            } else {
                let near_non_lesion = cross.iter().any(|&(dy, dx)| {
                    let ny = y as i64 + dy;
                    let nx = x as i64 + dx;
                    !(ny >= 0
                        && nx >= 0
                        && ny < h as i64
                        && nx < w as i64
                        && labels[[ny as usize, nx as usize]] == 2)
                });
                if labels[[y, x]] == 2 && near_non_lesion {
                    out[[y, x]] = 1;
                }
            }
        }
    }
    out
}

/// One sample draw in an epoch plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draw {
    pub format: TargetFormat,
    pub source: usize,
    pub slice: usize,
}

/// A full epoch of balanced draws: round-robin over formats so every
/// contiguous window of `5k` draws contains `k` of each format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochPlan {
    pub quota: usize,
    pub seed: u64,
    pub draws: Vec<Draw>,
}

pub type Catalog = BTreeMap<TargetFormat, Vec<(usize, usize)>>;

/// Uniform with-replacement sampling of `quota` slices per format,
/// interleaved in fixed format order.
pub fn sample_epoch(catalog: &Catalog, quota: usize, seed: u64) -> Result<EpochPlan> {
    sample_epoch_formats(catalog, &TargetFormat::ALL, quota, seed)
}

/// Generalization over a format subset (used by ablation configurations).
pub fn sample_epoch_formats(
    catalog: &Catalog,
    formats: &[TargetFormat],
    quota: usize,
    seed: u64,
) -> Result<EpochPlan> {
    for f in formats {
        match catalog.get(f) {
            Some(list) if !list.is_empty() => {}
            _ => {
                return Err(Error::Sampler(format!(
                    "no annotated slices for format {}",
                    f.name()
                )))
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(quota * formats.len());
    for _ in 0..quota {
        for &f in formats {
            let list = &catalog[&f];
            let (source, slice) = list[rng.random_range(0..list.len())];
            draws.push(Draw {
                format: f,
                source,
                slice,
            });
        }
    }
    Ok(EpochPlan { quota, seed, draws })
}

/// Tight bounding box of a mask plus margin, clipped at the borders.
pub struct CropResult {
    pub volume: Array3<f32>,
    pub offset: [usize; 3],
}

pub fn crop_to_lung(
    vol: &Array3<f32>,
    mask: &Array3<bool>,
    margin: usize,
) -> Result<CropResult> {
    if vol.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "volume {:?} vs mask {:?}",
            vol.dim(),
            mask.dim()
        )));
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &m) in mask.indexed_iter() {
        if m {
            any = true;
            let v = [z, y, x];
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
    }
    if !any {
        return Err(Error::Crop("empty mask".into()));
    }
    let dims = vol.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut start = [0usize; 3];
    let mut end = [0usize; 3];
    for a in 0..3 {
        start[a] = lo[a].saturating_sub(margin);
        end[a] = (hi[a] + margin + 1).min(dims[a]);
    }
    let volume = vol
        .slice(ndarray::s![
            start[0]..end[0],
            start[1]..end[1],
            start[2]..end[2]
        ])
        .to_owned();
    Ok(CropResult {
        volume,
        offset: start,
    })
}

/// Place a cropped volume back at its offset in a volume of the original
/// dimensions (zero elsewhere).
pub fn uncrop(crop: &CropResult, dims: (usize, usize, usize)) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros(dims);
    let (d, h, w) = crop.volume.dim();
    let [z0, y0, x0] = crop.offset;
    out.slice_mut(ndarray::s![z0..z0 + d, y0..y0 + h, x0..x0 + w])
        .assign(&crop.volume);
    out
}

/// Catalog manifest entry: a labels file, its format, and the annotated
/// slice indices, paired with the CT volume it annotates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ct: String,
    pub path: String,
    pub format: TargetFormat,
    pub annotated_slices: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use ndarray::Axis;

    #[test]
    fn normalize_hu_values() {
        assert_eq!(normalize_hu(-2000.0).unwrap(), 0.0);
        assert_eq!(normalize_hu(600.0).unwrap(), 1.0);
        assert_eq!(normalize_hu(-212.0).unwrap(), 0.5);
        assert!(normalize_hu(f32::NAN).is_err());
    }

    #[test]
    fn normalize_monotone() {
        let mut prev = -1.0f32;
        for i in 0..100 {
            let v = normalize_hu(-1500.0 + i as f32 * 25.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    fn vol(d: usize) -> NormVolume {
        NormVolume(Array3::from_shape_fn((d, 4, 4), |(z, y, x)| {
            z as f32 + 0.1 * y as f32 + 0.01 * x as f32
        }))
    }

    #[test]
    fn slab_single_slice_repeats() {
        let v = vol(1);
        let s = extract_slab(&v, 0).unwrap();
        let a = s.index_axis(Axis(0), 0);
        let b = s.index_axis(Axis(0), 1);
        let c = s.index_axis(Axis(0), 2);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn slab_boundary_replicates_edge() {
        let v = vol(3);
        let s = extract_slab(&v, 0).unwrap();
        assert_eq!(
            s.index_axis(Axis(0), 0),
            s.index_axis(Axis(0), 1),
            "missing lower neighbor replicates slice 0"
        );
        assert_eq!(s.index_axis(Axis(0), 2), v.0.index_axis(Axis(0), 1));
        assert!(extract_slab(&v, 3).is_err());
    }

    #[test]
    fn slab_interior_triplet() {
        let v = vol(5);
        let s = extract_slab(&v, 2).unwrap();
        assert_eq!(s.index_axis(Axis(0), 0), v.0.index_axis(Axis(0), 1));
        assert_eq!(s.index_axis(Axis(0), 1), v.0.index_axis(Axis(0), 2));
        assert_eq!(s.index_axis(Axis(0), 2), v.0.index_axis(Axis(0), 3));
    }

    fn test_slab(h: usize, w: usize) -> Slab {
        let mut labels = Array2::<u8>::zeros((h, w));
        for y in h / 4..3 * h / 4 {
            for x in w / 4..3 * w / 4 {
                labels[[y, x]] = 1;
            }
        }
        for y in h / 2 - 2..h / 2 + 2 {
            for x in w / 2 - 2..w / 2 + 2 {
                labels[[y, x]] = 2;
            }
        }
        let intensity = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c + 1) as f32 * 0.1 + y as f32 * 0.01 + x as f32 * 0.002).min(1.0)
        });
        Slab {
            intensity,
            labels,
            format: TargetFormat::Lesion,
            source: 0,
            slice: 0,
        }
    }

    #[test]
    fn augment_all_probs_zero_is_identity_crop() {
        let slab = test_slab(32, 32);
        let cfg = AugmentConfig::disabled(32);
        let mut rng = draw_rng(1, 0);
        let out = augment(&slab, &cfg, &mut rng).unwrap();
        assert_eq!(out.intensity, slab.intensity);
        assert_eq!(out.labels, slab.labels);
    }

    #[test]
    fn augment_mirror_twice_is_identity() {
        let slab = test_slab(16, 16);
        let mut i = slab.intensity.clone();
        i.invert_axis(Axis(2));
        i.invert_axis(Axis(2));
        assert_eq!(i, slab.intensity);
    }

    #[test]
    fn augment_preserves_format_and_channels() {
        let slab = test_slab(48, 48);
        let cfg = AugmentConfig {
            patch: 32,
            ..AugmentConfig::default()
        };
        for i in 0..20 {
            let mut rng = draw_rng(99, i);
            let out = augment(&slab, &cfg, &mut rng).unwrap();
            assert_eq!(out.format, slab.format);
            assert_eq!(out.intensity.dim(), (3, 32, 32));
            assert_eq!(out.labels.dim(), (32, 32));
            assert!(out.intensity.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // one-hot property preserved
            let t = out.target_one_hot().unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let s: f32 = (0..3).map(|c| t[[c, y, x]]).sum();
                    assert_eq!(s, 1.0);
                }
            }
        }
    }

    #[test]
    fn rotation_round_trip_keeps_target_overlap() {
        // rotate by theta then -theta; nearest-neighbor resampling keeps
        // Dice >= 0.95 on the foreground
        let slab = test_slab(64, 64);
        let theta = 0.6f64;
        let (i1, l1) = resample_affine(&slab.intensity, &slab.labels, 1.0, theta);
        let (_, l2) = resample_affine(&i1, &l1, 1.0, -theta);
        let to_mask = |l: &Array2<u8>| {
            Array3::from_shape_fn((1, 64, 64), |(_, y, x)| l[[y, x]] > 0)
        };
        let d = dice(to_mask(&l2).view(), to_mask(&slab.labels).view()).unwrap();
        assert!(d >= 0.95, "dice after round trip {d}");
    }

    #[test]
    fn augment_rejects_oversize_patch() {
        let slab = test_slab(16, 16);
        let cfg = AugmentConfig {
            patch: 32,
            ..AugmentConfig::default()
        };
        let mut rng = draw_rng(1, 0);
        assert!(augment(&slab, &cfg, &mut rng).is_err());
    }

    fn catalog_of(sizes: &[(TargetFormat, usize)]) -> Catalog {
        let mut c = Catalog::new();
        for &(f, n) in sizes {
            c.insert(f, (0..n).map(|i| (0usize, i)).collect());
        }
        c
    }

    #[test]
    fn sampler_balanced_in_every_window() {
        let catalog = catalog_of(&[
            (TargetFormat::Lung, 1000),
            (TargetFormat::Lesion, 20),
            (TargetFormat::Separation, 50),
            (TargetFormat::Airway, 7),
            (TargetFormat::Vessel, 3),
        ]);
        let plan = sample_epoch(&catalog, 40, 17).unwrap();
        assert_eq!(plan.draws.len(), 200);
        // every aligned window of size 10 has 2 per format
        for batch in plan.draws.chunks(10) {
            let mut counts = BTreeMap::new();
            for d in batch {
                *counts.entry(d.format).or_insert(0) += 1;
            }
            for f in TargetFormat::ALL {
                assert_eq!(counts[&f], 2);
            }
        }
    }

    #[test]
    fn sampler_quota_one_single_batch() {
        let catalog = catalog_of(&[
            (TargetFormat::Lung, 3),
            (TargetFormat::Lesion, 3),
            (TargetFormat::Separation, 3),
            (TargetFormat::Airway, 3),
            (TargetFormat::Vessel, 3),
        ]);
        let plan = sample_epoch(&catalog, 1, 5).unwrap();
        assert_eq!(plan.draws.len(), 5);
        let formats: std::collections::BTreeSet<_> =
            plan.draws.iter().map(|d| d.format).collect();
        assert_eq!(formats.len(), 5);
    }

    #[test]
    fn sampler_deterministic() {
        let catalog = catalog_of(&[
            (TargetFormat::Lung, 100),
            (TargetFormat::Lesion, 100),
            (TargetFormat::Separation, 100),
            (TargetFormat::Airway, 100),
            (TargetFormat::Vessel, 100),
        ]);
        let a = sample_epoch(&catalog, 50, 3).unwrap();
        let b = sample_epoch(&catalog, 50, 3).unwrap();
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn sampler_names_missing_format() {
        let catalog = catalog_of(&[(TargetFormat::Lung, 10)]);
        let err = sample_epoch(&catalog, 5, 1).unwrap_err();
        assert!(err.to_string().contains("lesion"), "{err}");
    }

    #[test]
    fn crop_full_mask_is_identity() {
        let vol = Array3::from_shape_fn((4, 5, 6), |(z, y, x)| (z + y + x) as f32);
        let mask = Array3::from_elem((4, 5, 6), true);
        let r = crop_to_lung(&vol, &mask, 0).unwrap();
        assert_eq!(r.volume, vol);
        assert_eq!(r.offset, [0, 0, 0]);
    }

    #[test]
    fn crop_single_voxel_with_margin() {
        let vol = Array3::from_elem((8, 8, 8), 1.0f32);
        let mut mask = Array3::from_elem((8, 8, 8), false);
        mask[[4, 4, 4]] = true;
        let r = crop_to_lung(&vol, &mask, 2).unwrap();
        assert_eq!(r.volume.dim(), (5, 5, 5));
        assert_eq!(r.offset, [2, 2, 2]);
        // clipped at the border
        let mut mask2 = Array3::from_elem((8, 8, 8), false);
        mask2[[0, 0, 0]] = true;
        let r2 = crop_to_lung(&vol, &mask2, 2).unwrap();
        assert_eq!(r2.volume.dim(), (3, 3, 3));
        assert_eq!(r2.offset, [0, 0, 0]);
    }

    #[test]
    fn uncrop_restores_coordinates() {
        let vol = Array3::from_shape_fn((6, 6, 6), |(z, y, x)| (z * 36 + y * 6 + x) as f32);
        let mut mask = Array3::from_elem((6, 6, 6), false);
        for z in 2..5 {
            mask[[z, 3, 3]] = true;
        }
        let r = crop_to_lung(&vol, &mask, 1).unwrap();
        let restored = uncrop(&r, (6, 6, 6));
        for ((z, y, x), &m) in mask.indexed_iter() {
            if m {
                assert_eq!(restored[[z, y, x]], vol[[z, y, x]]);
            }
        }
    }

    #[test]
    fn crop_empty_mask_errors() {
        let vol = Array3::from_elem((4, 4, 4), 0.0f32);
        let mask = Array3::from_elem((4, 4, 4), false);
        assert!(crop_to_lung(&vol, &mask, 0).is_err());
    }

    #[test]
    fn draw_rng_streams_independent_of_order() {
        let a1: u64 = draw_rng(5, 0).random();
        let b1: u64 = draw_rng(5, 1).random();
        let b2: u64 = draw_rng(5, 1).random();
        let a2: u64 = draw_rng(5, 0).random();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
    }
}
