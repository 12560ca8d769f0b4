//! Whole-volume prediction by stacking per-slice 2.5D predictions along the
//! axial direction, and derivation of the output masks.

use crate::engine::Graph;
use crate::error::{Error, Result};
use crate::hierarchy;
use crate::network::Model;
use crate::pipeline::{extract_slab, NormVolume};
use ndarray::{Array3, Array4, Axis, Ix4};
use rayon::prelude::*;

/// Stacked per-voxel probability fields.
pub struct VolumePrediction {
    /// `[D, 4, H, W]`
    pub poly: Array4<f32>,
    /// `[D, 2, H, W]`
    pub airway: Array4<f32>,
    /// `[D, 2, H, W]`
    pub vessel: Array4<f32>,
}

/// The seven derived binary volumes.
pub struct MaskVolumes {
    pub lung: Array3<bool>,
    pub healthy: Array3<bool>,
    pub lesion: Array3<bool>,
    pub ggo: Array3<bool>,
    pub consolidation: Array3<bool>,
    pub airway: Array3<bool>,
    pub vessel: Array3<bool>,
}

impl MaskVolumes {
    pub fn by_name(&self, name: &str) -> Option<&Array3<bool>> {
        match name {
            "lung" => Some(&self.lung),
            "healthy" => Some(&self.healthy),
            "lesion" => Some(&self.lesion),
            "ggo" => Some(&self.ggo),
            "consolidation" => Some(&self.consolidation),
            "airway" => Some(&self.airway),
            "vessel" => Some(&self.vessel),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 7] = [
        "lung",
        "healthy",
        "lesion",
        "ggo",
        "consolidation",
        "airway",
        "vessel",
    ];

    /// Combined 6-class volume in the silver layout (0 background, 1 healthy,
    /// 2 GGO, 3 consolidation, 4 vessel, 5 airway). The independent airway
    /// and vessel masks override the polymorphic class, airway last.
    pub fn combined_silver(&self) -> Array3<u8> {
        let dims = self.lung.dim();
        let mut out = Array3::<u8>::zeros(dims);
        for ((z, y, x), o) in out.indexed_iter_mut() {
            let i = [z, y, x];
            *o = if self.airway[i] {
                5
            } else if self.vessel[i] {
                4
            } else if self.ggo[i] {
                2
            } else if self.consolidation[i] {
                3
            } else if self.healthy[i] {
                1
            } else {
                0
            };
        }
        out
    }
}

fn reflect_index(i: i64, n: usize) -> usize {
    // reflect without repeating the edge sample (a b c -> b|a b c|b)
    let n = n as i64;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Predict a whole normalized volume by stacking axial 2.5D predictions at
/// full resolution. Non-multiple-of-16 in-plane dims are reflect-padded up
/// and the outputs cropped back.
pub fn predict_volume(vol: &NormVolume, model: &Model<f32>) -> Result<VolumePrediction> {
    let (d, h, w) = vol.0.dim();
    if d < 1 {
        return Err(Error::Shape("empty volume".into()));
    }
    let ph = h.div_ceil(16) * 16;
    let pw = w.div_ceil(16) * 16;
    let padded = if ph == h && pw == w {
        vol.0.clone()
    } else {
        let mut p = Array3::<f32>::zeros((d, ph, pw));
        for z in 0..d {
            for y in 0..ph {
                for x in 0..pw {
                    p[[z, y, x]] = vol.0[[z, reflect_index(y as i64, h), reflect_index(x as i64, w)]];
                }
            }
        }
        p
    };
    let padded = NormVolume(padded);

    struct SlicePred {
        poly: Array3<f32>,
        airway: Array3<f32>,
        vessel: Array3<f32>,
    }
    let slices: Vec<Result<SlicePred>> = (0..d)
        .into_par_iter()
        .map(|z| {
            let slab = extract_slab(&padded, z)?;
            let input = slab.insert_axis(Axis(0)).into_dyn();
            let mut g = Graph::new();
            let out = model.forward_eval(&mut g, input)?;
            let take = |g: &mut Graph<f32>, id| {
                let probs = g.softmax_channels(id);
                g.value(probs)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap()
                    .index_axis(Axis(0), 0)
                    .slice(ndarray::s![.., 0..h, 0..w])
                    .to_owned()
            };
            Ok(SlicePred {
                poly: take(&mut g, out.poly[0]),
                airway: take(&mut g, out.airway[0]),
                vessel: take(&mut g, out.vessel[0]),
            })
        })
        .collect();

    let mut poly = Array4::<f32>::zeros((d, 4, h, w));
    let mut airway = Array4::<f32>::zeros((d, 2, h, w));
    let mut vessel = Array4::<f32>::zeros((d, 2, h, w));
    for (z, s) in slices.into_iter().enumerate() {
        let s = s?;
        poly.index_axis_mut(Axis(0), z).assign(&s.poly);
        airway.index_axis_mut(Axis(0), z).assign(&s.airway);
        vessel.index_axis_mut(Axis(0), z).assign(&s.vessel);
    }
    Ok(VolumePrediction {
        poly,
        airway,
        vessel,
    })
}

/// Apply the per-voxel composition rules slice-wise over the whole volume.
pub fn derive_masks(pred: &VolumePrediction) -> MaskVolumes {
    let (d, _, h, w) = pred.poly.dim();
    let mut out = MaskVolumes {
        lung: Array3::from_elem((d, h, w), false),
        healthy: Array3::from_elem((d, h, w), false),
        lesion: Array3::from_elem((d, h, w), false),
        ggo: Array3::from_elem((d, h, w), false),
        consolidation: Array3::from_elem((d, h, w), false),
        airway: Array3::from_elem((d, h, w), false),
        vessel: Array3::from_elem((d, h, w), false),
    };
    for z in 0..d {
        let masks = hierarchy::compose_masks(
            pred.poly.index_axis(Axis(0), z),
            pred.airway.index_axis(Axis(0), z),
            pred.vessel.index_axis(Axis(0), z),
        );
        out.lung.index_axis_mut(Axis(0), z).assign(&masks.lung);
        out.healthy
            .index_axis_mut(Axis(0), z)
            .assign(&masks.healthy);
        out.lesion.index_axis_mut(Axis(0), z).assign(&masks.lesion);
        out.ggo.index_axis_mut(Axis(0), z).assign(&masks.ggo);
        out.consolidation
            .index_axis_mut(Axis(0), z)
            .assign(&masks.consolidation);
        out.airway.index_axis_mut(Axis(0), z).assign(&masks.airway);
        out.vessel.index_axis_mut(Axis(0), z).assign(&masks.vessel);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use ndarray::Array3;

    fn small_model() -> Model<f32> {
        Model::new(ModelConfig {
            base_width: 4,
            decoder_width: 8,
            patch: 32,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn single_slice_volume_predicts() {
        let model = small_model();
        let vol = NormVolume(Array3::from_elem((1, 32, 32), 0.5));
        let pred = predict_volume(&vol, &model).unwrap();
        assert_eq!(pred.poly.dim(), (1, 4, 32, 32));
        assert_eq!(pred.airway.dim(), (1, 2, 32, 32));
    }

    #[test]
    fn output_depth_matches_input() {
        let model = small_model();
        let vol = NormVolume(Array3::from_elem((5, 32, 32), 0.3));
        let pred = predict_volume(&vol, &model).unwrap();
        assert_eq!(pred.poly.dim().0, 5);
    }

    #[test]
    fn non_multiple_of_16_dims_padded_and_cropped() {
        let model = small_model();
        let vol = NormVolume(Array3::from_shape_fn((2, 30, 25), |(z, y, x)| {
            (z + y + x) as f32 * 0.01
        }));
        let pred = predict_volume(&vol, &model).unwrap();
        assert_eq!(pred.poly.dim(), (2, 4, 30, 25));
        // probabilities normalized
        for z in 0..2 {
            for y in 0..30 {
                for x in 0..25 {
                    let s: f32 = (0..4).map(|c| pred.poly[[z, c, y, x]]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn repeated_inference_bit_identical() {
        let model = small_model();
        let vol = NormVolume(Array3::from_shape_fn((3, 32, 32), |(z, y, x)| {
            ((z * 31 + y * 7 + x) % 13) as f32 / 13.0
        }));
        let a = predict_volume(&vol, &model).unwrap();
        let b = predict_volume(&vol, &model).unwrap();
        assert!(a
            .poly
            .iter()
            .zip(b.poly.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn derived_masks_nest() {
        let model = small_model();
        let vol = NormVolume(Array3::from_shape_fn((2, 32, 32), |(z, y, x)| {
            ((z + y * 3 + x * 5) % 17) as f32 / 17.0
        }));
        let pred = predict_volume(&vol, &model).unwrap();
        let masks = derive_masks(&pred);
        for ((z, y, x), &l) in masks.lesion.indexed_iter() {
            let i = [z, y, x];
            if l {
                assert!(masks.lung[i]);
                assert!(!masks.healthy[i]);
            }
            if masks.ggo[i] {
                assert!(!masks.consolidation[i]);
                assert!(masks.lesion[i]);
            }
            if masks.healthy[i] {
                assert!(masks.lung[i]);
            }
        }
        // lesion = ggo U consolidation exactly
        for ((g, c), l) in masks
            .ggo
            .iter()
            .zip(masks.consolidation.iter())
            .zip(masks.lesion.iter())
        {
            assert_eq!(*g || *c, *l);
        }
    }
}
