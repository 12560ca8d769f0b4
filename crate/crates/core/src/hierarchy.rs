//! Target formats, channel encodings, and the polymorphic sum-reduction algebra.
//!
//! Every annotation source carries one of five partial label formats. The
//! network always predicts four polymorphic channels (background, healthy
//! lung, GGO, consolidation) plus two independent two-channel fields for
//! airway and vessel. Coarser formats are reached by summing channels of the
//! four-channel field, never by retraining or reshaping the output.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_traits::Float;
use serde::{Deserialize, Serialize};

/// One of the five partial annotation formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetFormat {
    Lung,
    Lesion,
    Separation,
    Airway,
    Vessel,
}

impl TargetFormat {
    pub const ALL: [TargetFormat; 5] = [
        TargetFormat::Lung,
        TargetFormat::Lesion,
        TargetFormat::Separation,
        TargetFormat::Airway,
        TargetFormat::Vessel,
    ];

    /// Number of target channels for this format.
    pub fn channels(self) -> usize {
        match self {
            TargetFormat::Lung => 2,
            TargetFormat::Lesion => 3,
            TargetFormat::Separation => 4,
            TargetFormat::Airway => 2,
            TargetFormat::Vessel => 2,
        }
    }

    /// Lowercase tag used in manifests, reports and file headers.
    pub fn name(self) -> &'static str {
        match self {
            TargetFormat::Lung => "lung",
            TargetFormat::Lesion => "lesion",
            TargetFormat::Separation => "separation",
            TargetFormat::Airway => "airway",
            TargetFormat::Vessel => "vessel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lung" => Ok(TargetFormat::Lung),
            "lesion" => Ok(TargetFormat::Lesion),
            "separation" => Ok(TargetFormat::Separation),
            "airway" => Ok(TargetFormat::Airway),
            "vessel" => Ok(TargetFormat::Vessel),
            other => Err(Error::Config(format!("unknown target format {other:?}"))),
        }
    }

    /// True for the formats served by the four-channel polymorphic head.
    /// Airway and Vessel route to the multitask head instead.
    pub fn is_polymorphic(self) -> bool {
        matches!(
            self,
            TargetFormat::Lung | TargetFormat::Lesion | TargetFormat::Separation
        )
    }

    /// Channel groups that sum the four polymorphic channels down to this
    /// format. `None` for the multitask formats.
    pub fn reduction_groups(self) -> Option<&'static [&'static [usize]]> {
        match self {
            TargetFormat::Lung => Some(&[&[0], &[1, 2, 3]]),
            TargetFormat::Lesion => Some(&[&[0], &[1], &[2, 3]]),
            TargetFormat::Separation => Some(&[&[0], &[1], &[2], &[3]]),
            TargetFormat::Airway | TargetFormat::Vessel => None,
        }
    }
}

impl std::fmt::Display for TargetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An integer label grid in one of the five formats.
#[derive(Clone, Debug)]
pub struct HierLabelVolume {
    pub labels: Array3<u8>,
    pub format: TargetFormat,
    /// Voxel spacing in mm, (z, y, x) order.
    pub spacing: [f64; 3],
}

impl HierLabelVolume {
    pub fn new(labels: Array3<u8>, format: TargetFormat, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Contract(format!(
                "spacing must be strictly positive, got {spacing:?}"
            )));
        }
        let max = format.channels() as u8;
        if let Some(&bad) = labels.iter().find(|&&v| v >= max) {
            return Err(Error::Encode(format!(
                "label value {bad} out of range for format {} ({} channels)",
                format.name(),
                format.channels()
            )));
        }
        Ok(Self {
            labels,
            format,
            spacing,
        })
    }
}

/// The four-channel polymorphic probability field for one slice, `[4, H, W]`.
#[derive(Clone, Debug)]
pub struct PolyProbField {
    pub probs: Array3<f32>,
}

impl PolyProbField {
    pub fn new(probs: Array3<f32>) -> Result<Self> {
        check_normalized(&probs.view(), 4, 1e-6, "polymorphic field")?;
        Ok(Self { probs })
    }
}

/// The two independent two-channel multitask fields for one slice.
#[derive(Clone, Debug)]
pub struct DualProbField {
    pub airway: Array3<f32>,
    pub vessel: Array3<f32>,
}

impl DualProbField {
    pub fn new(airway: Array3<f32>, vessel: Array3<f32>) -> Result<Self> {
        check_normalized(&airway.view(), 2, 1e-6, "airway field")?;
        check_normalized(&vessel.view(), 2, 1e-6, "vessel field")?;
        Ok(Self { airway, vessel })
    }
}

fn check_normalized(probs: &ArrayView3<f32>, channels: usize, tol: f32, what: &str) -> Result<()> {
    if probs.shape()[0] != channels {
        return Err(Error::Shape(format!(
            "{what}: expected {channels} channels, got {}",
            probs.shape()[0]
        )));
    }
    let sums = probs.sum_axis(Axis(0));
    if let Some(&s) = sums.iter().find(|&&s| (s - 1.0).abs() > tol) {
        return Err(Error::Contract(format!(
            "{what}: per-pixel channel sum {s} deviates from 1 by more than {tol}"
        )));
    }
    Ok(())
}

/// One-hot encode a label slice for its format: `[C, H, W]`, exactly one
/// channel set per pixel.
pub fn encode_target<T: Float>(labels: ArrayView2<u8>, format: TargetFormat) -> Result<Array3<T>> {
    let channels = format.channels();
    let (h, w) = labels.dim();
    let mut out = Array3::from_elem((channels, h, w), T::zero());
    for ((y, x), &v) in labels.indexed_iter() {
        let c = v as usize;
        if c >= channels {
            return Err(Error::Encode(format!(
                "label value {v} out of range for format {} ({channels} channels)",
                format.name()
            )));
        }
        out[[c, y, x]] = T::one();
    }
    Ok(out)
}

/// Sum-reduce the four polymorphic channels to match a coarser format.
///
/// Separation is the identity; Lesion merges GGO and consolidation; Lung
/// merges everything that is lung tissue. Airway and Vessel are rejected:
/// those targets never route through the polymorphic head.
pub fn reduce_probs<T: Float>(
    probs: ArrayView3<T>,
    format: TargetFormat,
) -> Result<Array3<T>> {
    let groups = format.reduction_groups().ok_or_else(|| {
        Error::Contract(format!(
            "format {} routes to the multitask head, not the polymorphic head",
            format.name()
        ))
    })?;
    if probs.shape()[0] != 4 {
        return Err(Error::Shape(format!(
            "polymorphic field must have 4 channels, got {}",
            probs.shape()[0]
        )));
    }
    let (_, h, w) = probs.dim();
    let mut out = Array3::from_elem((groups.len(), h, w), T::zero());
    for (g, members) in groups.iter().enumerate() {
        for &c in members.iter() {
            let src = probs.index_axis(Axis(0), c);
            out.index_axis_mut(Axis(0), g)
                .zip_mut_with(&src, |o, &p| *o = *o + p);
        }
    }
    Ok(out)
}

/// Binary masks derived from one slice of predictions.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub lung: Array2<bool>,
    pub healthy: Array2<bool>,
    pub lesion: Array2<bool>,
    pub ggo: Array2<bool>,
    pub consolidation: Array2<bool>,
    pub airway: Array2<bool>,
    pub vessel: Array2<bool>,
}

/// Argmax over channels; ties resolve to the lowest channel index.
pub fn argmax_channels<T: Float>(probs: ArrayView3<T>) -> Array2<u8> {
    let (c, h, w) = probs.dim();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_v = probs[[0, y, x]];
            for k in 1..c {
                let v = probs[[k, y, x]];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[[y, x]] = best as u8;
        }
    }
    out
}

/// Derive the full mask set from the polymorphic and multitask fields.
///
/// The polymorphic class decides the five hierarchical masks; airway and
/// vessel come from their own fields, independent of the polymorphic class.
pub fn compose_masks<T: Float>(
    poly: ArrayView3<T>,
    airway: ArrayView3<T>,
    vessel: ArrayView3<T>,
) -> MaskSet {
    let cls = argmax_channels(poly);
    let lung = cls.mapv(|c| c >= 1);
    let healthy = cls.mapv(|c| c == 1);
    let ggo = cls.mapv(|c| c == 2);
    let consolidation = cls.mapv(|c| c == 3);
    let lesion = cls.mapv(|c| c == 2 || c == 3);
    let airway = argmax_channels(airway).mapv(|c| c == 1);
    let vessel = argmax_channels(vessel).mapv(|c| c == 1);
    MaskSet {
        lung,
        healthy,
        lesion,
        ggo,
        consolidation,
        airway,
        vessel,
    }
}
