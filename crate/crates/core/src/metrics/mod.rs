//! Evaluation metrics: confusion-based rates with the empty-case conventions,
//! 26-connected components, 3D skeletonization, and tubular tree metrics.

pub mod skeleton;

use crate::error::{Error, Result};
use ndarray::ArrayView3;
use serde::Serialize;

pub use skeleton::{skeletonize, tree_metrics, SkeletonBranch, SkeletonGraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pred: ArrayView3<bool>, target: ArrayView3<bool>) -> Result<ConfusionCounts> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice overlap. When neither prediction nor target has any positive voxel
/// the score is 1 by convention.
pub fn dice(pred: ArrayView3<bool>, target: ArrayView3<bool>) -> Result<f64> {
    let c = confusion(pred, target)?;
    Ok(dice_from_counts(&c))
}

pub fn dice_from_counts(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

/// False positive error (FP / |pred|) and false negative error (FN / |target|).
/// Each is undefined (`None`) when its denominator is zero; undefined values
/// are excluded from aggregation.
pub fn fpe_fne(
    pred: ArrayView3<bool>,
    target: ArrayView3<bool>,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = confusion(pred, target)?;
    Ok(fpe_fne_from_counts(&c))
}

pub fn fpe_fne_from_counts(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let pred_pos = c.tp + c.fp;
    let target_pos = c.tp + c.fn_;
    let fpe = (pred_pos > 0).then(|| c.fp as f64 / pred_pos as f64);
    let fne = (target_pos > 0).then(|| c.fn_ as f64 / target_pos as f64);
    (fpe, fne)
}

/// Sensitivity (TP / |target|) and specificity (TN / |negatives|), undefined
/// when the denominator is zero.
pub fn sens_spec(
    pred: ArrayView3<bool>,
    target: ArrayView3<bool>,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = confusion(pred, target)?;
    Ok(sens_spec_from_counts(&c))
}

pub fn sens_spec_from_counts(c: &ConfusionCounts) -> (Option<f64>, Option<f64>) {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    let sens = (pos > 0).then(|| c.tp as f64 / pos as f64);
    let spec = (neg > 0).then(|| c.tn as f64 / neg as f64);
    (sens, spec)
}

/// Per-target metric bundle.
#[derive(Clone, Debug, Serialize)]
pub struct SegReport {
    pub target: String,
    pub counts: ConfusionCounts,
    pub dice: f64,
    pub fpe: Option<f64>,
    pub fne: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub td: Option<f64>,
    pub bd: Option<f64>,
    /// Fraction of a branch's skeleton voxels that must be covered for the
    /// branch to count as detected.
    pub branch_detected_fraction: f64,
}

impl SegReport {
    pub fn from_masks(
        target_name: &str,
        pred: ArrayView3<bool>,
        target: ArrayView3<bool>,
    ) -> Result<Self> {
        let counts = confusion(pred, target)?;
        let (fpe, fne) = fpe_fne_from_counts(&counts);
        let (sensitivity, specificity) = sens_spec_from_counts(&counts);
        Ok(SegReport {
            target: target_name.to_string(),
            counts,
            dice: dice_from_counts(&counts),
            fpe,
            fne,
            sensitivity,
            specificity,
            td: None,
            bd: None,
            branch_detected_fraction: skeleton::DEFAULT_BRANCH_FRACTION,
        })
    }

    /// Attach tree metrics, computed on the prediction's largest connected
    /// component against the target skeleton.
    pub fn with_tree_metrics(
        mut self,
        pred: ArrayView3<bool>,
        target: ArrayView3<bool>,
        spacing: [f64; 3],
        branch_fraction: f64,
    ) -> Result<Self> {
        let (td, bd) = tree_metrics(pred, target, spacing, branch_fraction)?;
        self.td = td;
        self.bd = bd;
        self.branch_detected_fraction = branch_fraction;
        Ok(self)
    }
}

const OFFSETS_26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut i = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if !(dz == 0 && dy == 0 && dx == 0) {
                    out[i] = [dz, dy, dx];
                    i += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// Largest 26-connected component of a binary mask. Size ties resolve to the
/// component containing the lexicographically smallest voxel. Empty input
/// yields an empty mask.
pub fn largest_cc(mask: ArrayView3<bool>) -> ndarray::Array3<bool> {
    let dims = mask.dim();
    let mut labels = ndarray::Array3::<u32>::zeros(dims);
    let mut best_label = 0u32;
    let mut best_size = 0usize;
    let mut next = 1u32;
    let mut queue = Vec::new();
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if !mask[[z, y, x]] || labels[[z, y, x]] != 0 {
                    continue;
                }
                // seed is the lexicographically smallest voxel of its component
                let label = next;
                next += 1;
                let mut size = 0usize;
                queue.clear();
                queue.push([z, y, x]);
                labels[[z, y, x]] = label;
                while let Some([cz, cy, cx]) = queue.pop() {
                    size += 1;
                    for off in OFFSETS_26 {
                        let nz = cz as i64 + off[0];
                        let ny = cy as i64 + off[1];
                        let nx = cx as i64 + off[2];
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= dims.0 as i64
                            || ny >= dims.1 as i64
                            || nx >= dims.2 as i64
                        {
                            continue;
                        }
                        let n = [nz as usize, ny as usize, nx as usize];
                        if mask[n] && labels[n] == 0 {
                            labels[n] = label;
                            queue.push(n);
                        }
                    }
                }
                if size > best_size {
                    best_size = size;
                    best_label = label;
                }
            }
        }
    }
    labels.mapv(|l| l != 0 && l == best_label)
}

/// Number of distinct 26-connected components.
pub fn component_count(mask: ArrayView3<bool>) -> usize {
    let dims = mask.dim();
    let mut seen = ndarray::Array3::<bool>::from_elem(dims, false);
    let mut count = 0;
    let mut queue = Vec::new();
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if !mask[[z, y, x]] || seen[[z, y, x]] {
                    continue;
                }
                count += 1;
                queue.clear();
                queue.push([z, y, x]);
                seen[[z, y, x]] = true;
                while let Some([cz, cy, cx]) = queue.pop() {
                    for off in OFFSETS_26 {
                        let nz = cz as i64 + off[0];
                        let ny = cy as i64 + off[1];
                        let nx = cx as i64 + off[2];
                        if nz < 0
                            || ny < 0
                            || nx < 0
                            || nz >= dims.0 as i64
                            || ny >= dims.1 as i64
                            || nx >= dims.2 as i64
                        {
                            continue;
                        }
                        let n = [nz as usize, ny as usize, nx as usize];
                        if mask[n] && !seen[n] {
                            seen[n] = true;
                            queue.push(n);
                        }
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask_from(voxels: &[[usize; 3]], dims: (usize, usize, usize)) -> Array3<bool> {
        let mut m = Array3::from_elem(dims, false);
        for &v in voxels {
            m[v] = true;
        }
        m
    }

    #[test]
    fn dice_perfect_and_empty() {
        let a = mask_from(&[[1, 1, 1], [1, 1, 2]], (3, 3, 3));
        assert_eq!(dice(a.view(), a.view()).unwrap(), 1.0);
        let e = Array3::from_elem((3, 3, 3), false);
        assert_eq!(dice(e.view(), e.view()).unwrap(), 1.0);
    }

    #[test]
    fn dice_half_overlap() {
        // |pred|=4, |target|=4, overlap 2 -> 2*2/8 = 0.5
        let pred = mask_from(&[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 1, 0]], (2, 3, 4));
        let target = mask_from(&[[0, 0, 2], [0, 1, 0], [1, 0, 0], [1, 1, 1]], (2, 3, 4));
        assert_eq!(dice(pred.view(), target.view()).unwrap(), 0.5);
    }

    #[test]
    fn fpe_fne_definitions() {
        // pred 10 positives, 3 false -> fpe 0.3
        let mut pred = Array3::from_elem((1, 2, 10), false);
        let mut target = Array3::from_elem((1, 2, 10), false);
        for x in 0..10 {
            pred[[0, 0, x]] = true;
        }
        for x in 0..7 {
            target[[0, 0, x]] = true;
        }
        let (fpe, _) = fpe_fne(pred.view(), target.view()).unwrap();
        assert_eq!(fpe, Some(0.3));

        // target 10 positives, 2 missed -> fne 0.2
        let mut pred = Array3::from_elem((1, 2, 10), false);
        let mut target = Array3::from_elem((1, 2, 10), false);
        for x in 0..10 {
            target[[0, 0, x]] = true;
        }
        for x in 0..8 {
            pred[[0, 0, x]] = true;
        }
        let (_, fne) = fpe_fne(pred.view(), target.view()).unwrap();
        assert_eq!(fne, Some(0.2));
    }

    #[test]
    fn empty_pred_nonempty_target() {
        let pred = Array3::from_elem((2, 2, 2), false);
        let target = mask_from(&[[0, 0, 0], [1, 1, 1]], (2, 2, 2));
        let (fpe, fne) = fpe_fne(pred.view(), target.view()).unwrap();
        assert_eq!(fpe, None);
        assert_eq!(fne, Some(1.0));
    }

    #[test]
    fn sensitivity_equals_one_minus_fne() {
        let pred = mask_from(&[[0, 0, 0], [0, 1, 1], [1, 0, 1]], (2, 2, 2));
        let target = mask_from(&[[0, 0, 0], [0, 1, 0], [1, 0, 1], [1, 1, 0]], (2, 2, 2));
        let (sens, _) = sens_spec(pred.view(), target.view()).unwrap();
        let (_, fne) = fpe_fne(pred.view(), target.view()).unwrap();
        assert!((sens.unwrap() - (1.0 - fne.unwrap())).abs() < 1e-15);
    }

    #[test]
    fn all_positive_prediction_has_sensitivity_one() {
        let pred = Array3::from_elem((2, 2, 2), true);
        let target = mask_from(&[[0, 0, 0]], (2, 2, 2));
        let (sens, spec) = sens_spec(pred.view(), target.view()).unwrap();
        assert_eq!(sens, Some(1.0));
        assert_eq!(spec, Some(0.0));
    }

    #[test]
    fn largest_cc_picks_bigger() {
        // component of 5 and one of 3
        let big = [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 0, 4]];
        let small = [[4, 4, 0], [4, 4, 1], [4, 4, 2]];
        let mut all = big.to_vec();
        all.extend_from_slice(&small);
        let m = mask_from(&all, (5, 5, 5));
        let cc = largest_cc(m.view());
        for v in big {
            assert!(cc[v]);
        }
        for v in small {
            assert!(!cc[v]);
        }
    }

    #[test]
    fn largest_cc_single_component_identity() {
        let m = mask_from(&[[1, 1, 1], [1, 1, 2], [2, 2, 2]], (4, 4, 4));
        assert_eq!(largest_cc(m.view()), m);
    }

    #[test]
    fn largest_cc_empty_is_empty() {
        let m = Array3::from_elem((3, 3, 3), false);
        assert_eq!(largest_cc(m.view()), m);
    }

    #[test]
    fn largest_cc_tie_prefers_lexicographically_smallest() {
        let a = [[0, 0, 0], [0, 0, 1]];
        let b = [[2, 2, 2], [2, 2, 3]];
        let mut all = a.to_vec();
        all.extend_from_slice(&b);
        let m = mask_from(&all, (4, 4, 4));
        let cc = largest_cc(m.view());
        assert!(cc[[0, 0, 0]] && cc[[0, 0, 1]]);
        assert!(!cc[[2, 2, 2]]);
    }

    #[test]
    fn diagonal_voxels_are_26_connected() {
        let m = mask_from(&[[0, 0, 0], [1, 1, 1], [2, 2, 2]], (3, 3, 3));
        assert_eq!(component_count(m.view()), 1);
    }
}
