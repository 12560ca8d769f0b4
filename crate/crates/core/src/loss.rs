//! The HPML loss stack: generalized Dice loss without background, cross
//! entropy with background, their sum, deep-supervision weighting, per-format
//! routing through polymorphic sum reduction, and the five-component total.

use crate::engine::{Graph, NodeId, Scalar};
use crate::error::{Error, Result};
use crate::hierarchy::TargetFormat;
use crate::network::NetworkOutputs;
use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix4, IxDyn};
use serde::Serialize;
use std::collections::BTreeMap;

/// Deep-supervision weights from full resolution down to /16.
pub const DSL_WEIGHTS: [f64; 5] = [0.75, 0.125, 0.0625, 0.03125, 0.015625];

/// Floor applied to probabilities before the cross-entropy log.
pub const CE_CLAMP: f64 = 1e-12;

/// Tolerance for the per-pixel normalization contract on predictions.
pub const NORM_TOL: f64 = 1e-4;

/// Per-step loss report: one component per target format present, per-scale
/// values averaged over the formats, and their mean as the total.
#[derive(Clone, Debug, Serialize)]
pub struct LossBreakdown {
    pub components: BTreeMap<String, f64>,
    pub scales: [f64; 5],
    pub total: f64,
}

fn check_pred_target<T: Scalar>(pred: &ArrayD<T>, target: &ArrayD<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.ndim() != 4 {
        return Err(Error::Shape(format!(
            "expected [N,C,H,W], got {:?}",
            pred.shape()
        )));
    }
    let v = pred.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = v.dim();
    let tol = T::from_f(NORM_TOL);
    for in_ in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut s = T::zero();
                for k in 0..c {
                    s = s + v[[in_, k, y, x]];
                }
                if (s - T::one()).abs() > tol {
                    return Err(Error::Contract(format!(
                        "prediction not normalized: pixel sum {} at (n={in_}, y={y}, x={x})",
                        s.to_f()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Generalized Dice loss over foreground channels with per-channel weights
/// `1 / area^2`. Channels absent from the target are dropped from both the
/// numerator and denominator. Computed per item, then averaged. Items with
/// no foreground at all contribute 0.
pub fn gdl_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &ArrayD<T>,
) -> Result<NodeId> {
    check_pred_target(g.value(pred), target)?;
    let tv = target.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, _, _) = tv.dim();
    // constant per-item, per-channel weights from target areas
    let mut weights = Array2::<T>::zeros((n, c));
    let mut den_const = Array1::<T>::zeros(n);
    let mut degenerate = Array1::<T>::zeros(n);
    for in_ in 0..n {
        let mut any = false;
        for k in 1..c {
            let area = tv
                .index_axis(Axis(0), in_)
                .index_axis(Axis(0), k)
                .sum();
            if area > T::zero() {
                let w = T::one() / (area * area);
                weights[[in_, k]] = w;
                den_const[in_] = den_const[in_] + w * area;
                any = true;
            }
        }
        if !any {
            degenerate[in_] = T::one();
        }
    }
    let inter_raw = g.mul_const(pred, target.clone());
    let inter_nc = g.sum_nc(inter_raw);
    let inter_w = g.mul_const(inter_nc, weights.clone().into_dyn());
    let num = g.sum_axis1(inter_w);
    let pred_nc = g.sum_nc(pred);
    let pred_w = g.mul_const(pred_nc, weights.into_dyn());
    let den_pred = g.sum_axis1(pred_w);
    // degenerate items: pin the ratio at 1/2 so the per-item loss is 0 and
    // carries no gradient
    let half_deg = degenerate.mapv(|d| d * T::from_f(0.5));
    let num_adj = g.add_const(num, &half_deg.into_dyn());
    let den_shift = (&den_const + &degenerate).into_dyn();
    let den = g.add_const(den_pred, &den_shift);
    let ratio = g.div(num_adj, den);
    let per_item = g.affine(ratio, T::from_f(-2.0), T::one());
    Ok(g.mean_all(per_item))
}

/// Cross entropy with background: mean over pixels of
/// `-sum_c log(max(pred_c, 1e-12)) * target_c`, averaged over items.
pub fn ce_node<T: Scalar>(g: &mut Graph<T>, pred: NodeId, target: &ArrayD<T>) -> Result<NodeId> {
    check_pred_target(g.value(pred), target)?;
    let shape = target.shape();
    let (h, w) = (shape[2], shape[3]);
    let clamped = g.clamp_min(pred, T::from_f(CE_CLAMP));
    let logp = g.ln(clamped);
    let weighted = g.mul_const(logp, target.clone());
    let nc = g.sum_nc(weighted);
    let per_item = g.sum_axis1(nc);
    let scaled = g.affine(per_item, T::from_f(-1.0 / (h * w) as f64), T::zero());
    Ok(g.mean_all(scaled))
}

/// `L = GDL + CrossEntropy`.
pub fn combined_node<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &ArrayD<T>,
) -> Result<NodeId> {
    let gdl = gdl_node(g, pred, target)?;
    let ce = ce_node(g, pred, target)?;
    Ok(g.add(gdl, ce))
}

/// Deep-supervision weighting of the five per-scale losses:
/// `0.75 L0 + sum_{i=1..4} 2^-(i+2) Li`.
pub fn dsl_node<T: Scalar>(g: &mut Graph<T>, scales: &[NodeId]) -> Result<NodeId> {
    if scales.len() != 5 {
        return Err(Error::Contract(format!(
            "deep supervision expects 5 per-scale losses, got {}",
            scales.len()
        )));
    }
    let weighted: Vec<NodeId> = scales
        .iter()
        .zip(DSL_WEIGHTS.iter())
        .map(|(&s, &w)| g.affine(s, T::from_f(w), T::zero()))
        .collect();
    Ok(g.add_n(&weighted))
}

/// Per-scale one-hot targets: nearest-neighbor downsampling of the label
/// slice followed by one-hot encoding.
pub fn targets_per_scale<T: Scalar>(
    labels: &[ArrayView2<'_, u8>],
    format: TargetFormat,
) -> Result<[ArrayD<T>; 5]> {
    let c = format.channels();
    let mut out: [Option<ArrayD<T>>; 5] = Default::default();
    for (si, &scale) in crate::network::SCALES.iter().enumerate() {
        let mut per_item = Vec::with_capacity(labels.len());
        for l in labels {
            let (h, w) = l.dim();
            let (sh, sw) = (h / scale, w / scale);
            let mut enc = ArrayD::from_elem(IxDyn(&[c, sh, sw]), T::zero());
            for y in 0..sh {
                for x in 0..sw {
                    let v = l[[y * scale, x * scale]] as usize;
                    if v >= c {
                        return Err(Error::Encode(format!(
                            "label value {v} out of range for format {}",
                            format.name()
                        )));
                    }
                    enc[[v, y, x]] = T::one();
                }
            }
            per_item.push(enc.insert_axis(Axis(0)));
        }
        let views: Vec<_> = per_item.iter().map(|a| a.view()).collect();
        out[si] = Some(ndarray::concatenate(Axis(0), &views).expect("target stack"));
    }
    Ok(out.map(|o| o.unwrap()))
}

/// Loss for the items of one target format: per-scale softmax, polymorphic
/// reduction for the hierarchical formats (the multitask outputs are used
/// directly for airway/vessel), combined GDL+CE per scale, then
/// deep-supervision weighting. Also returns the per-scale values.
pub fn format_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &NetworkOutputs,
    item_indices: &[usize],
    format: TargetFormat,
    targets: &[ArrayD<T>; 5],
) -> Result<(NodeId, [NodeId; 5])> {
    if item_indices.is_empty() {
        return Err(Error::Contract("format loss over empty item set".into()));
    }
    let logits: &[NodeId; 5] = match format {
        TargetFormat::Airway => &outputs.airway,
        TargetFormat::Vessel => &outputs.vessel,
        _ => &outputs.poly,
    };
    let mut per_scale = Vec::with_capacity(5);
    for si in 0..5 {
        let rows = g.select_rows(logits[si], item_indices);
        let probs = g.softmax_channels(rows);
        let reduced = if let Some(groups) = format.reduction_groups() {
            g.channel_group_sum(probs, groups)
        } else {
            probs
        };
        per_scale.push(combined_node(g, reduced, &targets[si])?);
    }
    let dsl = dsl_node(g, &per_scale)?;
    Ok((dsl, [per_scale[0], per_scale[1], per_scale[2], per_scale[3], per_scale[4]]))
}

/// A batch grouped by format: item indices plus per-scale targets.
pub struct FormatGroup<T> {
    pub format: TargetFormat,
    pub indices: Vec<usize>,
    pub targets: [ArrayD<T>; 5],
}

/// Total loss: the mean of the per-format deep-supervised losses over the
/// formats present in the batch.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    outputs: &NetworkOutputs,
    groups: &[FormatGroup<T>],
) -> Result<(NodeId, LossBreakdown)> {
    if groups.is_empty() {
        return Err(Error::Contract("total loss over empty batch".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for gr in groups {
        if !seen.insert(gr.format) {
            return Err(Error::Contract(format!(
                "duplicate format group {}",
                gr.format.name()
            )));
        }
    }
    let mut format_nodes = Vec::new();
    let mut components = BTreeMap::new();
    let mut scale_sums = [0.0f64; 5];
    for gr in groups {
        let (dsl, scales) = format_loss_node(g, outputs, &gr.indices, gr.format, &gr.targets)?;
        format_nodes.push(dsl);
        components.insert(gr.format.name().to_string(), g.scalar_value(dsl).to_f());
        for (i, &s) in scales.iter().enumerate() {
            scale_sums[i] += g.scalar_value(s).to_f();
        }
    }
    let sum = g.add_n(&format_nodes);
    let total = g.affine(sum, T::from_f(1.0 / groups.len() as f64), T::zero());
    let breakdown = LossBreakdown {
        components,
        scales: scale_sums.map(|s| s / groups.len() as f64),
        total: g.scalar_value(total).to_f(),
    };
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// Value-level wrappers: one code path with the graph builders.
// ---------------------------------------------------------------------------

fn as_batch<T: Scalar>(a: ndarray::ArrayView3<T>) -> ArrayD<T> {
    a.to_owned().insert_axis(Axis(0)).into_dyn()
}

pub fn gdl<T: Scalar>(
    pred: ndarray::ArrayView3<T>,
    target: ndarray::ArrayView3<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(as_batch(pred));
    let node = gdl_node(&mut g, p, &as_batch(target))?;
    Ok(g.scalar_value(node))
}

pub fn cross_entropy<T: Scalar>(
    pred: ndarray::ArrayView3<T>,
    target: ndarray::ArrayView3<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(as_batch(pred));
    let node = ce_node(&mut g, p, &as_batch(target))?;
    Ok(g.scalar_value(node))
}

pub fn combined<T: Scalar>(
    pred: ndarray::ArrayView3<T>,
    target: ndarray::ArrayView3<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(as_batch(pred));
    let node = combined_node(&mut g, p, &as_batch(target))?;
    Ok(g.scalar_value(node))
}

pub fn dsl(scales: &[f64]) -> Result<f64> {
    if scales.len() != 5 {
        return Err(Error::Contract(format!(
            "deep supervision expects 5 per-scale losses, got {}",
            scales.len()
        )));
    }
    Ok(scales
        .iter()
        .zip(DSL_WEIGHTS.iter())
        .map(|(&l, &w)| l * w)
        .sum())
}
