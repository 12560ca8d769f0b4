//! Training orchestration: epoch plans, balanced batch assembly, the
//! loss/step loop, volumetric validation, best-checkpoint retention, and
//! silver-standard pretraining.

use crate::checkpoint;
use crate::engine::{adamw_step, decay_lr, AdamWConfig, Graph, OptimState};
use crate::error::{Error, Result};
use crate::hierarchy::TargetFormat;
use crate::inference::predict_volume;
use crate::loss::{total_loss_node, FormatGroup, LossBreakdown};
use crate::network::{Model, ModelConfig};
use crate::phantom::{self, Phantom};
use crate::pipeline::{
    augment, draw_rng, extract_slab, sample_epoch_formats, AugmentConfig, Catalog, Draw,
    NormVolume, Slab,
};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One training volume with whatever partial labels it carries.
#[derive(Clone, Debug)]
pub struct VolumeSource {
    pub id: String,
    pub ct: NormVolume,
    pub spacing: [f64; 3],
    pub labels: BTreeMap<TargetFormat, Array3<u8>>,
    /// Annotated slice indices per format; only these enter training plans.
    pub annotated: BTreeMap<TargetFormat, Vec<usize>>,
}

impl VolumeSource {
    /// Build a source from a phantom, exporting the given formats.
    pub fn from_phantom(ph: &Phantom, id: &str, formats: &[TargetFormat]) -> Result<Self> {
        let ct = NormVolume(
            ph.ct
                .mapv(|v| (v.clamp(crate::pipeline::HU_MIN, crate::pipeline::HU_MAX)
                    - crate::pipeline::HU_MIN)
                    / (crate::pipeline::HU_MAX - crate::pipeline::HU_MIN)),
        );
        let d = ph.ct.dim().0;
        let mut labels = BTreeMap::new();
        let mut annotated = BTreeMap::new();
        for &f in formats {
            let vol = phantom::as_format(ph, f)?;
            labels.insert(f, vol.labels);
            annotated.insert(f, (0..d).collect());
        }
        Ok(VolumeSource {
            id: id.to_string(),
            ct,
            spacing: ph.spacing,
            labels,
            annotated,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Gold,
    SilverPretrain,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Must be a multiple of the number of active formats.
    pub batch_size: usize,
    pub epochs: usize,
    /// Samples per format per epoch.
    pub quota: usize,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Formats trained on; the default is all five (gold mode).
    pub formats: Vec<TargetFormat>,
    pub mode: TrainMode,
    /// Initialization checkpoint (e.g. a silver-pretrained model).
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            epochs: 40,
            quota: 200,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
            formats: TargetFormat::ALL.to_vec(),
            mode: TrainMode::Gold,
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.formats.is_empty() {
            return Err(Error::Config("no target formats configured".into()));
        }
        if self.mode == TrainMode::Gold
            && (self.batch_size == 0 || self.batch_size % self.formats.len() != 0)
        {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of the {} active formats",
                self.batch_size,
                self.formats.len()
            )));
        }
        if self.augment.patch != self.model.patch {
            return Err(Error::Config(format!(
                "augment patch {} must equal model patch {}",
                self.augment.patch, self.model.patch
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    #[serde(flatten)]
    breakdown: &'a LossBreakdown,
}

#[derive(Serialize)]
struct ValLine {
    epoch: usize,
    val_loss: f64,
    best: bool,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn build_catalog(sources: &[VolumeSource], formats: &[TargetFormat]) -> Catalog {
    let mut catalog = Catalog::new();
    for &f in formats {
        let mut list = Vec::new();
        for (si, src) in sources.iter().enumerate() {
            if let Some(slices) = src.annotated.get(&f) {
                for &z in slices {
                    list.push((si, z));
                }
            }
        }
        if !list.is_empty() {
            catalog.insert(f, list);
        }
    }
    catalog
}

fn assemble_slabs(
    sources: &[VolumeSource],
    draws: &[Draw],
    base_index: usize,
    epoch_seed: u64,
    aug: &AugmentConfig,
) -> Result<Vec<Slab>> {
    draws
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let src = &sources[d.source];
            let intensity = extract_slab(&src.ct, d.slice)?;
            let labels = src.labels[&d.format]
                .index_axis(Axis(0), d.slice)
                .to_owned();
            let slab = Slab {
                intensity,
                labels,
                format: d.format,
                source: d.source,
                slice: d.slice,
            };
            let mut rng = draw_rng(epoch_seed, base_index + i);
            augment(&slab, aug, &mut rng)
        })
        .collect()
}

fn batch_input(slabs: &[Slab], patch: usize) -> ArrayD<f32> {
    let mut input = Array4::<f32>::zeros((slabs.len(), 3, patch, patch));
    for (i, s) in slabs.iter().enumerate() {
        input.index_axis_mut(Axis(0), i).assign(&s.intensity);
    }
    input.into_dyn()
}

fn batch_groups(slabs: &[Slab]) -> Result<Vec<FormatGroup<f32>>> {
    let mut by_format: BTreeMap<TargetFormat, Vec<usize>> = BTreeMap::new();
    for (i, s) in slabs.iter().enumerate() {
        by_format.entry(s.format).or_default().push(i);
    }
    let mut groups = Vec::new();
    for (format, indices) in by_format {
        let label_views: Vec<_> = indices.iter().map(|&i| slabs[i].labels.view()).collect();
        let targets = crate::loss::targets_per_scale::<f32>(&label_views, format)?;
        groups.push(FormatGroup {
            format,
            indices,
            targets,
        });
    }
    Ok(groups)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Volumetric validation loss: stacked full-volume inference, combined
/// GDL+CE at full resolution only, averaged over the formats present per
/// volume, then over volumes.
pub fn validate(model: &Model<f32>, volumes: &[VolumeSource]) -> Result<f64> {
    if volumes.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let mut total = 0.0;
    for src in volumes {
        let pred = predict_volume(&src.ct, model)?;
        let mut per_format = Vec::new();
        for (&format, labels) in &src.labels {
            let probs: &Array4<f32> = match format {
                TargetFormat::Airway => &pred.airway,
                TargetFormat::Vessel => &pred.vessel,
                _ => &pred.poly,
            };
            // [D, C, H, W] -> [1, C, D*H, W]
            let (d, c, h, w) = probs.dim();
            let flat = probs
                .view()
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((1, c, d * h, w))
                .unwrap();
            let reduced = if let Some(groups) = format.reduction_groups() {
                let mut g = Graph::<f32>::new();
                let node = g.constant(flat.into_dyn());
                let red = g.channel_group_sum(node, groups);
                g.value(red).clone()
            } else {
                flat.into_dyn()
            };
            // one-hot target volume, same flattening
            let flat_labels: Array2<u8> = labels
                .clone()
                .into_shape_with_order((d * h, w))
                .unwrap();
            let target = crate::hierarchy::encode_target::<f32>(flat_labels.view(), format)?
                .insert_axis(Axis(0))
                .into_dyn();
            let mut g = Graph::<f32>::new();
            let node = g.constant(reduced);
            let loss = crate::loss::combined_node(&mut g, node, &target)?;
            per_format.push(g.scalar_value(loss) as f64);
        }
        if per_format.is_empty() {
            return Err(Error::Config(format!(
                "validation volume {} carries no labels",
                src.id
            )));
        }
        total += per_format.iter().sum::<f64>() / per_format.len() as f64;
    }
    Ok(total / volumes.len() as f64)
}

fn dump_nan_diagnostics(out_dir: &Path, epoch: usize, step: usize, slabs: &[Slab]) {
    #[derive(Serialize)]
    struct Item {
        format: String,
        source: usize,
        slice: usize,
    }
    #[derive(Serialize)]
    struct Dump {
        epoch: usize,
        step: usize,
        items: Vec<Item>,
    }
    let dump = Dump {
        epoch,
        step,
        items: slabs
            .iter()
            .map(|s| Item {
                format: s.format.name().to_string(),
                source: s.source,
                slice: s.slice,
            })
            .collect(),
    };
    let _ = std::fs::write(
        out_dir.join("nan_dump.json"),
        serde_json::to_string_pretty(&dump).unwrap_or_default(),
    );
}

/// Gold-mode training (or silver pretraining, per `cfg.mode`). Returns the
/// model restored to the best-validation-loss parameters.
pub fn train(
    cfg: &TrainConfig,
    train_sources: &[VolumeSource],
    val_sources: &[VolumeSource],
    out_dir: &Path,
) -> Result<TrainOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    if cfg.mode == TrainMode::SilverPretrain {
        validate_silver_sources(train_sources)?;
    }
    let catalog = build_catalog(train_sources, &cfg.formats);
    for f in &cfg.formats {
        if !catalog.contains_key(f) {
            return Err(Error::Sampler(format!(
                "no annotated slices for format {}",
                f.name()
            )));
        }
    }

    let mut model = match &cfg.init_checkpoint {
        Some(path) => checkpoint::load(path, Some(&cfg.model), None)?.0,
        None => Model::<f32>::new(cfg.model.clone())?,
    };
    let mut optim = OptimState::<f32>::new(&model.param_shapes(), cfg.optimizer);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<(Vec<ArrayD<f32>>, Vec<ndarray::Array1<f32>>, Vec<ndarray::Array1<f32>>)> =
        None;

    for epoch in 0..cfg.epochs {
        let lr = decay_lr(&cfg.optimizer, epoch as u64);
        let eseed = epoch_seed(cfg.seed, epoch);
        let (plan, batch_size) = match cfg.mode {
            TrainMode::Gold => (
                sample_epoch_formats(&catalog, &cfg.formats, cfg.quota, eseed)?,
                cfg.batch_size,
            ),
            // silver pretraining: batch size 1 of one full annotated slice
            TrainMode::SilverPretrain => (
                sample_epoch_formats(
                    &catalog,
                    &[TargetFormat::Separation],
                    cfg.quota,
                    eseed,
                )?,
                1,
            ),
        };
        for (step, draws) in plan.draws.chunks(batch_size).enumerate() {
            let slabs = assemble_slabs(
                train_sources,
                draws,
                step * batch_size,
                eseed,
                &cfg.augment,
            )?;
            let input = batch_input(&slabs, cfg.model.patch);
            let groups = match cfg.mode {
                TrainMode::Gold => batch_groups(&slabs)?,
                TrainMode::SilverPretrain => silver_groups(&slabs, train_sources)?,
            };
            let mut g = Graph::new();
            let outputs = model.forward_train(&mut g, input)?;
            let (total, breakdown) = total_loss_node(&mut g, &outputs, &groups)?;
            if !breakdown.total.is_finite() {
                dump_nan_diagnostics(out_dir, epoch, step, &slabs);
                return Err(Error::Contract(format!(
                    "non-finite loss {} at epoch {epoch} step {step}; batch dumped",
                    breakdown.total
                )));
            }
            let grads = g.backward(total, model.params.len())?;
            let grad_arrays: Vec<ArrayD<f32>> = (0..model.params.len())
                .map(|i| grads.get(i, model.params[i].shape()))
                .collect();
            adamw_step(&mut optim, &mut model.params, &grad_arrays, lr)?;
            let line = LogLine {
                epoch,
                step,
                lr,
                breakdown: &breakdown,
            };
            serde_json::to_writer(&mut log, &line)?;
            log.write_all(b"\n")?;
        }

        let val_loss = validate(&model, val_sources)?;
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some((
                model.params.clone(),
                model.running_mean.clone(),
                model.running_var.clone(),
            ));
        }
        serde_json::to_writer(
            &mut log,
            &ValLine {
                epoch,
                val_loss,
                best: improved,
            },
        )?;
        log.write_all(b"\n")?;
    }
    log.flush()?;

    if let Some((params, rm, rv)) = best_params {
        model.params = params;
        model.running_mean = rm;
        model.running_var = rv;
    }
    let checkpoint_path = out_dir.join("best.ckpt");
    checkpoint::save(&checkpoint_path, &model, Some(&optim))?;
    Ok(TrainOutput {
        model,
        best_epoch,
        best_val_loss: best_val,
        checkpoint_path,
        log_path,
    })
}

/// Silver pretraining supervises all heads at once: the separation-format
/// target drives the polymorphic head while airway and vessel targets drive
/// the multitask heads, every step.
fn silver_groups(slabs: &[Slab], sources: &[VolumeSource]) -> Result<Vec<FormatGroup<f32>>> {
    let mut groups = Vec::new();
    for format in [
        TargetFormat::Separation,
        TargetFormat::Airway,
        TargetFormat::Vessel,
    ] {
        let mut label_slices = Vec::new();
        for s in slabs {
            let labels = sources[s.source]
                .labels
                .get(&format)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "silver source {} lacks {} labels",
                        s.source,
                        format.name()
                    ))
                })?
                .index_axis(Axis(0), s.slice)
                .to_owned();
            label_slices.push(labels);
        }
        let views: Vec<_> = label_slices.iter().map(|l| l.view()).collect();
        let targets = crate::loss::targets_per_scale::<f32>(&views, format)?;
        groups.push(FormatGroup {
            format,
            indices: (0..slabs.len()).collect(),
            targets,
        });
    }
    Ok(groups)
}

fn validate_silver_sources(sources: &[VolumeSource]) -> Result<()> {
    for src in sources {
        for f in [
            TargetFormat::Separation,
            TargetFormat::Airway,
            TargetFormat::Vessel,
        ] {
            let labels = src.labels.get(&f).ok_or_else(|| {
                Error::Config(format!(
                    "silver source {} lacks {} labels",
                    src.id,
                    f.name()
                ))
            })?;
            if !labels.iter().any(|&v| v > 0) {
                return Err(Error::Config(format!(
                    "silver source {} has an empty {} structure",
                    src.id,
                    f.name()
                )));
            }
        }
        // the separation labels must cover all four hierarchy classes
        let sep = &src.labels[&TargetFormat::Separation];
        for class in 1..=3u8 {
            if !sep.iter().any(|&v| v == class) {
                return Err(Error::Config(format!(
                    "silver source {} lacks separation class {class}",
                    src.id
                )));
            }
        }
    }
    Ok(())
}

/// Convenience wrapper matching the silver-pretraining contract: train on
/// fully annotated phantoms and return the checkpoint path for gold-mode
/// initialization.
pub fn pretrain_silver(
    cfg: &TrainConfig,
    phantoms: &[VolumeSource],
    val_sources: &[VolumeSource],
    out_dir: &Path,
) -> Result<TrainOutput> {
    let mut cfg = cfg.clone();
    cfg.mode = TrainMode::SilverPretrain;
    train(&cfg, phantoms, val_sources, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};

    fn tiny_phantom_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [32, 32, 32],
            seed,
            lesion_count: (2, 2),
            lesion_radius: (4.0, 6.0),
            ..PhantomSpec::default()
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 5,
            epochs: 2,
            quota: 4,
            model: ModelConfig {
                base_width: 4,
                decoder_width: 8,
                patch: 32,
                seed: 3,
            },
            augment: AugmentConfig::disabled(32),
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn sources(n: usize, formats: &[TargetFormat]) -> Vec<VolumeSource> {
        (0..n)
            .map(|i| {
                let ph = generate(&tiny_phantom_spec(100 + i as u64)).unwrap();
                VolumeSource::from_phantom(&ph, &format!("ph{i}"), formats).unwrap()
            })
            .collect()
    }

    #[test]
    fn train_runs_and_is_deterministic() {
        let srcs = sources(2, &TargetFormat::ALL);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();
        let out1 = train(&cfg, &srcs, &srcs[..1], dir1.path()).unwrap();
        let out2 = train(&cfg, &srcs, &srcs[..1], dir2.path()).unwrap();
        let h1 = checkpoint::file_hash(&out1.checkpoint_path).unwrap();
        let h2 = checkpoint::file_hash(&out2.checkpoint_path).unwrap();
        assert_eq!(h1, h2, "checkpoints must be hash-identical");
        let l1 = std::fs::read(&out1.log_path).unwrap();
        let l2 = std::fs::read(&out2.log_path).unwrap();
        assert_eq!(l1, l2, "logs must be identical");
    }

    #[test]
    fn gold_mode_requires_all_formats() {
        let srcs = sources(1, &[TargetFormat::Lung]);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_train_cfg();
        let err = train(&cfg, &srcs, &srcs[..1], dir.path()).unwrap_err();
        assert!(err.to_string().contains("format"));
    }

    #[test]
    fn batch_size_must_be_multiple_of_formats() {
        let mut cfg = tiny_train_cfg();
        cfg.batch_size = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn silver_pretrain_then_gold_init() {
        let srcs = sources(2, &TargetFormat::ALL);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_train_cfg();
        cfg.quota = 6;
        let pre = pretrain_silver(&cfg, &srcs, &srcs[..1], dir.path()).unwrap();
        // gold training loads the pretrain checkpoint
        let dir2 = tempfile::tempdir().unwrap();
        let mut gold = tiny_train_cfg();
        gold.init_checkpoint = Some(pre.checkpoint_path.clone());
        let out = train(&gold, &srcs, &srcs[..1], dir2.path()).unwrap();
        assert!(out.best_val_loss.is_finite());
    }

    #[test]
    fn validation_volume_without_labels_rejected() {
        let mut srcs = sources(1, &TargetFormat::ALL);
        srcs[0].labels.clear();
        let model = Model::<f32>::new(tiny_train_cfg().model).unwrap();
        assert!(validate(&model, &srcs).is_err());
    }

    #[test]
    fn validation_order_independent() {
        let srcs = sources(3, &TargetFormat::ALL);
        let model = Model::<f32>::new(tiny_train_cfg().model).unwrap();
        let a = validate(&model, &srcs).unwrap();
        let rev: Vec<VolumeSource> = srcs.iter().rev().cloned().collect();
        let b = validate(&model, &rev).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
