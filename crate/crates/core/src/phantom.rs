//! Synthetic CT volumes with complete six-structure ground truth: two
//! ellipsoidal lungs, blob lesions with GGO shells and consolidation cores,
//! and recursive binary tube trees for the airway and pulmonary artery.
//! Phantoms substitute for clinical scans and export to any partial target
//! format.

use crate::error::{Error, Result};
use crate::hierarchy::{HierLabelVolume, TargetFormat};
use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Truth labels of the fully annotated volume.
pub const TRUTH_BG: u8 = 0;
pub const TRUTH_HEALTHY: u8 = 1;
pub const TRUTH_GGO: u8 = 2;
pub const TRUTH_CONSOLIDATION: u8 = 3;
pub const TRUTH_VESSEL: u8 = 4;
pub const TRUTH_AIRWAY: u8 = 5;

/// HU threshold separating GGO from consolidation inside lesions. Exactly
/// -300 goes to GGO.
pub const SILVER_HU_THRESHOLD: f32 = -300.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub lesion_count: (usize, usize),
    pub lesion_radius: (f64, f64),
    /// Recursion depth of the binary tube trees; depth d yields 2^d - 1
    /// segments.
    pub tree_depth: usize,
    pub branching: usize,
    pub hu_air: f64,
    pub hu_body: f64,
    pub hu_lung: f64,
    pub hu_ggo: f64,
    pub hu_consolidation: f64,
    pub hu_airway: f64,
    pub hu_vessel: f64,
    pub noise_sigma: f64,
    pub airway_radius: f64,
    pub vessel_radius: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0, 1.0, 1.0],
            lesion_count: (2, 4),
            lesion_radius: (4.0, 8.0),
            tree_depth: 3,
            branching: 2,
            hu_air: -1000.0,
            hu_body: 40.0,
            hu_lung: -800.0,
            hu_ggo: -500.0,
            hu_consolidation: -100.0,
            hu_airway: -1000.0,
            hu_vessel: 100.0,
            noise_sigma: 20.0,
            airway_radius: 2.4,
            vessel_radius: 2.8,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 32) {
            return Err(Error::Config(format!(
                "dims {:?} must be >= 32 per axis for tree generation",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if !(self.branching == 1 || self.branching == 2) {
            return Err(Error::Config(format!(
                "branching factor {} must be 1 or 2",
                self.branching
            )));
        }
        if self.lesion_count.0 > self.lesion_count.1
            || self.lesion_radius.0 > self.lesion_radius.1
        {
            return Err(Error::Config("invalid lesion ranges".into()));
        }
        if self.tree_depth == 0 || self.tree_depth > 6 {
            return Err(Error::Config("tree depth must be in 1..=6".into()));
        }
        Ok(())
    }
}

/// One straight tube of a generated tree, in voxel coordinates (z, y, x).
#[derive(Clone, Debug, Serialize)]
pub struct TubeSegment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub ct: Array3<f32>,
    pub truth: Array3<u8>,
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Construction log of the tube trees.
    pub airway_segments: Vec<TubeSegment>,
    pub vessel_segments: Vec<TubeSegment>,
    /// The two lung ellipsoids (parenchyma region before carving).
    pub lung_mask: Array3<bool>,
}

impl Phantom {
    pub fn structure_mask(&self, label: u8) -> Array3<bool> {
        self.truth.mapv(|v| v == label)
    }

    /// Lung region in the format sense: healthy tissue plus lesions.
    pub fn lung_format_mask(&self) -> Array3<bool> {
        self.truth
            .mapv(|v| v == TRUTH_HEALTHY || v == TRUTH_GGO || v == TRUTH_CONSOLIDATION)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }

    fn fill(&self, f: &mut impl FnMut(usize, usize, usize), dims: [usize; 3]) {
        let lo = |a: usize| ((self.center[a] - self.radii[a]).floor().max(0.0)) as usize;
        let hi = |a: usize| {
            ((self.center[a] + self.radii[a]).ceil() as usize + 1).min(dims[a])
        };
        for z in lo(0)..hi(0) {
            for y in lo(1)..hi(1) {
                for x in lo(2)..hi(2) {
                    if self.contains(z as f64, y as f64, x as f64) {
                        f(z, y, x);
                    }
                }
            }
        }
    }
}

fn norm3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotate `dir` by `polar` radians away from itself, around an axis chosen
/// by `azimuth` within the plane orthogonal to `dir`.
fn tilt(dir: [f64; 3], polar: f64, azimuth: f64) -> [f64; 3] {
    // build an orthonormal frame (dir, u, v)
    let helper = if dir[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = norm3(cross3(dir, helper));
    let v = norm3(cross3(dir, u));
    let (sp, cp) = polar.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    norm3([
        dir[0] * cp + (u[0] * ca + v[0] * sa) * sp,
        dir[1] * cp + (u[1] * ca + v[1] * sa) * sp,
        dir[2] * cp + (u[2] * ca + v[2] * sa) * sp,
    ])
}

#[allow(clippy::too_many_arguments)]
fn grow_tree(
    rng: &mut ChaCha8Rng,
    segments: &mut Vec<TubeSegment>,
    start: [f64; 3],
    dir: [f64; 3],
    len: f64,
    radius: f64,
    depth: usize,
    max_depth: usize,
    branching: usize,
) {
    let end = [
        start[0] + dir[0] * len,
        start[1] + dir[1] * len,
        start[2] + dir[2] * len,
    ];
    segments.push(TubeSegment {
        start,
        end,
        radius,
        depth,
    });
    if depth + 1 >= max_depth {
        return;
    }
    let azimuth0 = rng.random_range(0.0..std::f64::consts::TAU);
    for k in 0..branching {
        let polar = rng.random_range(0.45..0.75); // ~26..43 degrees
        let azimuth = azimuth0 + k as f64 * std::f64::consts::PI;
        let child_dir = tilt(dir, polar, azimuth);
        grow_tree(
            rng,
            segments,
            end,
            child_dir,
            len * 0.78,
            radius * 0.78,
            depth + 1,
            max_depth,
            branching,
        );
    }
}

fn rasterize_tube(seg: &TubeSegment, dims: [usize; 3], mut put: impl FnMut(usize, usize, usize)) {
    let r = seg.radius;
    let lo = |a: usize| {
        (seg.start[a].min(seg.end[a]) - r)
            .floor()
            .max(0.0) as usize
    };
    let hi = |a: usize| {
        ((seg.start[a].max(seg.end[a]) + r).ceil() as usize + 1).min(dims[a])
    };
    let d = [
        seg.end[0] - seg.start[0],
        seg.end[1] - seg.start[1],
        seg.end[2] - seg.start[2],
    ];
    let len2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    for z in lo(0)..hi(0) {
        for y in lo(1)..hi(1) {
            for x in lo(2)..hi(2) {
                let p = [z as f64, y as f64, x as f64];
                let w = [
                    p[0] - seg.start[0],
                    p[1] - seg.start[1],
                    p[2] - seg.start[2],
                ];
                let t = if len2 > 0.0 {
                    ((w[0] * d[0] + w[1] * d[1] + w[2] * d[2]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let q = [
                    seg.start[0] + t * d[0] - p[0],
                    seg.start[1] + t * d[1] - p[1],
                    seg.start[2] + t * d[2] - p[2],
                ];
                let dist2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2];
                if dist2 <= r * r {
                    put(z, y, x);
                }
            }
        }
    }
}

/// Generate a phantom. Identical spec (including seed) yields a bit-exact
/// volume.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let dims = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ct = Array3::<f32>::from_elem((d, h, w), spec.hu_air as f32);
    let mut lung_mask = Array3::<bool>::from_elem((d, h, w), false);
    let mut lesion_mask = Array3::<bool>::from_elem((d, h, w), false);
    let mut vessel_mask = Array3::<bool>::from_elem((d, h, w), false);
    let mut airway_mask = Array3::<bool>::from_elem((d, h, w), false);
    let mut body_mask = Array3::<bool>::from_elem((d, h, w), false);

    let (df, hf, wf) = (d as f64, h as f64, w as f64);
    let body = Ellipsoid {
        center: [df * 0.5, hf * 0.5, wf * 0.5],
        radii: [df * 0.49, hf * 0.46, wf * 0.48],
    };
    body.fill(
        &mut |z, y, x| {
            ct[[z, y, x]] = spec.hu_body as f32;
            body_mask[[z, y, x]] = true;
        },
        dims,
    );

    let lungs = [
        Ellipsoid {
            center: [df * 0.52, hf * 0.52, wf * 0.30],
            radii: [df * 0.38, hf * 0.33, wf * 0.17],
        },
        Ellipsoid {
            center: [df * 0.52, hf * 0.52, wf * 0.70],
            radii: [df * 0.38, hf * 0.33, wf * 0.17],
        },
    ];
    for lung in &lungs {
        lung.fill(
            &mut |z, y, x| {
                ct[[z, y, x]] = spec.hu_lung as f32;
                lung_mask[[z, y, x]] = true;
            },
            dims,
        );
    }

    // blob lesions: GGO shell with a consolidation core
    let n_lesions = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    for _ in 0..n_lesions {
        let lung = &lungs[rng.random_range(0..2)];
        let r = rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1);
        // keep the center well inside the lung so cores stay in parenchyma
        let mut center = lung.center;
        for a in 0..3 {
            let margin = (lung.radii[a] - r * 0.6).max(0.0);
            center[a] = lung.center[a] + rng.random_range(-1.0..1.0) * margin * 0.8;
        }
        let jitter = [
            rng.random_range(0.75..1.25),
            rng.random_range(0.75..1.25),
            rng.random_range(0.75..1.25),
        ];
        let blob = Ellipsoid {
            center,
            radii: [r * jitter[0], r * jitter[1], r * jitter[2]],
        };
        let core = Ellipsoid {
            center,
            radii: [
                r * jitter[0] * 0.55,
                r * jitter[1] * 0.55,
                r * jitter[2] * 0.55,
            ],
        };
        blob.fill(
            &mut |z, y, x| {
                if lung_mask[[z, y, x]] {
                    ct[[z, y, x]] = spec.hu_ggo as f32;
                    lesion_mask[[z, y, x]] = true;
                }
            },
            dims,
        );
        core.fill(
            &mut |z, y, x| {
                if lung_mask[[z, y, x]] {
                    ct[[z, y, x]] = spec.hu_consolidation as f32;
                }
            },
            dims,
        );
    }

    // vessel tree rooted at the mediastinum, descending between the lungs
    let mut vessel_segments = Vec::new();
    grow_tree(
        &mut rng,
        &mut vessel_segments,
        [df * 0.22, hf * 0.5, wf * 0.5],
        norm3([1.0, 0.05, 0.0]),
        df * 0.2,
        spec.vessel_radius,
        0,
        spec.tree_depth,
        spec.branching,
    );
    for seg in &vessel_segments {
        rasterize_tube(seg, dims, |z, y, x| {
            if body_mask[[z, y, x]] {
                ct[[z, y, x]] = spec.hu_vessel as f32;
                vessel_mask[[z, y, x]] = true;
            }
        });
    }

    // airway tree from the trachea down; drawn last so the lumen wins ties
    let mut airway_segments = Vec::new();
    grow_tree(
        &mut rng,
        &mut airway_segments,
        [df * 0.10, hf * 0.42, wf * 0.5],
        norm3([1.0, 0.0, 0.0]),
        df * 0.2,
        spec.airway_radius,
        0,
        spec.tree_depth,
        spec.branching,
    );
    for seg in &airway_segments {
        rasterize_tube(seg, dims, |z, y, x| {
            if body_mask[[z, y, x]] {
                ct[[z, y, x]] = spec.hu_airway as f32;
                airway_mask[[z, y, x]] = true;
                vessel_mask[[z, y, x]] = false;
            }
        });
    }

    // additive Gaussian noise over the whole grid
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma).unwrap();
        for v in ct.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    // truth: lesion classes follow the silver rule on the final (noisy) CT
    let mut truth = Array3::<u8>::zeros((d, h, w));
    for ((z, y, x), t) in truth.indexed_iter_mut() {
        let i = [z, y, x];
        if airway_mask[i] {
            *t = TRUTH_AIRWAY;
        } else if vessel_mask[i] {
            *t = TRUTH_VESSEL;
        } else if lesion_mask[i] {
            *t = if ct[i] <= SILVER_HU_THRESHOLD {
                TRUTH_GGO
            } else {
                TRUTH_CONSOLIDATION
            };
        } else if lung_mask[i] {
            *t = TRUTH_HEALTHY;
        }
    }

    Ok(Phantom {
        ct,
        truth,
        spacing: spec.spacing,
        seed: spec.seed,
        airway_segments,
        vessel_segments,
        lung_mask,
    })
}

/// Export the complete truth as one partial target format.
pub fn as_format(ph: &Phantom, format: TargetFormat) -> Result<HierLabelVolume> {
    let labels = ph.truth.mapv(|t| match format {
        TargetFormat::Lung => u8::from(matches!(t, 1..=3)),
        TargetFormat::Lesion => match t {
            1 => 1,
            2 | 3 => 2,
            _ => 0,
        },
        TargetFormat::Separation => match t {
            1..=3 => t,
            _ => 0,
        },
        TargetFormat::Airway => u8::from(t == TRUTH_AIRWAY),
        TargetFormat::Vessel => u8::from(t == TRUTH_VESSEL),
    });
    HierLabelVolume::new(labels, format, ph.spacing)
}

/// Split a lesion mask into GGO and consolidation by the -300 HU rule;
/// voxels at exactly the threshold go to GGO.
pub fn silver_labels(
    ct: ArrayView3<f32>,
    lesion_mask: ArrayView3<bool>,
) -> Result<(Array3<bool>, Array3<bool>)> {
    if ct.dim() != lesion_mask.dim() {
        return Err(Error::Shape(format!(
            "ct {:?} vs mask {:?}",
            ct.dim(),
            lesion_mask.dim()
        )));
    }
    let mut ggo = Array3::from_elem(ct.dim(), false);
    let mut cons = Array3::from_elem(ct.dim(), false);
    for ((z, y, x), &m) in lesion_mask.indexed_iter() {
        if m {
            if ct[[z, y, x]] <= SILVER_HU_THRESHOLD {
                ggo[[z, y, x]] = true;
            } else {
                cons[[z, y, x]] = true;
            }
        }
    }
    Ok((ggo, cons))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{component_count, largest_cc, skeletonize};

    fn quick_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_generation() {
        let a = generate(&quick_spec(42)).unwrap();
        let b = generate(&quick_spec(42)).unwrap();
        assert!(a
            .ct
            .iter()
            .zip(b.ct.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn lesion_count_zero_omits_lesion_classes() {
        let spec = PhantomSpec {
            lesion_count: (0, 0),
            seed: 3,
            ..PhantomSpec::default()
        };
        let ph = generate(&spec).unwrap();
        assert!(!ph.truth.iter().any(|&t| t == TRUTH_GGO || t == TRUTH_CONSOLIDATION));
        for t in [TRUTH_HEALTHY, TRUTH_VESSEL, TRUTH_AIRWAY] {
            assert!(ph.truth.iter().any(|&v| v == t), "missing structure {t}");
        }
    }

    #[test]
    fn default_phantom_has_all_six_structures() {
        let ph = generate(&quick_spec(1)).unwrap();
        for t in 0..=5u8 {
            assert!(ph.truth.iter().any(|&v| v == t), "missing label {t}");
        }
    }

    #[test]
    fn ggo_consolidation_respect_silver_rule() {
        let ph = generate(&quick_spec(7)).unwrap();
        for ((z, y, x), &t) in ph.truth.indexed_iter() {
            if t == TRUTH_GGO {
                assert!(ph.ct[[z, y, x]] <= SILVER_HU_THRESHOLD);
            }
            if t == TRUTH_CONSOLIDATION {
                assert!(ph.ct[[z, y, x]] > SILVER_HU_THRESHOLD);
            }
        }
    }

    #[test]
    fn trees_are_single_components() {
        let ph = generate(&quick_spec(11)).unwrap();
        let airway = ph.structure_mask(TRUTH_AIRWAY);
        assert!(airway.iter().any(|&v| v));
        assert_eq!(component_count(airway.view()), 1, "airway fragmented");
        let lcc = largest_cc(airway.view());
        assert_eq!(lcc, airway);
        let vessel = ph.structure_mask(TRUTH_VESSEL);
        assert_eq!(component_count(vessel.view()), 1, "vessel fragmented");
    }

    #[test]
    fn depth_three_airway_has_seven_segments_and_branches() {
        for seed in [0u64, 5, 9] {
            let ph = generate(&quick_spec(seed)).unwrap();
            assert_eq!(ph.airway_segments.len(), 7, "construction log");
            let airway = ph.structure_mask(TRUTH_AIRWAY);
            let g = skeletonize(airway.view(), ph.spacing).unwrap();
            assert_eq!(
                g.branch_count(),
                7,
                "seed {seed}: skeleton branches {} != 7",
                g.branch_count()
            );
        }
    }

    #[test]
    fn as_format_mappings() {
        let ph = generate(&quick_spec(13)).unwrap();
        let lung = as_format(&ph, TargetFormat::Lung).unwrap();
        let lesion = as_format(&ph, TargetFormat::Lesion).unwrap();
        let sep = as_format(&ph, TargetFormat::Separation).unwrap();
        let airway = as_format(&ph, TargetFormat::Airway).unwrap();
        for ((z, y, x), &t) in ph.truth.indexed_iter() {
            let i = [z, y, x];
            match t {
                3 => {
                    assert_eq!(lesion.labels[i], 2);
                    assert_eq!(sep.labels[i], 3);
                    assert_eq!(lung.labels[i], 1);
                }
                5 => {
                    // airway lumen is not lung parenchyma
                    assert_eq!(lung.labels[i], 0);
                    assert_eq!(airway.labels[i], 1);
                }
                2 => assert_eq!(sep.labels[i], 2),
                _ => {}
            }
        }
    }

    #[test]
    fn lung_format_equals_union_of_separation_classes() {
        let ph = generate(&quick_spec(17)).unwrap();
        let lung = as_format(&ph, TargetFormat::Lung).unwrap();
        let sep = as_format(&ph, TargetFormat::Separation).unwrap();
        for (l, s) in lung.labels.iter().zip(sep.labels.iter()) {
            assert_eq!(*l == 1, *s >= 1);
        }
    }

    #[test]
    fn silver_labels_partition_lesion_mask() {
        let ph = generate(&quick_spec(19)).unwrap();
        let lesion = ph
            .truth
            .mapv(|t| t == TRUTH_GGO || t == TRUTH_CONSOLIDATION);
        let (ggo, cons) = silver_labels(ph.ct.view(), lesion.view()).unwrap();
        for ((g, c), m) in ggo.iter().zip(cons.iter()).zip(lesion.iter()) {
            assert_eq!(*g || *c, *m);
            assert!(!(*g && *c));
        }
        // outside the mask, nothing
        assert_eq!(
            ggo.iter().filter(|&&v| v).count() + cons.iter().filter(|&&v| v).count(),
            lesion.iter().filter(|&&v| v).count()
        );
    }

    #[test]
    fn silver_threshold_sides() {
        let mut ct = Array3::<f32>::zeros((1, 1, 3));
        ct[[0, 0, 0]] = -500.0;
        ct[[0, 0, 1]] = -100.0;
        ct[[0, 0, 2]] = -500.0;
        let mut mask = Array3::from_elem((1, 1, 3), true);
        mask[[0, 0, 2]] = false;
        let (ggo, cons) = silver_labels(ct.view(), mask.view()).unwrap();
        assert!(ggo[[0, 0, 0]] && !cons[[0, 0, 0]]);
        assert!(cons[[0, 0, 1]] && !ggo[[0, 0, 1]]);
        assert!(!ggo[[0, 0, 2]] && !cons[[0, 0, 2]]);
    }

    #[test]
    fn spec_validation() {
        let mut spec = PhantomSpec::default();
        spec.dims = [16, 64, 64];
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.branching = 3;
        assert!(spec.validate().is_err());
    }
}
