//! Topology-preserving 3D thinning, branch decomposition, and the tubular
//! tree metrics TD (tree length detected) and BD (branch detected).
//!
//! The thinning peels directional border voxels that are simple points
//! (deletion does not change local topology, checked with 26-connectivity
//! for foreground and 6-connectivity for background) and are not curve
//! endpoints. Candidates from each sweep are re-checked sequentially before
//! deletion so parallel-looking peels stay topology safe.

use crate::error::{Error, Result};
use ndarray::{Array3, ArrayView3};

/// Default fraction of a branch's skeleton voxels that must lie inside the
/// prediction for the branch to count as detected.
pub const DEFAULT_BRANCH_FRACTION: f64 = 0.8;

/// Dead-end chains of at most this many voxels hanging off a junction are
/// treated as thinning artifacts and pruned.
const SPUR_LEN: usize = 2;

#[derive(Clone, Debug)]
pub struct SkeletonBranch {
    /// Ordered voxel chain, (z, y, x).
    pub voxels: Vec<[usize; 3]>,
    /// Chain length in mm, including the step onto each adjacent junction.
    pub length_mm: f64,
}

#[derive(Clone, Debug)]
pub struct SkeletonGraph {
    pub branches: Vec<SkeletonBranch>,
    /// Junction voxels (degree >= 3), grouped into 26-connected clusters.
    pub junctions: Vec<Vec<[usize; 3]>>,
    /// Every skeleton voxel, including junctions.
    pub voxels: Vec<[usize; 3]>,
    pub total_length_mm: f64,
    pub dims: (usize, usize, usize),
}

impl SkeletonGraph {
    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn as_mask(&self) -> Array3<bool> {
        let mut m = Array3::from_elem(self.dims, false);
        for &v in &self.voxels {
            m[v] = true;
        }
        m
    }
}

#[inline]
fn block_index(dz: i64, dy: i64, dx: i64) -> usize {
    ((dz + 1) * 9 + (dy + 1) * 3 + (dx + 1)) as usize
}

/// Collect the 3x3x3 neighborhood as a flat occupancy block (center at 13).
fn neighborhood(mask: &Array3<bool>, z: usize, y: usize, x: usize) -> [bool; 27] {
    let dims = mask.dim();
    let mut block = [false; 27];
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nz = z as i64 + dz;
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                let occupied = nz >= 0
                    && ny >= 0
                    && nx >= 0
                    && nz < dims.0 as i64
                    && ny < dims.1 as i64
                    && nx < dims.2 as i64
                    && mask[[nz as usize, ny as usize, nx as usize]];
                block[block_index(dz, dy, dx)] = occupied;
            }
        }
    }
    block
}

fn fg_neighbor_count(block: &[bool; 27]) -> usize {
    block
        .iter()
        .enumerate()
        .filter(|&(i, &b)| i != 13 && b)
        .count()
}

/// Simple-point test: deleting the center must leave exactly one 26-connected
/// foreground component in the neighborhood and exactly one 6-connected
/// background component (within the 18-neighborhood) touching a face of the
/// center.
fn is_simple(block: &[bool; 27]) -> bool {
    // Condition 1: foreground in N26 forms one 26-connected component.
    let mut visited = [false; 27];
    let mut fg_total = 0usize;
    let mut seed = usize::MAX;
    for i in 0..27 {
        if i != 13 && block[i] {
            fg_total += 1;
            seed = i;
        }
    }
    if fg_total == 0 {
        return false; // isolated voxel: not deletable
    }
    let mut stack = [0usize; 27];
    let mut sp = 0;
    stack[sp] = seed;
    sp += 1;
    visited[seed] = true;
    let mut reached = 0usize;
    while sp > 0 {
        sp -= 1;
        let cur = stack[sp];
        reached += 1;
        let cz = (cur / 9) as i64 - 1;
        let cy = ((cur / 3) % 3) as i64 - 1;
        let cx = (cur % 3) as i64 - 1;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dz == 0 && dy == 0 && dx == 0 {
                        continue;
                    }
                    let nz = cz + dz;
                    let ny = cy + dy;
                    let nx = cx + dx;
                    if nz.abs() > 1 || ny.abs() > 1 || nx.abs() > 1 {
                        continue;
                    }
                    let ni = block_index(nz, ny, nx);
                    if ni == 13 || visited[ni] || !block[ni] {
                        continue;
                    }
                    visited[ni] = true;
                    stack[sp] = ni;
                    sp += 1;
                }
            }
        }
    }
    if reached != fg_total {
        return false;
    }

    // Condition 2: background 6-components within the 18-neighborhood that
    // touch a face of the center must number exactly one.
    let in_n18 = |dz: i64, dy: i64, dx: i64| dz.abs() + dy.abs() + dx.abs() <= 2;
    let faces: [[i64; 3]; 6] = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    let mut bg_visited = [false; 27];
    let mut bg_components = 0usize;
    for f in faces {
        let fi = block_index(f[0], f[1], f[2]);
        if block[fi] || bg_visited[fi] {
            continue;
        }
        bg_components += 1;
        if bg_components > 1 {
            return false;
        }
        // flood this background component through 6-adjacency inside N18
        let mut stack = [0usize; 27];
        let mut sp = 0;
        stack[sp] = fi;
        sp += 1;
        bg_visited[fi] = true;
        while sp > 0 {
            sp -= 1;
            let cur = stack[sp];
            let cz = (cur / 9) as i64 - 1;
            let cy = ((cur / 3) % 3) as i64 - 1;
            let cx = (cur % 3) as i64 - 1;
            for f2 in faces {
                let nz = cz + f2[0];
                let ny = cy + f2[1];
                let nx = cx + f2[2];
                if nz.abs() > 1 || ny.abs() > 1 || nx.abs() > 1 {
                    continue;
                }
                if !in_n18(nz, ny, nx) || (nz == 0 && ny == 0 && nx == 0) {
                    continue;
                }
                let ni = block_index(nz, ny, nx);
                if bg_visited[ni] || block[ni] {
                    continue;
                }
                bg_visited[ni] = true;
                stack[sp] = ni;
                sp += 1;
            }
        }
    }
    bg_components == 1
}

/// Thin a binary mask to a one-voxel-wide medial curve.
pub fn thin(mask: ArrayView3<bool>) -> Array3<bool> {
    let mut work = mask.to_owned();
    let dims = work.dim();
    let directions: [[i64; 3]; 6] = [
        [-1, 0, 0],
        [1, 0, 0],
        [0, -1, 0],
        [0, 1, 0],
        [0, 0, -1],
        [0, 0, 1],
    ];
    let mut candidates: Vec<[usize; 3]> = Vec::new();
    loop {
        let mut changed = false;
        for dir in directions {
            candidates.clear();
            for z in 0..dims.0 {
                for y in 0..dims.1 {
                    for x in 0..dims.2 {
                        if !work[[z, y, x]] {
                            continue;
                        }
                        let bz = z as i64 + dir[0];
                        let by = y as i64 + dir[1];
                        let bx = x as i64 + dir[2];
                        let border = bz < 0
                            || by < 0
                            || bx < 0
                            || bz >= dims.0 as i64
                            || by >= dims.1 as i64
                            || bx >= dims.2 as i64
                            || !work[[bz as usize, by as usize, bx as usize]];
                        if !border {
                            continue;
                        }
                        let block = neighborhood(&work, z, y, x);
                        if fg_neighbor_count(&block) == 1 {
                            continue; // curve endpoint, keep
                        }
                        if is_simple(&block) {
                            candidates.push([z, y, x]);
                        }
                    }
                }
            }
            // sequential re-check: earlier deletions may invalidate later ones
            for &[z, y, x] in &candidates {
                let block = neighborhood(&work, z, y, x);
                if fg_neighbor_count(&block) == 1 {
                    continue;
                }
                if is_simple(&block) {
                    work[[z, y, x]] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    work
}

fn step_len(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let d0 = (a[0] as f64 - b[0] as f64) * spacing[0];
    let d1 = (a[1] as f64 - b[1] as f64) * spacing[1];
    let d2 = (a[2] as f64 - b[2] as f64) * spacing[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

fn neighbors_26(v: [usize; 3], dims: (usize, usize, usize)) -> impl Iterator<Item = [usize; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if dz == 0 && dy == 0 && dx == 0 {
                    continue;
                }
                let nz = v[0] as i64 + dz;
                let ny = v[1] as i64 + dy;
                let nx = v[2] as i64 + dx;
                if nz >= 0
                    && ny >= 0
                    && nx >= 0
                    && nz < dims.0 as i64
                    && ny < dims.1 as i64
                    && nx < dims.2 as i64
                {
                    out.push([nz as usize, ny as usize, nx as usize]);
                }
            }
        }
    }
    out.into_iter()
}

fn skeleton_degree(skel: &Array3<bool>, v: [usize; 3]) -> usize {
    neighbors_26(v, skel.dim()).filter(|&n| skel[n]).count()
}

/// Decompose a thinned skeleton into branches split at degree->=3 nodes.
/// Short dead-end chains hanging off junctions (<= SPUR_LEN voxels) are
/// pruned before decomposition; pruning repeats until stable.
fn decompose(mut skel: Array3<bool>, spacing: [f64; 3]) -> SkeletonGraph {
    let dims = skel.dim();
    loop {
        let (branches, _junction_clusters) = split_branches(&skel, spacing);
        let mut pruned_any = false;
        for b in &branches {
            if b.touches_junction && b.free_end && b.voxels.len() <= SPUR_LEN {
                for &v in &b.voxels {
                    skel[v] = false;
                }
                pruned_any = true;
            }
        }
        if !pruned_any {
            break;
        }
    }
    let (branches, junctions) = split_branches(&skel, spacing);
    let mut voxels = Vec::new();
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if skel[[z, y, x]] {
                    voxels.push([z, y, x]);
                }
            }
        }
    }
    let out_branches: Vec<SkeletonBranch> = branches
        .into_iter()
        .map(|b| SkeletonBranch {
            voxels: b.voxels,
            length_mm: b.length_mm,
        })
        .collect();
    let total = out_branches.iter().map(|b| b.length_mm).sum();
    SkeletonGraph {
        branches: out_branches,
        junctions,
        voxels,
        total_length_mm: total,
        dims,
    }
}

struct RawBranch {
    voxels: Vec<[usize; 3]>,
    length_mm: f64,
    touches_junction: bool,
    free_end: bool,
}

type JunctionClusters = Vec<Vec<[usize; 3]>>;

fn split_branches(skel: &Array3<bool>, spacing: [f64; 3]) -> (Vec<RawBranch>, JunctionClusters) {
    let dims = skel.dim();
    let mut is_junction = Array3::from_elem(dims, false);
    let mut any = false;
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if skel[[z, y, x]] {
                    any = true;
                    if skeleton_degree(skel, [z, y, x]) >= 3 {
                        is_junction[[z, y, x]] = true;
                    }
                }
            }
        }
    }
    if !any {
        return (Vec::new(), Vec::new());
    }

    // junction clusters: 26-connected groups of junction voxels
    let mut junctions: JunctionClusters = Vec::new();
    let mut jseen = Array3::from_elem(dims, false);
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if !is_junction[[z, y, x]] || jseen[[z, y, x]] {
                    continue;
                }
                let mut cluster = Vec::new();
                let mut stack = vec![[z, y, x]];
                jseen[[z, y, x]] = true;
                while let Some(v) = stack.pop() {
                    cluster.push(v);
                    for n in neighbors_26(v, dims) {
                        if is_junction[n] && !jseen[n] {
                            jseen[n] = true;
                            stack.push(n);
                        }
                    }
                }
                junctions.push(cluster);
            }
        }
    }

    // branch interiors: components of non-junction skeleton voxels
    let mut seen = Array3::from_elem(dims, false);
    let mut branches = Vec::new();
    for z in 0..dims.0 {
        for y in 0..dims.1 {
            for x in 0..dims.2 {
                if !skel[[z, y, x]] || is_junction[[z, y, x]] || seen[[z, y, x]] {
                    continue;
                }
                let mut component = Vec::new();
                let mut stack = vec![[z, y, x]];
                seen[[z, y, x]] = true;
                while let Some(v) = stack.pop() {
                    component.push(v);
                    for n in neighbors_26(v, dims) {
                        if skel[n] && !is_junction[n] && !seen[n] {
                            seen[n] = true;
                            stack.push(n);
                        }
                    }
                }
                branches.push(order_chain(component, skel, &is_junction, spacing));
            }
        }
    }
    (branches, junctions)
}

/// Order a branch component into a chain and measure its length. The length
/// includes the connecting step onto each adjacent junction cluster.
fn order_chain(
    component: Vec<[usize; 3]>,
    skel: &Array3<bool>,
    is_junction: &Array3<bool>,
    spacing: [f64; 3],
) -> RawBranch {
    let dims = skel.dim();
    let in_comp = |v: [usize; 3], comp: &[[usize; 3]]| comp.contains(&v);
    // chain start: a voxel with <= 1 neighbors inside the component
    let mut start = component[0];
    for &v in &component {
        let deg_in = neighbors_26(v, dims)
            .filter(|&n| skel[n] && !is_junction[n] && in_comp(n, &component))
            .count();
        if deg_in <= 1 {
            start = v;
            break;
        }
    }
    let mut chain = Vec::with_capacity(component.len());
    let mut visited = std::collections::HashSet::new();
    let mut cur = start;
    visited.insert(cur);
    chain.push(cur);
    loop {
        let next = neighbors_26(cur, dims)
            .find(|&n| skel[n] && !is_junction[n] && in_comp(n, &component) && !visited.contains(&n));
        match next {
            Some(n) => {
                visited.insert(n);
                chain.push(n);
                cur = n;
            }
            None => break,
        }
    }
    let mut length = 0.0;
    for pair in chain.windows(2) {
        length += step_len(pair[0], pair[1], spacing);
    }
    // connecting steps into adjacent junction voxels, plus free-end detection
    let mut touches_junction = false;
    let mut free_end = false;
    for &end in [chain.first(), chain.last()].iter().flatten() {
        let junction_neighbor = neighbors_26(*end, dims)
            .filter(|&n| is_junction[n])
            .min_by_key(|&n| {
                let d = step_len(*end, n, spacing);
                (d * 1e6) as u64
            });
        match junction_neighbor {
            Some(j) => {
                touches_junction = true;
                length += step_len(*end, j, spacing);
            }
            None => {
                let deg = skeleton_degree(skel, *end);
                if deg <= 1 {
                    free_end = true;
                }
            }
        }
        if chain.len() == 1 {
            break; // single voxel: both ends are the same
        }
    }
    RawBranch {
        voxels: chain,
        length_mm: length,
        touches_junction,
        free_end,
    }
}

/// Skeletonize a binary mask: thin to the medial curve, then decompose into
/// branches with physical lengths.
pub fn skeletonize(mask: ArrayView3<bool>, spacing: [f64; 3]) -> Result<SkeletonGraph> {
    if !mask.iter().any(|&v| v) {
        return Err(Error::Contract("skeletonize: empty mask".into()));
    }
    let thinned = thin(mask);
    Ok(decompose(thinned, spacing))
}

/// Tree length detected (TD) and branch detected (BD) rates.
///
/// The prediction is restricted to its largest 26-connected component; the
/// skeleton is computed on the target. Each skeleton voxel carries a uniform
/// share of its branch's length, so TD counts covered voxels weighted by
/// branch length, and a branch is detected when at least `branch_fraction`
/// of its voxels lie inside the prediction. Empty target yields undefined
/// metrics.
pub fn tree_metrics(
    pred: ArrayView3<bool>,
    target: ArrayView3<bool>,
    spacing: [f64; 3],
    branch_fraction: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "pred {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    if !target.iter().any(|&v| v) {
        return Ok((None, None));
    }
    let pred_cc = super::largest_cc(pred);
    let graph = skeletonize(target, spacing)?;
    if graph.branches.is_empty() || graph.total_length_mm == 0.0 {
        // degenerate skeleton (e.g. a single voxel): fall back to voxel coverage
        let covered = graph.voxels.iter().all(|&v| pred_cc[v]);
        let val = if covered { 1.0 } else { 0.0 };
        return Ok((Some(val), Some(val)));
    }
    let mut detected_len = 0.0;
    let mut detected_branches = 0usize;
    for b in &graph.branches {
        let covered = b.voxels.iter().filter(|&&v| pred_cc[v]).count();
        let frac = covered as f64 / b.voxels.len() as f64;
        detected_len += b.length_mm * frac;
        if frac >= branch_fraction {
            detected_branches += 1;
        }
    }
    let td = detected_len / graph.total_length_mm;
    let bd = detected_branches as f64 / graph.branches.len() as f64;
    Ok((Some(td), Some(bd)))
}
