//! Distribution metrics over generated blocks: MMD, COV, and 1-NNA under
//! chamfer and EMD set distances, a deterministic descriptor-based Frechet
//! surrogate, and the expansion stability protocol that compares the inner
//! 3x3 region of a grown world against its outer ring.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::TriMesh;
use crate::grow;
use crate::seeds::{self, tag};
use crate::voxcore::{self, SparseGrid, VoxError};

pub const DEFAULT_POINTS: usize = 2048;
/// Exact Hungarian assignment up to this size; auction approximation above.
pub const EMD_EXACT_LIMIT: usize = 256;
pub const DESCRIPTOR_DIM: usize = 18;
const COV_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty geometry")]
    EmptyGeometry,
    #[error("empty point set")]
    EmptySet,
    #[error("point sets must have equal size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("need at least {need} samples per set, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("world too small: {0}")]
    WorldTooSmall(String),
    #[error("assignment solver: {0}")]
    Solver(String),
    #[error("serialize: {0}")]
    Format(String),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Points on the exposed surface of one block, scaled into the block's
/// bounding cube so every coordinate lies in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSample {
    pub block_id: String,
    pub points: Vec<[f64; 3]>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

struct Face {
    /// Lower corner of the face rectangle in metres.
    base: [f64; 3],
    /// In-face edge vectors; the third axis is degenerate.
    edge_a: (usize, f64),
    edge_b: (usize, f64),
}

fn exposed_faces(grid: &SparseGrid) -> (Vec<Face>, Vec<f64>) {
    let cell = grid.cell_size();
    let mut faces = Vec::new();
    let mut areas = Vec::new();
    for (coord, _) in grid.iter() {
        let [x, y, z] = coord.as_array();
        let p = [x as i64, y as i64, z as i64];
        for (axis, side) in [(0, -1i64), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
            let mut q = p;
            q[axis] += side;
            let covered = q[axis] >= 0
                && (q[axis] as u32) < grid.resolution()[axis]
                && grid.is_active(&voxcore::VoxelCoord::new(
                    q[0].max(0) as u16,
                    q[1].max(0) as u16,
                    q[2].max(0) as u16,
                ));
            if covered {
                continue;
            }
            let (a, b) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut base = [
                p[0] as f64 * cell[0] as f64,
                p[1] as f64 * cell[1] as f64,
                p[2] as f64 * cell[2] as f64,
            ];
            if side > 0 {
                base[axis] += cell[axis] as f64;
            }
            faces.push(Face {
                base,
                edge_a: (a, cell[a] as f64),
                edge_b: (b, cell[b] as f64),
            });
            areas.push(cell[a] as f64 * cell[b] as f64);
        }
    }
    (faces, areas)
}

fn weighted_index(cumulative: &[f64], pick: f64) -> usize {
    cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1)
}

/// Sample n points uniformly over the exposed surface of a block, scaled
/// by the bounding cube edge (the largest physical extent).
pub fn sample_points(grid: &SparseGrid, n: usize, seed: u64) -> Result<PointSample, MetricsError> {
    if grid.len() == 0 || n == 0 {
        return Err(MetricsError::EmptyGeometry);
    }
    let (faces, areas) = exposed_faces(grid);
    let mut cumulative = Vec::with_capacity(areas.len());
    let mut total = 0.0;
    for a in &areas {
        total += a;
        cumulative.push(total);
    }
    let res = grid.resolution();
    let cell = grid.cell_size();
    let scale = (0..3)
        .map(|a| res[a] as f64 * cell[a] as f64)
        .fold(0.0f64, f64::max);
    let mut rng = seeds::rng(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let face = &faces[weighted_index(&cumulative, rng.gen_range(0.0..total))];
        let u: f64 = rng.gen_range(0.0..1.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        let mut p = face.base;
        p[face.edge_a.0] += u * face.edge_a.1;
        p[face.edge_b.0] += v * face.edge_b.1;
        points.push([p[0] / scale, p[1] / scale, p[2] / scale]);
    }
    Ok(PointSample {
        block_id: grow::box_hash(grid, [0, 0, 0], res)[..16].to_string(),
        points,
    })
}

/// Area-weighted surface sampling over a triangle mesh, scaled into the
/// mesh's bounding cube.
pub fn sample_points_mesh(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointSample, MetricsError> {
    if mesh.faces.is_empty() || n == 0 {
        return Err(MetricsError::EmptyGeometry);
    }
    let v3 = |i: u32| {
        let v = mesh.vertices[i as usize];
        [v[0] as f64, v[1] as f64, v[2] as f64]
    };
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in &mesh.faces {
        let [a, b, c] = [v3(f.indices[0]), v3(f.indices[1]), v3(f.indices[2])];
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let ac = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cx = ab[1] * ac[2] - ab[2] * ac[1];
        let cy = ab[2] * ac[0] - ab[0] * ac[2];
        let cz = ab[0] * ac[1] - ab[1] * ac[0];
        total += 0.5 * (cx * cx + cy * cy + cz * cz).sqrt();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(MetricsError::EmptyGeometry);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a] as f64);
            hi[a] = hi[a].max(v[a] as f64);
        }
    }
    let scale = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max).max(1e-12);
    let mut rng = seeds::rng(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let f = &mesh.faces[weighted_index(&cumulative, rng.gen_range(0.0..total))];
        let [a, b, c] = [v3(f.indices[0]), v3(f.indices[1]), v3(f.indices[2])];
        let su: f64 = rng.gen_range(0.0..1.0f64).sqrt();
        let v: f64 = rng.gen_range(0.0..1.0);
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = (1.0 - su) * a[k] + su * (1.0 - v) * b[k] + su * v * c[k];
            p[k] = (p[k] - lo[k]) / scale;
        }
        points.push(p);
    }
    let mut h = <sha2::Sha256 as sha2::Digest>::new();
    for v in &mesh.vertices {
        for c in v {
            sha2::Digest::update(&mut h, c.to_le_bytes());
        }
    }
    let id: String = sha2::Digest::finalize(h)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect();
    Ok(PointSample { block_id: id, points })
}

/// Rasterize a mesh surface into an occupancy grid over its bounding cube.
/// Gives PLY inputs a voxel form for descriptor-based metrics.
pub fn voxelize_mesh(mesh: &TriMesh, res: u32, seed: u64) -> Result<SparseGrid, MetricsError> {
    if res == 0 {
        return Err(MetricsError::EmptyGeometry);
    }
    let sample = sample_points_mesh(mesh, (res as usize).pow(2) * 16, seed)?;
    let mut grid = SparseGrid::new([res, res, res], [1.0 / res as f32; 3], 1)?;
    for p in &sample.points {
        let idx = |v: f64| ((v * res as f64) as u32).min(res - 1) as u16;
        grid.insert(
            voxcore::VoxelCoord::new(idx(p[0]), idx(p[1]), idx(p[2])),
            vec![1.0],
        )?;
    }
    Ok(grid)
}

fn directed_mean_sq(x: &[[f64; 3]], y: &[[f64; 3]]) -> f64 {
    let total: f64 = x
        .iter()
        .map(|p| y.iter().map(|q| dist2(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    total / x.len() as f64
}

/// Sum of both directed means of squared nearest-neighbor distances.
pub fn chamfer(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(directed_mean_sq(x, y) + directed_mean_sq(y, x))
}

/// Exact assignment by shortest augmenting paths with potentials. Returns
/// the total matched cost.
fn hungarian_total(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // p[j] = row matched to column j; column n is the virtual start.
    let mut p = vec![n; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0][j] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == n {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    (0..n).map(|j| if p[j] < n { cost[p[j]][j] } else { 0.0 }).sum()
}

/// Epsilon-scaling auction. Returns (total cost, certified relative duality
/// gap): prices give a feasible dual, so gap bounds suboptimality.
fn auction_total(cost: &[Vec<f64>], rel_gap: f64) -> (f64, f64) {
    let n = cost.len();
    if n == 1 {
        return (cost[0][0], 0.0);
    }
    let span = cost
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, &c| m.max(c.abs()));
    let mut eps = (span / 4.0).max(1e-9);
    let mut price = vec![0.0f64; n];
    let mut total = f64::INFINITY;
    let mut gap = f64::INFINITY;
    for _ in 0..100 {
        let mut owner = vec![usize::MAX; n];
        let mut queue: VecDeque<usize> = (0..n).collect();
        while let Some(i) = queue.pop_front() {
            let mut best_j = 0;
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for (j, (c, p)) in cost[i].iter().zip(&price).enumerate() {
                let val = -c - p;
                if val > best {
                    second = best;
                    best = val;
                    best_j = j;
                } else if val > second {
                    second = val;
                }
            }
            price[best_j] += best - second + eps;
            if owner[best_j] != usize::MAX {
                queue.push_back(owner[best_j]);
            }
            owner[best_j] = i;
        }
        total = (0..n).map(|j| cost[owner[j]][j]).sum();
        // Feasible dual of the min-cost assignment LP: v_j = -price_j,
        // u_i = min_j (c_ij + price_j). Epsilon-CS bounds total - dual
        // by n * eps, so the gap certifies suboptimality.
        let dual: f64 = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| cost[i][j] + price[j])
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            - price.iter().sum::<f64>();
        gap = (total - dual).max(0.0) / total.abs().max(1e-12);
        if gap <= rel_gap {
            return (total, gap);
        }
        eps /= 5.0;
    }
    (total, gap)
}

/// Minimum mean matched Euclidean distance over bijections; exact up to
/// EMD_EXACT_LIMIT points, certified auction approximation above.
pub fn emd(x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if x.len() != y.len() {
        return Err(MetricsError::SizeMismatch(x.len(), y.len()));
    }
    let n = x.len();
    let cost: Vec<Vec<f64>> = x
        .iter()
        .map(|p| y.iter().map(|q| dist(p, q)).collect())
        .collect();
    if n <= EMD_EXACT_LIMIT {
        return Ok(hungarian_total(&cost) / n as f64);
    }
    let (total, gap) = auction_total(&cost, 0.01);
    if gap > 0.01 {
        return Err(MetricsError::Solver(format!(
            "auction failed to certify: gap {gap:.4}"
        )));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairDistance {
    Chamfer,
    Emd,
}

pub fn set_distance(d: PairDistance, x: &[[f64; 3]], y: &[[f64; 3]]) -> Result<f64, MetricsError> {
    match d {
        PairDistance::Chamfer => chamfer(x, y),
        PairDistance::Emd => emd(x, y),
    }
}

/// m[i][j] = D(a_i, b_j). Rows computed in parallel; entry order is fixed,
/// so the result is identical at any thread count.
fn distance_matrix(
    d: PairDistance,
    a: &[PointSample],
    b: &[PointSample],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    a.par_iter()
        .map(|pa| {
            b.iter()
                .map(|pb| set_distance(d, &pa.points, &pb.points))
                .collect()
        })
        .collect()
}

fn mmd_from(gr: &[Vec<f64>]) -> f64 {
    let nr = gr[0].len();
    let mut minima: Vec<f64> = (0..nr)
        .map(|j| gr.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .collect();
    // Canonical summation order keeps the mean invariant to permutations.
    minima.sort_by(f64::total_cmp);
    minima.iter().sum::<f64>() / nr as f64
}

fn cov_from(gr: &[Vec<f64>]) -> f64 {
    let nr = gr[0].len();
    let mut matched = BTreeSet::new();
    for row in gr {
        let mut best = 0;
        for (j, d) in row.iter().enumerate() {
            if *d < row[best] {
                best = j;
            }
        }
        matched.insert(best);
    }
    matched.len() as f64 / nr as f64
}

/// Leave-one-out 1-NN accuracy over the union; exact distance ties
/// classify as reference.
fn nna_from(gg: &[Vec<f64>], gr: &[Vec<f64>], rr: &[Vec<f64>]) -> f64 {
    let ng = gg.len();
    let nr = rr.len();
    let mut correct = 0usize;
    for i in 0..ng {
        let mut best = f64::INFINITY;
        for j in 0..ng {
            if j != i {
                best = best.min(gg[i][j]);
            }
        }
        for j in 0..nr {
            best = best.min(gr[i][j]);
        }
        let predicted_ref = (0..nr).any(|j| gr[i][j] == best);
        if !predicted_ref {
            correct += 1;
        }
    }
    for j in 0..nr {
        let mut best = f64::INFINITY;
        for k in 0..nr {
            if k != j {
                best = best.min(rr[j][k]);
            }
        }
        for i in 0..ng {
            best = best.min(gr[i][j]);
        }
        let predicted_ref = (0..nr).any(|k| k != j && rr[j][k] == best);
        if predicted_ref {
            correct += 1;
        }
    }
    correct as f64 / (ng + nr) as f64
}

pub fn mmd(sg: &[PointSample], sr: &[PointSample], d: PairDistance) -> Result<f64, MetricsError> {
    if sg.is_empty() || sr.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(mmd_from(&distance_matrix(d, sg, sr)?))
}

pub fn cov(sg: &[PointSample], sr: &[PointSample], d: PairDistance) -> Result<f64, MetricsError> {
    if sg.is_empty() || sr.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(cov_from(&distance_matrix(d, sg, sr)?))
}

pub fn nna(sg: &[PointSample], sr: &[PointSample], d: PairDistance) -> Result<f64, MetricsError> {
    if sg.is_empty() || sr.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let gg = distance_matrix(d, sg, sg)?;
    let gr = distance_matrix(d, sg, sr)?;
    let rr = distance_matrix(d, sr, sr)?;
    Ok(nna_from(&gg, &gr, &rr))
}

/// 18-dim block descriptor: occupancy fraction, centroid of active voxel
/// centers, the six central second moments, and an 8-bin height histogram.
/// All coordinates are resolution-normalized to [0, 1].
pub fn block_descriptor(grid: &SparseGrid) -> Result<Vec<f64>, MetricsError> {
    if grid.len() == 0 {
        return Err(MetricsError::EmptyGeometry);
    }
    let res = grid.resolution();
    let n = grid.len() as f64;
    let centers: Vec<[f64; 3]> = grid
        .coords()
        .map(|c| {
            let [x, y, z] = c.as_array();
            [
                (x as f64 + 0.5) / res[0] as f64,
                (y as f64 + 0.5) / res[1] as f64,
                (z as f64 + 0.5) / res[2] as f64,
            ]
        })
        .collect();
    let mut mu = [0.0f64; 3];
    for c in &centers {
        for a in 0..3 {
            mu[a] += c[a] / n;
        }
    }
    let mut mom = [0.0f64; 6];
    for c in &centers {
        let d = [c[0] - mu[0], c[1] - mu[1], c[2] - mu[2]];
        let pairs = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        for (k, (a, b)) in pairs.iter().enumerate() {
            mom[k] += d[*a] * d[*b] / n;
        }
    }
    let mut hist = [0.0f64; 8];
    for c in &centers {
        let bin = ((c[2] * 8.0) as usize).min(7);
        hist[bin] += 1.0 / n;
    }
    let voxels = res.iter().map(|&r| r as f64).product::<f64>();
    let mut d = Vec::with_capacity(DESCRIPTOR_DIM);
    d.push(n / voxels);
    d.extend_from_slice(&mu);
    d.extend_from_slice(&mom);
    d.extend_from_slice(&hist);
    Ok(d)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

/// Cyclic Jacobi diagonalization of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum();
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn psd_sqrt(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(m.to_vec());
    let n = m.len();
    let mut out = vec![vec![0.0; n]; n];
    for (k, lam) in vals.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[i][j] += s * vecs[i][k] * vecs[j][k];
            }
        }
    }
    out
}

fn mean_cov(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut mu = vec![0.0; d];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mu[i]) * (x[j] - mu[j]) / n;
            }
        }
    }
    (mu, cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetScore {
    pub score: f64,
    /// True when a near-singular covariance was stabilized with eps I.
    pub regularized: bool,
}

/// Frechet distance between Gaussians fitted to two descriptor sets:
/// |mu_g - mu_r|^2 + Tr(S_g + S_r - 2 (S_r^1/2 S_g S_r^1/2)^1/2).
pub fn frechet_from_descriptors(
    dg: &[Vec<f64>],
    dr: &[Vec<f64>],
) -> Result<FrechetScore, MetricsError> {
    if dg.len() < 2 || dr.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: dg.len().min(dr.len()),
        });
    }
    let d = dg[0].len();
    for x in dg.iter().chain(dr) {
        if x.len() != d {
            return Err(MetricsError::DimMismatch(d, x.len()));
        }
    }
    let (mu_g, mut cov_g) = mean_cov(dg);
    let (mu_r, mut cov_r) = mean_cov(dr);
    let min_eig = |m: &[Vec<f64>]| {
        jacobi_eigen(m.to_vec())
            .0
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    };
    let mut regularized = false;
    if min_eig(&cov_g) < 1e-9 || min_eig(&cov_r) < 1e-9 {
        regularized = true;
        for i in 0..d {
            cov_g[i][i] += COV_EPS;
            cov_r[i][i] += COV_EPS;
        }
    }
    let sr = psd_sqrt(&cov_r);
    let inner = mat_mul(&mat_mul(&sr, &cov_g), &sr);
    let trace_sqrt: f64 = jacobi_eigen(inner).0.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu_g
        .iter()
        .zip(&mu_r)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let trace = |m: &[Vec<f64>]| (0..d).map(|i| m[i][i]).sum::<f64>();
    let score = (mean_term + trace(&cov_g) + trace(&cov_r) - 2.0 * trace_sqrt).max(0.0);
    Ok(FrechetScore { score, regularized })
}

pub fn frechet_surrogate(
    sg: &[SparseGrid],
    sr: &[SparseGrid],
) -> Result<FrechetScore, MetricsError> {
    let dg: Vec<Vec<f64>> = sg.iter().map(block_descriptor).collect::<Result<_, _>>()?;
    let dr: Vec<Vec<f64>> = sr.iter().map(block_descriptor).collect::<Result<_, _>>()?;
    frechet_from_descriptors(&dg, &dr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub generated: usize,
    pub reference: usize,
    pub points_per_block: usize,
    #[serde(with = "seeds::hex")]
    pub seed: u64,
    pub cd_convention: String,
    pub emd_convention: String,
    pub mmd_cd: f64,
    pub mmd_emd: f64,
    pub cov_cd: f64,
    pub cov_emd: f64,
    pub nna_cd: f64,
    pub nna_emd: f64,
    pub frechet: f64,
    pub frechet_regularized: bool,
}

impl EvalReport {
    pub fn to_toml(&self) -> Result<String, MetricsError> {
        toml::to_string(self).map_err(|e| MetricsError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, MetricsError> {
        toml::from_str(text).map_err(|e| MetricsError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricsError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricsError> {
        EvalReport::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Full metric sweep of generated blocks against a reference set. Points
/// are sampled per block with seeds derived from `seed`, so the report is
/// reproducible bit for bit.
pub fn evaluate(
    generated: &[SparseGrid],
    reference: &[SparseGrid],
    n_points: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: generated.len().min(reference.len()),
        });
    }
    let sample_all = |blocks: &[SparseGrid], base: u64| -> Result<Vec<PointSample>, MetricsError> {
        blocks
            .iter()
            .enumerate()
            .map(|(i, b)| sample_points(b, n_points, seeds::derive(seed, tag::EVAL, base + i as u64)))
            .collect()
    };
    let pts_g = sample_all(generated, 0)?;
    let pts_r = sample_all(reference, 1 << 32)?;
    let mut out = EvalReport {
        generated: generated.len(),
        reference: reference.len(),
        points_per_block: n_points,
        seed,
        cd_convention: "sum of directed means of squared NN distances".into(),
        emd_convention: format!(
            "mean matched distance; exact <= {EMD_EXACT_LIMIT}, auction gap <= 1% above"
        ),
        mmd_cd: 0.0,
        mmd_emd: 0.0,
        cov_cd: 0.0,
        cov_emd: 0.0,
        nna_cd: 0.0,
        nna_emd: 0.0,
        frechet: 0.0,
        frechet_regularized: false,
    };
    for d in [PairDistance::Chamfer, PairDistance::Emd] {
        let gg = distance_matrix(d, &pts_g, &pts_g)?;
        let gr = distance_matrix(d, &pts_g, &pts_r)?;
        let rr = distance_matrix(d, &pts_r, &pts_r)?;
        let (m, c, n) = (mmd_from(&gr), cov_from(&gr), nna_from(&gg, &gr, &rr));
        match d {
            PairDistance::Chamfer => {
                out.mmd_cd = m;
                out.cov_cd = c;
                out.nna_cd = n;
            }
            PairDistance::Emd => {
                out.mmd_emd = m;
                out.cov_emd = c;
                out.nna_emd = n;
            }
        }
    }
    let fr = frechet_surrogate(generated, reference)?;
    out.frechet = fr.score;
    out.frechet_regularized = fr.regularized;
    Ok(out)
}

/// Inner-region membership for the stability protocol: growth starts at
/// the origin corner, so the initial region is lattice indices < 3.
pub fn is_inner(i: u32, j: u32) -> bool {
    i < 3 && j < 3
}

/// Expansion stability: carve the leading 7x7 fine blocks out of a grown
/// world, evaluate the inner 3x3 and the outer ring separately against the
/// reference set with equal block counts (the larger side is subsampled).
pub fn stability_protocol(
    fine_world: &SparseGrid,
    w_vox: u32,
    reference: &[SparseGrid],
    n_points: usize,
    seed: u64,
) -> Result<(EvalReport, EvalReport), MetricsError> {
    if w_vox == 0 {
        return Err(MetricsError::WorldTooSmall("zero block size".into()));
    }
    let res = fine_world.resolution();
    let (bx, by) = (res[0] / w_vox, res[1] / w_vox);
    if bx < 7 || by < 7 {
        return Err(MetricsError::WorldTooSmall(format!(
            "{bx}x{by} blocks, need 7x7"
        )));
    }
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for i in 0..7u32 {
        for j in 0..7u32 {
            let block = voxcore::crop(
                fine_world,
                [i * w_vox, j * w_vox, 0],
                [(i + 1) * w_vox, (j + 1) * w_vox, res[2]],
            )?;
            if block.len() == 0 {
                continue;
            }
            if is_inner(i, j) {
                inner.push(block);
            } else {
                outer.push(block);
            }
        }
    }
    let k = inner.len().min(outer.len());
    if k < 2 {
        return Err(MetricsError::TooFewSamples {
            need: 2,
            got: k,
        });
    }
    let subsample = |blocks: Vec<SparseGrid>, salt: u64| -> Vec<SparseGrid> {
        if blocks.len() <= k {
            return blocks;
        }
        let mut rng = seeds::rng_for(seed, tag::EVAL, salt);
        let mut picked: Vec<usize> =
            rand::seq::index::sample(&mut rng, blocks.len(), k).into_vec();
        picked.sort_unstable();
        let mut blocks: Vec<Option<SparseGrid>> = blocks.into_iter().map(Some).collect();
        picked.iter().map(|&i| blocks[i].take().unwrap()).collect()
    };
    let inner = subsample(inner, 1 << 40);
    let outer = subsample(outer, (1 << 40) + 1);
    let inner_report = evaluate(&inner, reference, n_points, seeds::derive(seed, tag::EVAL, 1))?;
    let outer_report = evaluate(&outer, reference, n_points, seeds::derive(seed, tag::EVAL, 2))?;
    Ok((inner_report, outer_report))
}
