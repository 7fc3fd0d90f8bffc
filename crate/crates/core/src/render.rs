//! Multiview rendering and occlusion-aware feature lifting.
//!
//! Blocks are rendered from a 26-camera rig (the 3^3 - 1 unit directions)
//! on a sphere of radius 1.5x the block diagonal. Depth is the Euclidean
//! distance from the camera to the first active-voxel boundary along the
//! ray (uniform-grid DDA). A voxel is visible in a view iff its center
//! projects inside the image and the distance to its center agrees with
//! the depth sample within tau; per-voxel features are the mean over
//! visible views only, which is what keeps features from bleeding through
//! walls. Voxels visible in no view get the zero feature and a flag.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::voxcore::{SparseGrid, SparseMask, VoxelCoord};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("camera is inside an active voxel")]
    CameraInsideVoxel,
    #[error("degenerate camera: {0}")]
    BadCamera(String),
    #[error("feature image channel mismatch: {expected} vs {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Pinhole camera in grid-local meters.
#[derive(Debug, Clone)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub vfov: f64, // radians
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone)]
struct Basis {
    right: [f64; 3],
    up: [f64; 3],
    forward: [f64; 3],
    tan_half: f64,
    aspect: f64,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    if n < 1e-12 {
        None
    } else {
        Some([a[0] / n, a[1] / n, a[2] / n])
    }
}

impl CameraPose {
    fn basis(&self) -> Result<Basis, RenderError> {
        let forward = normalize(sub(self.look_at, self.position))
            .ok_or_else(|| RenderError::BadCamera("look_at equals position".into()))?;
        let right = normalize(cross(forward, self.up))
            .ok_or_else(|| RenderError::BadCamera("up parallel to view direction".into()))?;
        let up = cross(right, forward);
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::BadCamera("zero image size".into()));
        }
        if !(self.vfov > 0.0 && self.vfov < std::f64::consts::PI) {
            return Err(RenderError::BadCamera(format!("vfov {}", self.vfov)));
        }
        Ok(Basis {
            right,
            up,
            forward,
            tan_half: (self.vfov * 0.5).tan(),
            aspect: self.width as f64 / self.height as f64,
        })
    }
}

/// Per-pixel Euclidean distance to the first hit; +inf on miss.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }
}

/// Per-pixel feature image; zeros on miss.
#[derive(Debug, Clone)]
pub struct ViewFeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    data: Vec<f32>,
}

impl ViewFeatureMap {
    pub fn get(&self, x: u32, y: u32) -> &[f32] {
        let i = ((y * self.width + x) as usize) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Dense occupancy index for fast DDA traversal.
struct RayScene {
    res: [u32; 3],
    cell: [f64; 3],
    extent: [f64; 3],
    occ: Vec<bool>,
}

impl RayScene {
    fn new(grid: &SparseGrid) -> Self {
        let res = grid.resolution();
        let cs = grid.cell_size();
        let cell = [cs[0] as f64, cs[1] as f64, cs[2] as f64];
        let extent = [
            res[0] as f64 * cell[0],
            res[1] as f64 * cell[1],
            res[2] as f64 * cell[2],
        ];
        let mut occ = vec![false; (res[0] * res[1] * res[2]) as usize];
        for (c, _) in grid.iter() {
            let [x, y, z] = c.as_array();
            occ[(x + res[0] * (y + res[1] * z)) as usize] = true;
        }
        RayScene {
            res,
            cell,
            extent,
            occ,
        }
    }

    fn active(&self, v: [i64; 3]) -> bool {
        if v.iter().zip(&self.res).any(|(&i, &r)| i < 0 || i >= r as i64) {
            return false;
        }
        self.occ[(v[0] as u32 + self.res[0] * (v[1] as u32 + self.res[1] * v[2] as u32)) as usize]
    }

    fn voxel_of(&self, p: [f64; 3]) -> Option<[i64; 3]> {
        let mut v = [0i64; 3];
        for a in 0..3 {
            if p[a] < 0.0 || p[a] >= self.extent[a] {
                return None;
            }
            v[a] = (p[a] / self.cell[a]).floor() as i64;
        }
        Some(v)
    }

    /// March the ray; returns (t_enter of first active voxel, its coord).
    fn march(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, [i64; 3])> {
        // Slab clip to the grid box.
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < 0.0 || origin[a] >= self.extent[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let ta = (0.0 - origin[a]) * inv;
            let tb = (self.extent[a] - origin[a]) * inv;
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if t0 > t1 {
            return None;
        }
        // Entry point nudged inside to get a valid starting voxel.
        let start_t = t0;
        let eps = 1e-9;
        let p = [
            origin[0] + dir[0] * (start_t + eps),
            origin[1] + dir[1] * (start_t + eps),
            origin[2] + dir[2] * (start_t + eps),
        ];
        let mut v = self.voxel_of(p)?;
        let mut t_enter = start_t;
        let mut t_max = [0.0f64; 3];
        let mut t_delta = [0.0f64; 3];
        let mut step = [0i64; 3];
        for a in 0..3 {
            if dir[a] > 1e-15 {
                step[a] = 1;
                t_max[a] = (((v[a] + 1) as f64) * self.cell[a] - origin[a]) / dir[a];
                t_delta[a] = self.cell[a] / dir[a];
            } else if dir[a] < -1e-15 {
                step[a] = -1;
                t_max[a] = ((v[a] as f64) * self.cell[a] - origin[a]) / dir[a];
                t_delta[a] = -self.cell[a] / dir[a];
            } else {
                step[a] = 0;
                t_max[a] = f64::INFINITY;
                t_delta[a] = f64::INFINITY;
            }
        }
        loop {
            if self.active(v) {
                return Some((t_enter, v));
            }
            // Step into the neighbor with the nearest boundary.
            let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            t_enter = t_max[a];
            v[a] += step[a];
            t_max[a] += t_delta[a];
            if v[a] < 0 || v[a] >= self.res[a] as i64 || t_enter > t1 + 1e-9 {
                return None;
            }
        }
    }
}

/// Render the depth map: distance to first active-voxel boundary per pixel.
pub fn raycast_depth(grid: &SparseGrid, camera: &CameraPose) -> Result<DepthMap, RenderError> {
    Ok(render_view(grid, camera)?.0)
}

/// Depth plus the per-pixel feature image (hit voxel's features).
pub fn render_view(
    grid: &SparseGrid,
    camera: &CameraPose,
) -> Result<(DepthMap, ViewFeatureMap), RenderError> {
    let scene = RayScene::new(grid);
    let basis = camera.basis()?;
    if let Some(v) = scene.voxel_of(camera.position) {
        if scene.active(v) {
            return Err(RenderError::CameraInsideVoxel);
        }
    }
    let (w, h) = (camera.width, camera.height);
    let channels = grid.channels();
    let mut depth = vec![f64::INFINITY; (w * h) as usize];
    let mut feats = vec![0.0f32; (w * h) as usize * channels];
    for j in 0..h {
        for i in 0..w {
            let x_ndc = ((i as f64 + 0.5) / w as f64) * 2.0 - 1.0;
            let y_ndc = 1.0 - ((j as f64 + 0.5) / h as f64) * 2.0;
            let d = [
                basis.forward[0]
                    + x_ndc * basis.tan_half * basis.aspect * basis.right[0]
                    + y_ndc * basis.tan_half * basis.up[0],
                basis.forward[1]
                    + x_ndc * basis.tan_half * basis.aspect * basis.right[1]
                    + y_ndc * basis.tan_half * basis.up[1],
                basis.forward[2]
                    + x_ndc * basis.tan_half * basis.aspect * basis.right[2]
                    + y_ndc * basis.tan_half * basis.up[2],
            ];
            let d = normalize(d).expect("pixel direction");
            if let Some((t, v)) = scene.march(camera.position, d) {
                let px = (j * w + i) as usize;
                depth[px] = t;
                let coord = VoxelCoord::new(v[0] as u16, v[1] as u16, v[2] as u16);
                if let Some(f) = grid.get(&coord) {
                    feats[px * channels..(px + 1) * channels].copy_from_slice(f);
                }
            }
        }
    }
    Ok((
        DepthMap {
            width: w,
            height: h,
            data: depth,
        },
        ViewFeatureMap {
            width: w,
            height: h,
            channels,
            data: feats,
        },
    ))
}

/// Project a voxel center; returns (pixel x, pixel y, Euclidean distance).
fn project(
    basis: &Basis,
    camera: &CameraPose,
    center: [f64; 3],
) -> Option<(u32, u32, f64)> {
    let r = sub(center, camera.position);
    let zf = dot(r, basis.forward);
    if zf <= 1e-12 {
        return None;
    }
    let xr = dot(r, basis.right) / zf / (basis.tan_half * basis.aspect);
    let yr = dot(r, basis.up) / zf / basis.tan_half;
    let px = ((xr + 1.0) * 0.5 * camera.width as f64).floor();
    let py = ((1.0 - yr) * 0.5 * camera.height as f64).floor();
    if px < 0.0 || py < 0.0 || px >= camera.width as f64 || py >= camera.height as f64 {
        return None;
    }
    Some((px as u32, py as u32, norm(r)))
}

fn voxel_center(grid: &SparseGrid, c: &VoxelCoord) -> [f64; 3] {
    let cs = grid.cell_size();
    [
        (c.x as f64 + 0.5) * cs[0] as f64,
        (c.y as f64 + 0.5) * cs[1] as f64,
        (c.z as f64 + 0.5) * cs[2] as f64,
    ]
}

/// Default tau: 0.75x the smallest cell edge, enough to accept a face-on
/// center-to-boundary gap (half a cell) and reject anything a full cell
/// behind a surface.
pub fn default_tau(grid: &SparseGrid) -> f64 {
    let cs = grid.cell_size();
    0.75 * cs.iter().map(|&c| c as f64).fold(f64::INFINITY, f64::min)
}

/// Per-view visibility over the grid's active voxels: the center projects
/// inside the image and agrees with the depth sample within tau.
pub fn visibility_mask(
    grid: &SparseGrid,
    camera: &CameraPose,
    depth: &DepthMap,
    tau: f64,
) -> Result<SparseMask, RenderError> {
    let basis = camera.basis()?;
    let mut mask = SparseMask::new();
    for (coord, _) in grid.iter() {
        let center = voxel_center(grid, coord);
        let visible = match project(&basis, camera, center) {
            Some((px, py, dist)) => {
                let d = depth.get(px, py);
                d.is_finite() && (dist - d).abs() <= tau
            }
            None => false,
        };
        mask.set(*coord, visible);
    }
    Ok(mask)
}

/// One rendered view bundled with its camera.
pub struct View {
    pub camera: CameraPose,
    pub depth: DepthMap,
    pub features: ViewFeatureMap,
}

pub struct LiftedFeatures {
    pub features: SparseGrid,
    /// Active voxels visible in zero views (zero feature assigned).
    pub unobserved: BTreeSet<VoxelCoord>,
}

/// Occlusion-aware lifting: per active voxel, average the feature samples
/// of the views that actually see it (depth-tested). Views contribute in
/// list order; voxels seen nowhere are flagged.
pub fn aggregate_features(
    occupancy: &SparseGrid,
    views: &[View],
    tau: f64,
) -> Result<LiftedFeatures, RenderError> {
    aggregate_impl(occupancy, views, tau, true)
}

/// Naive ablation: every view the voxel projects into contributes, with no
/// depth test. Exists as the contrast oracle for occlusion tests.
pub fn aggregate_features_naive(
    occupancy: &SparseGrid,
    views: &[View],
    tau: f64,
) -> Result<LiftedFeatures, RenderError> {
    aggregate_impl(occupancy, views, tau, false)
}

fn aggregate_impl(
    occupancy: &SparseGrid,
    views: &[View],
    tau: f64,
    depth_test: bool,
) -> Result<LiftedFeatures, RenderError> {
    let channels = views
        .first()
        .map(|v| v.features.channels)
        .unwrap_or(crate::procgen::FEATURE_CHANNELS);
    for v in views {
        if v.features.channels != channels {
            return Err(RenderError::ChannelMismatch {
                expected: channels,
                got: v.features.channels,
            });
        }
    }
    let bases: Vec<Basis> = views
        .iter()
        .map(|v| v.camera.basis())
        .collect::<Result<_, _>>()?;
    let mut out = SparseGrid::new(occupancy.resolution(), occupancy.cell_size(), channels)
        .expect("occupancy resolution already validated");
    let mut unobserved = BTreeSet::new();
    for (coord, _) in occupancy.iter() {
        let center = voxel_center(occupancy, coord);
        let mut acc = vec![0.0f64; channels];
        let mut count = 0u32;
        for (view, basis) in views.iter().zip(&bases) {
            let Some((px, py, dist)) = project(basis, &view.camera, center) else {
                continue;
            };
            if depth_test {
                let d = view.depth.get(px, py);
                if !(d.is_finite() && (dist - d).abs() <= tau) {
                    continue;
                }
            }
            for (a, &f) in acc.iter_mut().zip(view.features.get(px, py)) {
                *a += f as f64;
            }
            count += 1;
        }
        let feat: Vec<f32> = if count == 0 {
            unobserved.insert(*coord);
            vec![0.0; channels]
        } else {
            acc.iter().map(|&a| (a / count as f64) as f32).collect()
        };
        out.insert(*coord, feat).expect("active voxel in bounds");
    }
    Ok(LiftedFeatures {
        features: out,
        unobserved,
    })
}

/// The 26 unit-offset cameras ((-1..=1)^3 minus the center) on a sphere of
/// `radius_factor` x the box diagonal, all looking at the box center.
pub fn camera_rig(extent_m: [f64; 3], image: u32, vfov: f64, radius_factor: f64) -> Vec<CameraPose> {
    let center = [extent_m[0] * 0.5, extent_m[1] * 0.5, extent_m[2] * 0.5];
    let diag = norm(extent_m);
    let radius = radius_factor * diag;
    let mut cameras = Vec::with_capacity(26);
    for dz in -1i32..=1 {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let d = normalize([dx as f64, dy as f64, dz as f64]).unwrap();
                let position = [
                    center[0] + d[0] * radius,
                    center[1] + d[1] * radius,
                    center[2] + d[2] * radius,
                ];
                // Poles need a non-parallel up vector.
                let up = if dx == 0 && dy == 0 {
                    [1.0, 0.0, 0.0]
                } else {
                    [0.0, 0.0, 1.0]
                };
                cameras.push(CameraPose {
                    position,
                    look_at: center,
                    up,
                    vfov,
                    width: image,
                    height: image,
                });
            }
        }
    }
    cameras
}

/// Render the full rig for a block and bundle the views.
pub fn render_rig(
    grid: &SparseGrid,
    image: u32,
    vfov: f64,
    radius_factor: f64,
) -> Result<Vec<View>, RenderError> {
    let res = grid.resolution();
    let cs = grid.cell_size();
    let extent = [
        res[0] as f64 * cs[0] as f64,
        res[1] as f64 * cs[1] as f64,
        res[2] as f64 * cs[2] as f64,
    ];
    camera_rig(extent, image, vfov, radius_factor)
        .into_iter()
        .map(|camera| {
            let (depth, features) = render_view(grid, &camera)?;
            Ok(View {
                camera,
                depth,
                features,
            })
        })
        .collect()
}

/// Debug dump: depth as grayscale PPM (finite values min-max normalized).
pub fn write_depth_ppm(map: &DepthMap, path: &Path) -> Result<(), RenderError> {
    let finite: Vec<f64> = map.data.iter().copied().filter(|d| d.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "P6\n{} {}\n255", map.width, map.height)?;
    let mut bytes = Vec::with_capacity(map.data.len() * 3);
    for &d in &map.data {
        let v = if d.is_finite() {
            (255.0 * (1.0 - (d - lo) / span)) as u8
        } else {
            0
        };
        bytes.extend_from_slice(&[v, v, v]);
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Debug dump: first three feature channels as RGB PPM.
pub fn write_feature_ppm(map: &ViewFeatureMap, path: &Path) -> Result<(), RenderError> {
    let mut out = std::fs::File::create(path)?;
    writeln!(out, "P6\n{} {}\n255", map.width, map.height)?;
    let mut bytes = Vec::with_capacity((map.width * map.height) as usize * 3);
    for px in 0..(map.width * map.height) as usize {
        for c in 0..3 {
            let v = if c < map.channels {
                map.data[px * map.channels + c]
            } else {
                0.0
            };
            bytes.push((v.clamp(0.0, 1.0) * 255.0) as u8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_voxel_grid() -> SparseGrid {
        let mut g = SparseGrid::new([5, 5, 5], [1.0; 3], 3).unwrap();
        g.insert(VoxelCoord::new(2, 2, 2), vec![1.0, 0.0, 0.0]).unwrap();
        g
    }

    fn axis_camera() -> CameraPose {
        CameraPose {
            position: [-1.5, 2.5, 2.5],
            look_at: [2.5, 2.5, 2.5],
            up: [0.0, 0.0, 1.0],
            vfov: 0.9,
            width: 33,
            height: 33,
        }
    }

    #[test]
    fn single_voxel_depth_is_distance_minus_half_cell() {
        // Camera 4 m from the voxel center, face-on: first boundary at 3.5.
        let g = single_voxel_grid();
        let depth = raycast_depth(&g, &axis_camera()).unwrap();
        let d = depth.get(16, 16); // center pixel of a 33x33 image
        assert!((d - 3.5).abs() < 1e-9, "got {d}");
        // Corner pixel misses.
        assert!(depth.get(0, 0).is_infinite());
    }

    #[test]
    fn occluder_wins_depth() {
        let mut g = single_voxel_grid();
        g.insert(VoxelCoord::new(1, 2, 2), vec![0.0, 1.0, 0.0]).unwrap();
        let depth = raycast_depth(&g, &axis_camera()).unwrap();
        // Front face of the occluder at x=1: distance 2.5.
        assert!((depth.get(16, 16) - 2.5).abs() < 1e-9);
    }

    #[test]
    fn camera_inside_active_voxel_errors() {
        let g = single_voxel_grid();
        let cam = CameraPose {
            position: [2.5, 2.5, 2.5],
            look_at: [4.5, 2.5, 2.5],
            ..axis_camera()
        };
        assert!(matches!(
            raycast_depth(&g, &cam),
            Err(RenderError::CameraInsideVoxel)
        ));
    }

    #[test]
    fn degenerate_cameras_error() {
        let g = single_voxel_grid();
        let cam = CameraPose {
            look_at: [-1.5, 2.5, 2.5],
            ..axis_camera()
        };
        assert!(matches!(render_view(&g, &cam), Err(RenderError::BadCamera(_))));
        let cam2 = CameraPose {
            up: [1.0, 0.0, 0.0],
            ..axis_camera()
        };
        assert!(matches!(render_view(&g, &cam2), Err(RenderError::BadCamera(_))));
    }

    #[test]
    fn visibility_accepts_seen_rejects_hidden() {
        let mut g = single_voxel_grid();
        g.insert(VoxelCoord::new(3, 2, 2), vec![0.0, 0.0, 1.0]).unwrap();
        let cam = axis_camera();
        let depth = raycast_depth(&g, &cam).unwrap();
        let tau = default_tau(&g); // 0.75
        let mask = visibility_mask(&g, &cam, &depth, tau).unwrap();
        // Front voxel: |4.0 - 3.5| = 0.5 <= 0.75.
        assert_eq!(mask.get(&VoxelCoord::new(2, 2, 2)), Some(true));
        // Back voxel center is 5.0 away but the depth sample reads 3.5.
        assert_eq!(mask.get(&VoxelCoord::new(3, 2, 2)), Some(false));
    }

    #[test]
    fn every_cube_surface_voxel_is_seen_by_the_rig() {
        // Solid 4^3 cube centered in a 8^3 grid.
        let mut g = SparseGrid::new([8, 8, 8], [1.0; 3], 3).unwrap();
        for x in 2..6u16 {
            for y in 2..6u16 {
                for z in 2..6u16 {
                    g.insert(VoxelCoord::new(x, y, z), vec![0.5, 0.5, 0.5]).unwrap();
                }
            }
        }
        let views = render_rig(&g, 65, 0.8, 1.5).unwrap();
        assert_eq!(views.len(), 26);
        let tau = default_tau(&g);
        let mut visible: BTreeSet<VoxelCoord> = BTreeSet::new();
        for v in &views {
            let mask = visibility_mask(&g, &v.camera, &v.depth, tau).unwrap();
            for (c, bit) in mask.iter() {
                if bit {
                    visible.insert(*c);
                }
            }
        }
        for (c, _) in g.iter() {
            let on_surface = c.x == 2 || c.x == 5 || c.y == 2 || c.y == 5 || c.z == 2 || c.z == 5;
            if on_surface {
                assert!(visible.contains(c), "surface voxel {c:?} unseen");
            }
        }
    }

    /// Two-layer wall, red layer at x=5 and blue at x=6, with cameras on
    /// both sides. Occlusion-aware lifting keeps the colors separated;
    /// naive averaging bleeds blue into the red side.
    fn wall_scene() -> (SparseGrid, Vec<View>) {
        let mut g = SparseGrid::new([12, 12, 8], [1.0; 3], 3).unwrap();
        for y in 2..10u16 {
            for z in 0..8u16 {
                g.insert(VoxelCoord::new(5, y, z), vec![1.0, 0.0, 0.0]).unwrap();
                g.insert(VoxelCoord::new(6, y, z), vec![0.0, 0.0, 1.0]).unwrap();
            }
        }
        let mk = |x: f64| CameraPose {
            position: [x, 6.0, 4.0],
            look_at: [6.0, 6.0, 4.0],
            up: [0.0, 0.0, 1.0],
            vfov: 1.1,
            width: 64,
            height: 64,
        };
        let cams = [mk(-8.0), mk(20.0)];
        let views = cams
            .into_iter()
            .map(|camera| {
                let (depth, features) = render_view(&g, &camera).unwrap();
                View {
                    camera,
                    depth,
                    features,
                }
            })
            .collect();
        (g, views)
    }

    #[test]
    fn occlusion_aware_lifting_has_no_cross_face_contamination() {
        let (g, views) = wall_scene();
        let tau = default_tau(&g);
        let occ = g.occupancy();
        let aware = aggregate_features(&occ, &views, tau).unwrap();
        let naive = aggregate_features_naive(&occ, &views, tau).unwrap();
        let mut naive_contaminated = 0;
        for (c, _) in g.iter() {
            if c.x != 5 {
                continue; // red-side voxels
            }
            let f = aware.features.get(c).unwrap();
            if aware.unobserved.contains(c) {
                continue;
            }
            assert_eq!(f[2], 0.0, "aware lifting leaked blue into {c:?}");
            assert!(f[0] > 0.0, "red voxel lost its own color at {c:?}");
            let nf = naive.features.get(c).unwrap();
            if nf[2] > 0.0 {
                naive_contaminated += 1;
            }
        }
        assert!(
            naive_contaminated > 0,
            "naive averaging should contaminate at least one red voxel"
        );
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let (g, mut views) = wall_scene();
        let tau = default_tau(&g);
        let occ = g.occupancy();
        let a = aggregate_features(&occ, &views, tau).unwrap();
        views.reverse();
        let b = aggregate_features(&occ, &views, tau).unwrap();
        for ((ca, fa), (cb, fb)) in a.features.iter().zip(b.features.iter()) {
            assert_eq!(ca, cb);
            for (x, y) in fa.iter().zip(fb) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(a.unobserved, b.unobserved);
    }

    #[test]
    fn enclosed_voxels_are_flagged_unobserved() {
        // Solid cube: interior voxels are never visible.
        let mut g = SparseGrid::new([8, 8, 8], [1.0; 3], 3).unwrap();
        for x in 2..6u16 {
            for y in 2..6u16 {
                for z in 2..6u16 {
                    g.insert(VoxelCoord::new(x, y, z), vec![0.9, 0.9, 0.9]).unwrap();
                }
            }
        }
        let views = render_rig(&g, 65, 0.8, 1.5).unwrap();
        let lifted = aggregate_features(&g.occupancy(), &views, default_tau(&g)).unwrap();
        for x in 3..5u16 {
            for y in 3..5u16 {
                for z in 3..5u16 {
                    let c = VoxelCoord::new(x, y, z);
                    assert!(lifted.unobserved.contains(&c), "interior {c:?} not flagged");
                    assert_eq!(lifted.features.get(&c).unwrap(), &[0.0, 0.0, 0.0]);
                }
            }
        }
        // Surface voxels all carry their color.
        let c = VoxelCoord::new(2, 3, 3);
        assert!(!lifted.unobserved.contains(&c));
        assert!((lifted.features.get(&c).unwrap()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn ppm_dumps_have_valid_headers() {
        let g = single_voxel_grid();
        let (depth, feats) = render_view(&g, &axis_camera()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let dp = dir.path().join("d.ppm");
        let fp = dir.path().join("f.ppm");
        write_depth_ppm(&depth, &dp).unwrap();
        write_feature_ppm(&feats, &fp).unwrap();
        let d = std::fs::read(&dp).unwrap();
        assert!(d.starts_with(b"P6\n33 33\n255\n"));
        assert_eq!(d.len(), "P6\n33 33\n255\n".len() + 33 * 33 * 3);
        let f = std::fs::read(&fp).unwrap();
        assert!(f.starts_with(b"P6\n33 33\n255\n"));
    }
}
