//! Sparse voxel containers and resampling primitives.
//!
//! Conventions, used by every module downstream:
//! - all boxes are half-open `[lo, hi)` in voxel indices;
//! - voxel `p` covers the spatial box `origin + [p, p+1) * cell_size`, so its
//!   center sits at `origin + (p + 0.5) * cell_size`;
//! - feature channels are stored as `f32` (the on-disk width); dense numeric
//!   work happens in `f64`;
//! - sparse entries iterate in (x, y, z) lexicographic order, which is what
//!   makes serialization and hashing canonical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoxError {
    #[error("channel {channel} out of range (grid has {channels})")]
    ChannelOutOfRange { channel: usize, channels: usize },
    #[error("entry {coord:?} outside resolution {resolution:?}")]
    EntryOutOfBounds {
        coord: VoxelCoord,
        resolution: [u32; 3],
    },
    #[error("feature length {got} does not match channel count {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error("degenerate box: lo {lo:?} hi {hi:?}")]
    DegenerateBox { lo: [u32; 3], hi: [u32; 3] },
    #[error("box [{lo:?}, {hi:?}) outside resolution {resolution:?}")]
    BoxOutOfBounds {
        lo: [u32; 3],
        hi: [u32; 3],
        resolution: [u32; 3],
    },
    #[error("channel count mismatch: {expected} vs {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("paste source (resolution {src:?} at offset {offset:?}) exceeds destination {dst:?}")]
    PasteOutOfBounds {
        src: [u32; 3],
        offset: [u32; 3],
        dst: [u32; 3],
    },
    #[error("resolution {0:?} exceeds the 16-bit coordinate range")]
    ResolutionTooLarge([u32; 3]),
    #[error("upsample factor must be >= 1, got {0:?}")]
    BadFactor([u32; 3]),
    #[error("invalid block frame: {0}")]
    BadFrame(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

/// Voxel lattice index. 16-bit per axis, matching the on-disk record width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VoxelCoord {
    pub x: u16,
    pub y: u16,
    pub z: u16,
}

impl VoxelCoord {
    pub fn new(x: u16, y: u16, z: u16) -> Self {
        VoxelCoord { x, y, z }
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.x as u32, self.y as u32, self.z as u32]
    }
}

/// Resolution level of a block or world layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

impl Level {
    pub fn tag(self) -> u8 {
        match self {
            Level::Coarse => 0,
            Level::Fine => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, VoxError> {
        match tag {
            0 => Ok(Level::Coarse),
            1 => Ok(Level::Fine),
            other => Err(VoxError::Format(format!("unknown level tag {other}"))),
        }
    }
}

/// Placement of a block on the world lattice.
///
/// Fine blocks are w x w x h meters with w = h; coarse blocks cover
/// w_c = 2h in XY at the same voxel resolution, so their XY cells are
/// twice as wide as their Z cells. `resolution` is N, divisible by 8 so
/// the 1/8-window fractions of the growth schedule are integral.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFrame {
    pub level: Level,
    pub lattice_index: (i64, i64),
    pub origin: [f64; 3],
    pub width: f64,
    pub height: f64,
    pub resolution: u32,
}

impl BlockFrame {
    pub fn new(
        level: Level,
        lattice_index: (i64, i64),
        origin: [f64; 3],
        width: f64,
        height: f64,
        resolution: u32,
    ) -> Result<Self, VoxError> {
        if resolution == 0 || resolution % 8 != 0 {
            return Err(VoxError::BadFrame(format!(
                "resolution {resolution} must be a positive multiple of 8"
            )));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(VoxError::BadFrame("non-positive extent".into()));
        }
        let ratio = width / height;
        let want = match level {
            Level::Fine => 1.0,
            Level::Coarse => 2.0,
        };
        if (ratio - want).abs() > 1e-9 {
            return Err(VoxError::BadFrame(format!(
                "width/height ratio {ratio} does not match level (want {want})"
            )));
        }
        Ok(BlockFrame {
            level,
            lattice_index,
            origin,
            width,
            height,
            resolution,
        })
    }

    /// Meters per voxel along each axis.
    pub fn cell_size(&self) -> [f32; 3] {
        let n = self.resolution as f64;
        [
            (self.width / n) as f32,
            (self.width / n) as f32,
            (self.height / n) as f32,
        ]
    }

    pub fn resolution3(&self) -> [u32; 3] {
        [self.resolution, self.resolution, self.resolution]
    }
}

/// Sparse feature grid: active voxels with one f32 vector each.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    resolution: [u32; 3],
    cell_size: [f32; 3],
    channels: usize,
    entries: BTreeMap<VoxelCoord, Vec<f32>>,
}

impl SparseGrid {
    pub fn new(resolution: [u32; 3], cell_size: [f32; 3], channels: usize) -> Result<Self, VoxError> {
        if resolution.iter().any(|&r| r == 0 || r > u16::MAX as u32 + 1) {
            return Err(VoxError::ResolutionTooLarge(resolution));
        }
        Ok(SparseGrid {
            resolution,
            cell_size,
            channels,
            entries: BTreeMap::new(),
        })
    }

    pub fn resolution(&self) -> [u32; 3] {
        self.resolution
    }

    pub fn cell_size(&self) -> [f32; 3] {
        self.cell_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn check_coord(&self, coord: VoxelCoord) -> Result<(), VoxError> {
        let [x, y, z] = coord.as_array();
        if x >= self.resolution[0] || y >= self.resolution[1] || z >= self.resolution[2] {
            return Err(VoxError::EntryOutOfBounds {
                coord,
                resolution: self.resolution,
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, coord: VoxelCoord, feature: Vec<f32>) -> Result<(), VoxError> {
        self.check_coord(coord)?;
        if feature.len() != self.channels {
            return Err(VoxError::FeatureLength {
                expected: self.channels,
                got: feature.len(),
            });
        }
        self.entries.insert(coord, feature);
        Ok(())
    }

    pub fn remove(&mut self, coord: &VoxelCoord) -> Option<Vec<f32>> {
        self.entries.remove(coord)
    }

    pub fn get(&self, coord: &VoxelCoord) -> Option<&[f32]> {
        self.entries.get(coord).map(|v| v.as_slice())
    }

    pub fn is_active(&self, coord: &VoxelCoord) -> bool {
        self.entries.contains_key(coord)
    }

    /// Entries in (x, y, z) lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelCoord, &[f32])> {
        self.entries.iter().map(|(c, v)| (c, v.as_slice()))
    }

    pub fn coords(&self) -> impl Iterator<Item = &VoxelCoord> {
        self.entries.keys()
    }

    /// Active voxels as a C=1 occupancy grid with value 1.0.
    pub fn occupancy(&self) -> SparseGrid {
        let mut out = SparseGrid::new(self.resolution, self.cell_size, 1).expect("same resolution");
        for coord in self.entries.keys() {
            out.entries.insert(*coord, vec![1.0]);
        }
        out
    }
}

/// Dense scalar volume, f64, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    resolution: [u32; 3],
    data: Vec<f64>,
}

impl DenseVolume {
    pub fn zeros(resolution: [u32; 3]) -> Self {
        let n = resolution.iter().map(|&r| r as usize).product();
        DenseVolume {
            resolution,
            data: vec![0.0; n],
        }
    }

    pub fn resolution(&self) -> [u32; 3] {
        self.resolution
    }

    fn index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.resolution[0] && y < self.resolution[1] && z < self.resolution[2]);
        (x as usize)
            + (self.resolution[0] as usize) * ((y as usize) + (self.resolution[1] as usize) * (z as usize))
    }

    pub fn get(&self, x: u32, y: u32, z: u32) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: u32, y: u32, z: u32, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Dense 0/1 mask over a full box.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMask {
    resolution: [u32; 3],
    bits: Vec<bool>,
}

impl DenseMask {
    pub fn filled(resolution: [u32; 3], value: bool) -> Self {
        let n = resolution.iter().map(|&r| r as usize).product();
        DenseMask {
            resolution,
            bits: vec![value; n],
        }
    }

    pub fn resolution(&self) -> [u32; 3] {
        self.resolution
    }

    fn index(&self, x: u32, y: u32, z: u32) -> usize {
        debug_assert!(x < self.resolution[0] && y < self.resolution[1] && z < self.resolution[2]);
        (x as usize)
            + (self.resolution[0] as usize) * ((y as usize) + (self.resolution[1] as usize) * (z as usize))
    }

    pub fn get(&self, x: u32, y: u32, z: u32) -> bool {
        self.bits[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: u32, y: u32, z: u32, v: bool) {
        let i = self.index(x, y, z);
        self.bits[i] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Sparse 0/1 mask over listed coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseMask {
    entries: BTreeMap<VoxelCoord, bool>,
}

impl SparseMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, coord: VoxelCoord, v: bool) {
        self.entries.insert(coord, v);
    }

    pub fn get(&self, coord: &VoxelCoord) -> Option<bool> {
        self.entries.get(coord).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelCoord, bool)> {
        self.entries.iter().map(|(c, &b)| (c, b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Extract one channel as a dense volume; absent voxels read 0.
pub fn dense_from_sparse(grid: &SparseGrid, channel: usize) -> Result<DenseVolume, VoxError> {
    if channel >= grid.channels() {
        return Err(VoxError::ChannelOutOfRange {
            channel,
            channels: grid.channels(),
        });
    }
    let mut vol = DenseVolume::zeros(grid.resolution());
    for (coord, feat) in grid.iter() {
        let [x, y, z] = coord.as_array();
        vol.set(x, y, z, feat[channel] as f64);
    }
    Ok(vol)
}

/// Entries inside `[lo, hi)`, re-indexed to box-local coordinates.
pub fn crop(grid: &SparseGrid, lo: [u32; 3], hi: [u32; 3]) -> Result<SparseGrid, VoxError> {
    if (0..3).any(|a| lo[a] >= hi[a]) {
        return Err(VoxError::DegenerateBox { lo, hi });
    }
    if (0..3).any(|a| hi[a] > grid.resolution()[a]) {
        return Err(VoxError::BoxOutOfBounds {
            lo,
            hi,
            resolution: grid.resolution(),
        });
    }
    let size = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = SparseGrid::new(size, grid.cell_size(), grid.channels())?;
    for (coord, feat) in grid.iter() {
        let [x, y, z] = coord.as_array();
        if x >= lo[0] && x < hi[0] && y >= lo[1] && y < hi[1] && z >= lo[2] && z < hi[2] {
            let local = VoxelCoord::new((x - lo[0]) as u16, (y - lo[1]) as u16, (z - lo[2]) as u16);
            out.entries.insert(local, feat.to_vec());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasteMode {
    Replace,
    KeepExisting,
}

/// Place `src` into `dst` at `offset`. Pure; returns the merged grid.
pub fn paste(
    dst: &SparseGrid,
    src: &SparseGrid,
    offset: [u32; 3],
    mode: PasteMode,
) -> Result<SparseGrid, VoxError> {
    if src.channels() != dst.channels() {
        return Err(VoxError::ChannelMismatch {
            expected: dst.channels(),
            got: src.channels(),
        });
    }
    if (0..3).any(|a| offset[a] + src.resolution()[a] > dst.resolution()[a]) {
        return Err(VoxError::PasteOutOfBounds {
            src: src.resolution(),
            offset,
            dst: dst.resolution(),
        });
    }
    let mut out = dst.clone();
    for (coord, feat) in src.iter() {
        let [x, y, z] = coord.as_array();
        let global = VoxelCoord::new(
            (x + offset[0]) as u16,
            (y + offset[1]) as u16,
            (z + offset[2]) as u16,
        );
        match mode {
            PasteMode::Replace => {
                out.entries.insert(global, feat.to_vec());
            }
            PasteMode::KeepExisting => {
                out.entries.entry(global).or_insert_with(|| feat.to_vec());
            }
        }
    }
    Ok(out)
}

/// Trilinear upsampling with clamp-to-edge padding. Input samples sit at
/// cell centers; output cell `j` samples input position `(j + 0.5)/f - 0.5`.
/// Implemented as three separable axis passes.
pub fn trilinear_upsample(vol: &DenseVolume, factor: [u32; 3]) -> Result<DenseVolume, VoxError> {
    if factor.iter().any(|&f| f == 0) {
        return Err(VoxError::BadFactor(factor));
    }
    let mut cur = vol.clone();
    for axis in 0..3 {
        if factor[axis] == 1 {
            continue;
        }
        cur = upsample_axis(&cur, axis, factor[axis]);
    }
    Ok(cur)
}

fn upsample_axis(vol: &DenseVolume, axis: usize, f: u32) -> DenseVolume {
    let res = vol.resolution();
    let mut out_res = res;
    out_res[axis] = res[axis] * f;
    let mut out = DenseVolume::zeros(out_res);
    let n = res[axis] as i64;
    for z in 0..out_res[2] {
        for y in 0..out_res[1] {
            for x in 0..out_res[0] {
                let j = [x, y, z][axis] as f64;
                let pos = (j + 0.5) / f as f64 - 0.5;
                let i0 = pos.floor();
                let w = pos - i0;
                let ia = (i0 as i64).clamp(0, n - 1) as u32;
                let ib = (i0 as i64 + 1).clamp(0, n - 1) as u32;
                let mut src_a = [x, y, z];
                let mut src_b = [x, y, z];
                src_a[axis] = ia;
                src_b[axis] = ib;
                let va = vol.get(src_a[0], src_a[1], src_a[2]);
                let vb = vol.get(src_b[0], src_b[1], src_b[2]);
                out.set(x, y, z, (1.0 - w) * va + w * vb);
            }
        }
    }
    out
}

/// Binarize a dense volume: active iff value >= theta. Output is a C=1
/// occupancy grid with value 1.0.
pub fn threshold_occupancy(
    vol: &DenseVolume,
    theta: f64,
    cell_size: [f32; 3],
) -> Result<SparseGrid, VoxError> {
    let res = vol.resolution();
    let mut out = SparseGrid::new(res, cell_size, 1)?;
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                if vol.get(x, y, z) >= theta {
                    out.entries
                        .insert(VoxelCoord::new(x as u16, y as u16, z as u16), vec![1.0]);
                }
            }
        }
    }
    Ok(out)
}

// --- WGB1 sparse block format ---
//
// Header: magic "WGB1", level tag u8, resolution 3 x u32, cell_size 3 x f32,
// channel count u32, entry count u64 (all little-endian). Records follow in
// strictly ascending (x, y, z) order: x, y, z as u16 plus C f32 values.
// Strict ordering makes the byte stream canonical for a given grid.

const WGB1_MAGIC: &[u8; 4] = b"WGB1";

pub fn write_wgb1<W: Write>(w: &mut W, grid: &SparseGrid, level: Level) -> Result<(), VoxError> {
    w.write_all(WGB1_MAGIC)?;
    w.write_all(&[level.tag()])?;
    for r in grid.resolution() {
        w.write_all(&r.to_le_bytes())?;
    }
    for c in grid.cell_size() {
        w.write_all(&c.to_le_bytes())?;
    }
    w.write_all(&(grid.channels() as u32).to_le_bytes())?;
    w.write_all(&(grid.len() as u64).to_le_bytes())?;
    for (coord, feat) in grid.iter() {
        w.write_all(&coord.x.to_le_bytes())?;
        w.write_all(&coord.y.to_le_bytes())?;
        w.write_all(&coord.z.to_le_bytes())?;
        for v in feat {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_wgb1<R: Read>(r: &mut R) -> Result<(SparseGrid, Level), VoxError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| VoxError::Format("truncated header".into()))?;
    if &magic != WGB1_MAGIC {
        return Err(VoxError::Format(format!("bad magic {magic:?}")));
    }
    let level = Level::from_tag(read_u8(r)?)?;
    let resolution = [read_u32(r)?, read_u32(r)?, read_u32(r)?];
    let cell_size = [read_f32(r)?, read_f32(r)?, read_f32(r)?];
    let channels = read_u32(r)? as usize;
    let count = read_u64(r)?;
    let mut grid = SparseGrid::new(resolution, cell_size, channels)?;
    let mut prev: Option<VoxelCoord> = None;
    for _ in 0..count {
        let coord = VoxelCoord::new(read_u16(r)?, read_u16(r)?, read_u16(r)?);
        if let Some(p) = prev {
            if coord <= p {
                return Err(VoxError::Format(format!(
                    "entries out of order or duplicated at {coord:?}"
                )));
            }
        }
        prev = Some(coord);
        let mut feat = Vec::with_capacity(channels);
        for _ in 0..channels {
            feat.push(read_f32(r)?);
        }
        grid.insert(coord, feat)?;
    }
    Ok((grid, level))
}

pub fn save_wgb1(path: &Path, grid: &SparseGrid, level: Level) -> Result<(), VoxError> {
    let mut buf = Vec::new();
    write_wgb1(&mut buf, grid, level)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_wgb1(path: &Path) -> Result<(SparseGrid, Level), VoxError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(bytes);
    read_wgb1(&mut cursor)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, VoxError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)
        .map_err(|_| VoxError::Format("truncated payload".into()))?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, VoxError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| VoxError::Format("truncated payload".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, VoxError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| VoxError::Format("truncated payload".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, VoxError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| VoxError::Format("truncated payload".into()))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, VoxError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| VoxError::Format("truncated payload".into()))?;
    Ok(f32::from_le_bytes(b))
}
