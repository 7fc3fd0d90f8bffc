//! Linear structured-latent codec and mesh extraction.
//!
//! The encoder E maps per-voxel features (C_f channels) to latents (C_z
//! channels, C_z >= C_f); the decoder D maps latents back to C_f feature
//! channels plus one occupancy-confidence channel. In fixed_orthonormal
//! mode E has orthonormal columns and the feature rows of D equal E
//! transposed, so decode(encode(f)) = f. trained_linear keeps E and
//! refits D by ridge least squares on scene-block voxels; only D moves,
//! mirroring decoder-only retraining. Neither mode ever changes the
//! active voxel set.
//!
//! Confidence is clamp(raw + 0.5, 0, 1): the fixed decoder has a zero
//! confidence row, so untrained confidence sits at the 0.5 meshing
//! threshold and every active voxel still meshes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::seeds;
use crate::voxcore::{BlockFrame, SparseGrid, VoxError, VoxelCoord};

/// Default latent width C_z.
pub const LATENT_CHANNELS: usize = 8;
/// Meshing threshold on decoded confidence.
pub const CONFIDENCE_THRESHOLD: f32 = 0.5;

const PARAMS_MAGIC: &[u8; 4] = b"WGCP";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("bad codec dimensions: {0}")]
    BadDims(String),
    #[error("empty training set")]
    EmptyFit,
    #[error("voxel error: {0}")]
    Vox(#[from] VoxError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodecMode {
    FixedOrthonormal,
    TrainedLinear,
}

impl CodecMode {
    fn tag(self) -> u8 {
        match self {
            CodecMode::FixedOrthonormal => 0,
            CodecMode::TrainedLinear => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self, CodecError> {
        match t {
            0 => Ok(CodecMode::FixedOrthonormal),
            1 => Ok(CodecMode::TrainedLinear),
            _ => Err(CodecError::Format(format!("unknown codec mode {t}"))),
        }
    }
}

/// Encoder/decoder matrices. `e` is C_z x C_f row-major, `d` is
/// (C_f + 1) x C_z row-major with the last row producing raw confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub mode: CodecMode,
    pub seed: u64,
    c_f: usize,
    c_z: usize,
    e: Vec<f32>,
    d: Vec<f32>,
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; columns of
/// the input that survive become orthonormal columns of the output.
fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> Option<Vec<f64>> {
    let mut rng = seeds::rng_for(seed, seeds::tag::CODEC, 0);
    for attempt in 0..16u64 {
        if attempt > 0 {
            rng = seeds::rng_for(seed, seeds::tag::CODEC, attempt);
        }
        // Any full-rank draw works; orthonormalization removes the
        // distribution anyway.
        let mut q: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let col = |q: &Vec<f64>, j: usize, r: usize| q[r * cols + j];
        let mut ok = true;
        for j in 0..cols {
            for _pass in 0..2 {
                for k in 0..j {
                    let mut dot = 0.0;
                    for r in 0..rows {
                        dot += col(&q, j, r) * col(&q, k, r);
                    }
                    for r in 0..rows {
                        q[r * cols + j] -= dot * q[r * cols + k];
                    }
                }
            }
            let mut n = 0.0;
            for r in 0..rows {
                n += col(&q, j, r) * col(&q, j, r);
            }
            let n = n.sqrt();
            if n < 1e-9 {
                ok = false;
                break;
            }
            for r in 0..rows {
                q[r * cols + j] /= n;
            }
        }
        if ok {
            return Some(q);
        }
    }
    None
}

impl CodecParams {
    /// Seeded encoder with orthonormal columns and D = [E^T; 0].
    pub fn fixed_orthonormal(c_f: usize, c_z: usize, seed: u64) -> Result<Self, CodecError> {
        if c_f == 0 || c_z < c_f {
            return Err(CodecError::BadDims(format!(
                "need 0 < C_f <= C_z, got C_f={c_f} C_z={c_z}"
            )));
        }
        let e64 = orthonormal_columns(c_z, c_f, seed)
            .ok_or_else(|| CodecError::BadDims("orthonormalization failed".into()))?;
        let e: Vec<f32> = e64.iter().map(|&v| v as f32).collect();
        let mut d = vec![0.0f32; (c_f + 1) * c_z];
        for r in 0..c_f {
            for c in 0..c_z {
                d[r * c_z + c] = e[c * c_f + r]; // transpose
            }
        }
        Ok(CodecParams {
            mode: CodecMode::FixedOrthonormal,
            seed,
            c_f,
            c_z,
            e,
            d,
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.c_f
    }

    pub fn latent_channels(&self) -> usize {
        self.c_z
    }

    /// Encoder matrix entry E[r][c] (r over latents, c over features).
    pub fn e_entry(&self, r: usize, c: usize) -> f32 {
        self.e[r * self.c_f + c]
    }

    /// Decoder matrix entry D[r][c] (r over features + confidence).
    pub fn d_entry(&self, r: usize, c: usize) -> f32 {
        self.d[r * self.c_z + c]
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.push(1u8); // version
        out.push(self.mode.tag());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.c_f as u32).to_le_bytes());
        out.extend_from_slice(&(self.c_z as u32).to_le_bytes());
        for &v in self.e.iter().chain(self.d.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let mut f = std::fs::File::open(path)?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let mut at = 0usize;
        let take = |buf: &[u8], at: &mut usize, n: usize| -> Result<Vec<u8>, CodecError> {
            if *at + n > buf.len() {
                return Err(CodecError::Format("truncated codec params".into()));
            }
            let s = buf[*at..*at + n].to_vec();
            *at += n;
            Ok(s)
        };
        let magic = take(&buf, &mut at, 4)?;
        if magic != PARAMS_MAGIC {
            return Err(CodecError::Format("bad magic".into()));
        }
        let version = take(&buf, &mut at, 1)?[0];
        if version != 1 {
            return Err(CodecError::Format(format!("unknown version {version}")));
        }
        let mode = CodecMode::from_tag(take(&buf, &mut at, 1)?[0])?;
        let seed = u64::from_le_bytes(take(&buf, &mut at, 8)?.try_into().unwrap());
        let c_f = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
        let c_z = u32::from_le_bytes(take(&buf, &mut at, 4)?.try_into().unwrap()) as usize;
        if c_f == 0 || c_z < c_f {
            return Err(CodecError::Format("bad dimensions".into()));
        }
        let mut floats = |n: usize| -> Result<Vec<f32>, CodecError> {
            let raw = take(&buf, &mut at, n * 4)?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let e = floats(c_z * c_f)?;
        let d = floats((c_f + 1) * c_z)?;
        if at != buf.len() {
            return Err(CodecError::Format("trailing bytes".into()));
        }
        Ok(CodecParams {
            mode,
            seed,
            c_f,
            c_z,
            e,
            d,
        })
    }
}

/// Latents for one block; the active set always equals the structure
/// active set of the block it was encoded from.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub frame: BlockFrame,
    pub latents: SparseGrid,
}

/// Per-voxel z = E f. Active set preserved.
pub fn encode(
    frame: &BlockFrame,
    features: &SparseGrid,
    params: &CodecParams,
) -> Result<LatentBlock, CodecError> {
    if features.channels() != params.c_f {
        return Err(CodecError::ChannelMismatch {
            expected: params.c_f,
            got: features.channels(),
        });
    }
    let mut latents = SparseGrid::new(features.resolution(), features.cell_size(), params.c_z)?;
    for (coord, f) in features.iter() {
        let mut z = vec![0.0f32; params.c_z];
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (c, &fc) in f.iter().enumerate() {
                acc += params.e[r * params.c_f + c] as f64 * fc as f64;
            }
            *zr = acc as f32;
        }
        latents.insert(*coord, z)?;
    }
    Ok(LatentBlock {
        frame: frame.clone(),
        latents,
    })
}

/// Decoded features plus per-voxel occupancy confidence in [0, 1].
#[derive(Debug, Clone)]
pub struct Decoded {
    pub features: SparseGrid,
    pub confidence: BTreeMap<VoxelCoord, f32>,
}

/// Per-voxel [f; raw] = D z, confidence = clamp(raw + 0.5, 0, 1).
pub fn decode_grid(latents: &SparseGrid, params: &CodecParams) -> Result<Decoded, CodecError> {
    if latents.channels() != params.c_z {
        return Err(CodecError::ChannelMismatch {
            expected: params.c_z,
            got: latents.channels(),
        });
    }
    let mut features = SparseGrid::new(latents.resolution(), latents.cell_size(), params.c_f)?;
    let mut confidence = BTreeMap::new();
    for (coord, z) in latents.iter() {
        let mut out = vec![0.0f64; params.c_f + 1];
        for (r, o) in out.iter_mut().enumerate() {
            for (c, &zc) in z.iter().enumerate() {
                *o += params.d[r * params.c_z + c] as f64 * zc as f64;
            }
        }
        let f: Vec<f32> = out[..params.c_f].iter().map(|&v| v as f32).collect();
        features.insert(*coord, f)?;
        confidence.insert(*coord, ((out[params.c_f] + 0.5).clamp(0.0, 1.0)) as f32);
    }
    Ok(Decoded {
        features,
        confidence,
    })
}

pub fn decode(latent: &LatentBlock, params: &CodecParams) -> Result<Decoded, CodecError> {
    decode_grid(&latent.latents, params)
}

/// Refit the decoder rows by ridge least squares on the given feature
/// grids (encoded with the existing E, which stays fixed). Feature rows
/// target f, the confidence row targets raw 0.5 so decoded confidence
/// approaches 1 on occupied voxels.
pub fn fit_trained(
    base: &CodecParams,
    blocks: &[&SparseGrid],
    ridge: f64,
) -> Result<CodecParams, CodecError> {
    let (c_f, c_z) = (base.c_f, base.c_z);
    // Normal equations: (Z^T Z + ridge I) X = Z^T Y with D = X^T.
    let mut ata = vec![0.0f64; c_z * c_z];
    let mut aty = vec![0.0f64; c_z * (c_f + 1)];
    let mut count = 0usize;
    for grid in blocks {
        if grid.channels() != c_f {
            return Err(CodecError::ChannelMismatch {
                expected: c_f,
                got: grid.channels(),
            });
        }
        for (_, f) in grid.iter() {
            let mut z = vec![0.0f64; c_z];
            for (r, zr) in z.iter_mut().enumerate() {
                for (c, &fc) in f.iter().enumerate() {
                    *zr += base.e[r * c_f + c] as f64 * fc as f64;
                }
            }
            for r in 0..c_z {
                for c in 0..c_z {
                    ata[r * c_z + c] += z[r] * z[c];
                }
                for (c, &fc) in f.iter().enumerate() {
                    aty[r * (c_f + 1) + c] += z[r] * fc as f64;
                }
                aty[r * (c_f + 1) + c_f] += z[r] * 0.5;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(CodecError::EmptyFit);
    }
    for i in 0..c_z {
        ata[i * c_z + i] += ridge;
    }
    let x = solve_multi(&mut ata, &mut aty, c_z, c_f + 1)
        .ok_or_else(|| CodecError::BadDims("singular normal equations".into()))?;
    let mut d = vec![0.0f32; (c_f + 1) * c_z];
    for r in 0..c_f + 1 {
        for c in 0..c_z {
            d[r * c_z + c] = x[c * (c_f + 1) + r] as f32;
        }
    }
    Ok(CodecParams {
        mode: CodecMode::TrainedLinear,
        seed: base.seed,
        c_f,
        c_z,
        e: base.e.clone(),
        d,
    })
}

/// Gaussian elimination with partial pivoting, `nrhs` right-hand sides.
/// `a` is n x n, `b` is n x nrhs; returns the solution matrix (n x nrhs).
fn solve_multi(a: &mut [f64], b: &mut [f64], n: usize, nrhs: usize) -> Option<Vec<f64>> {
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if a[r * n + k].abs() > a[piv * n + k].abs() {
                piv = r;
            }
        }
        if a[piv * n + k].abs() < 1e-12 {
            return None;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            for c in 0..nrhs {
                b.swap(k * nrhs + c, piv * nrhs + c);
            }
        }
        for r in k + 1..n {
            let m = a[r * n + k] / a[k * n + k];
            if m == 0.0 {
                continue;
            }
            for c in k..n {
                a[r * n + c] -= m * a[k * n + c];
            }
            for c in 0..nrhs {
                b[r * nrhs + c] -= m * b[k * nrhs + c];
            }
        }
    }
    let mut x = vec![0.0f64; n * nrhs];
    for c in 0..nrhs {
        for r in (0..n).rev() {
            let mut acc = b[r * nrhs + c];
            for j in r + 1..n {
                acc -= a[r * n + j] * x[j * nrhs + c];
            }
            x[r * nrhs + c] = acc / a[r * n + r];
        }
    }
    Some(x)
}

/// Mean per-voxel squared reconstruction error through the codec,
/// including the confidence channel against its target of 1. The fixed
/// codec reconstructs features exactly but pays (0.5 - 1)^2 = 0.25 per
/// voxel on confidence, which is exactly the headroom decoder retraining
/// recovers.
pub fn reconstruction_error(
    frame: &BlockFrame,
    features: &SparseGrid,
    params: &CodecParams,
) -> Result<f64, CodecError> {
    let latent = encode(frame, features, params)?;
    let decoded = decode(&latent, params)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (coord, f) in features.iter() {
        let fh = decoded.features.get(coord).expect("active set preserved");
        for (a, b) in f.iter().zip(fh) {
            let d = *a as f64 - *b as f64;
            total += d * d;
        }
        let conf = decoded.confidence[coord] as f64;
        total += (conf - 1.0) * (conf - 1.0);
        count += 1;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Indexed triangle mesh with per-face color.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<MeshFace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshFace {
    pub indices: [u32; 3],
    pub color: [u8; 3],
}

impl TriMesh {
    pub fn empty() -> Self {
        TriMesh {
            vertices: Vec::new(),
            faces: Vec::new(),
        }
    }
}

/// Corner offsets per cube face, ordered so (b-a) x (c-a) points outward;
/// each quad (a, b, c, d) becomes triangles (a, b, c) and (a, c, d).
/// Order: -x, +x, -y, +y, -z, +z.
const FACE_CORNERS: [([i32; 3], [[u32; 3]; 4]); 6] = [
    ([-1, 0, 0], [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
    ([1, 0, 0], [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
    ([0, -1, 0], [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
    ([0, 1, 0], [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
    ([0, 0, -1], [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
    ([0, 0, 1], [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
];

/// Exposed-face surface of the voxel solid {active and confidence >= 0.5}.
/// Voxels missing from `confidence` count as fully confident, so raw
/// feature grids mesh directly with an empty map. Face color comes from
/// the voxel's first three channels.
pub fn extract_mesh(features: &SparseGrid, confidence: &BTreeMap<VoxelCoord, f32>) -> TriMesh {
    let solid = |c: &VoxelCoord| -> bool {
        features.is_active(c)
            && confidence
                .get(c)
                .map(|&v| v >= CONFIDENCE_THRESHOLD)
                .unwrap_or(true)
    };
    let cell = features.cell_size();
    let mut corner_index: BTreeMap<(u32, u32, u32), u32> = BTreeMap::new();
    let mut mesh = TriMesh::empty();
    for (coord, f) in features.iter() {
        if !solid(coord) {
            continue;
        }
        let color = face_color(f);
        let [x, y, z] = coord.as_array();
        for (normal, corners) in &FACE_CORNERS {
            let nb = [
                x as i64 + normal[0] as i64,
                y as i64 + normal[1] as i64,
                z as i64 + normal[2] as i64,
            ];
            let res = features.resolution();
            let covered = nb[0] >= 0
                && nb[1] >= 0
                && nb[2] >= 0
                && nb[0] < res[0] as i64
                && nb[1] < res[1] as i64
                && nb[2] < res[2] as i64
                && solid(&VoxelCoord::new(nb[0] as u16, nb[1] as u16, nb[2] as u16));
            if covered {
                continue;
            }
            let mut quad = [0u32; 4];
            for (q, off) in quad.iter_mut().zip(corners) {
                let key = (x + off[0], y + off[1], z + off[2]);
                let next = corner_index.len() as u32;
                let idx = *corner_index.entry(key).or_insert(next);
                if idx == next {
                    mesh.vertices.push([
                        key.0 as f32 * cell[0],
                        key.1 as f32 * cell[1],
                        key.2 as f32 * cell[2],
                    ]);
                }
                *q = idx;
            }
            mesh.faces.push(MeshFace {
                indices: [quad[0], quad[1], quad[2]],
                color,
            });
            mesh.faces.push(MeshFace {
                indices: [quad[0], quad[2], quad[3]],
                color,
            });
        }
    }
    mesh
}

fn face_color(f: &[f32]) -> [u8; 3] {
    let mut color = [180u8; 3];
    for (c, slot) in color.iter_mut().enumerate() {
        if c < f.len() {
            *slot = (f[c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    color
}

/// Binary little-endian PLY with float vertices and per-face RGB.
pub fn export_ply(mesh: &TriMesh, path: &Path) -> Result<(), CodecError> {
    let mut out = std::fs::File::create(path)?;
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )?;
    let mut body = Vec::with_capacity(mesh.vertices.len() * 12 + mesh.faces.len() * 16);
    for v in &mesh.vertices {
        for c in v {
            body.extend_from_slice(&c.to_le_bytes());
        }
    }
    for f in &mesh.faces {
        body.push(3u8);
        for i in f.indices {
            body.extend_from_slice(&i.to_le_bytes());
        }
        body.extend_from_slice(&f.color);
    }
    out.write_all(&body)?;
    Ok(())
}

pub fn import_ply(path: &Path) -> Result<TriMesh, CodecError> {
    let buf = std::fs::read(path)?;
    let header_end = buf
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| CodecError::Format("missing end_header".into()))?
        + 11;
    let header = std::str::from_utf8(&buf[..header_end])
        .map_err(|_| CodecError::Format("non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(CodecError::Format("not a PLY file".into()));
    }
    if lines.next() != Some("format binary_little_endian 1.0") {
        return Err(CodecError::Format("unsupported PLY format".into()));
    }
    let mut n_vertex: Option<usize> = None;
    let mut n_face: Option<usize> = None;
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["element", "vertex", n] => {
                n_vertex = Some(n.parse().map_err(|_| {
                    CodecError::Format("bad vertex count".into())
                })?)
            }
            ["element", "face", n] => {
                n_face = Some(n.parse().map_err(|_| {
                    CodecError::Format("bad face count".into())
                })?)
            }
            ["property", ..] | ["comment", ..] | ["end_header"] => {}
            _ => return Err(CodecError::Format(format!("unexpected header line: {line}"))),
        }
    }
    let n_vertex = n_vertex.ok_or_else(|| CodecError::Format("no vertex element".into()))?;
    let n_face = n_face.ok_or_else(|| CodecError::Format("no face element".into()))?;
    let mut at = header_end;
    let need = n_vertex * 12 + n_face * 16;
    if buf.len() - at != need {
        return Err(CodecError::Format(format!(
            "body size {} does not match elements (want {need})",
            buf.len() - at
        )));
    }
    let mut mesh = TriMesh::empty();
    for _ in 0..n_vertex {
        let mut v = [0.0f32; 3];
        for c in &mut v {
            *c = f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
            at += 4;
        }
        mesh.vertices.push(v);
    }
    for _ in 0..n_face {
        let count = buf[at];
        at += 1;
        if count != 3 {
            return Err(CodecError::Format(format!("non-triangle face ({count})")));
        }
        let mut indices = [0u32; 3];
        for i in &mut indices {
            *i = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
            at += 4;
        }
        let color = [buf[at], buf[at + 1], buf[at + 2]];
        at += 3;
        for &i in &indices {
            if i as usize >= n_vertex {
                return Err(CodecError::Format("face index out of range".into()));
            }
        }
        mesh.faces.push(MeshFace { indices, color });
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::{self, WorldParams, FEATURE_CHANNELS};
    use crate::voxcore::Level;

    fn frame32() -> BlockFrame {
        BlockFrame::new(Level::Fine, (0, 0), [0.0; 3], 3.0, 3.0, 32).unwrap()
    }

    fn small_feature_grid(seed: u64) -> SparseGrid {
        let mut rng = seeds::rng(seed);
        let mut g = SparseGrid::new([32, 32, 32], [0.09375; 3], FEATURE_CHANNELS).unwrap();
        for _ in 0..64 {
            let c = VoxelCoord::new(
                rng.gen_range(0..32),
                rng.gen_range(0..32),
                rng.gen_range(0..32),
            );
            let f: Vec<f32> = (0..FEATURE_CHANNELS).map(|_| rng.gen_range(0.0..1.0)).collect();
            let _ = g.insert(c, f);
        }
        g
    }

    #[test]
    fn encoder_columns_are_orthonormal() {
        let p = CodecParams::fixed_orthonormal(6, 8, 11).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                let mut dot = 0.0f64;
                for r in 0..8 {
                    dot += p.e_entry(r, a) as f64 * p.e_entry(r, b) as f64;
                }
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "E^T E [{a}][{b}] = {dot}");
            }
        }
    }

    #[test]
    fn fixed_decoder_features_are_encoder_transpose() {
        let p = CodecParams::fixed_orthonormal(6, 8, 3).unwrap();
        for r in 0..6 {
            for c in 0..8 {
                assert_eq!(p.d_entry(r, c), p.e_entry(c, r));
            }
        }
        // Confidence row is zero, so raw confidence at any latent scale
        // stays 0 and decoded confidence is exactly 0.5.
        for c in 0..8 {
            assert_eq!(p.d_entry(6, c), 0.0);
        }
    }

    #[test]
    fn zero_features_encode_to_zero_latents() {
        let p = CodecParams::fixed_orthonormal(6, 8, 5).unwrap();
        let mut g = SparseGrid::new([32, 32, 32], [1.0; 3], 6).unwrap();
        g.insert(VoxelCoord::new(1, 2, 3), vec![0.0; 6]).unwrap();
        let lat = encode(&frame32(), &g, &p).unwrap();
        assert_eq!(lat.latents.get(&VoxelCoord::new(1, 2, 3)).unwrap(), &[0.0f32; 8]);
    }

    #[test]
    fn round_trip_is_exact_for_square_and_tall_encoders() {
        for (c_f, c_z) in [(6usize, 6usize), (6, 8)] {
            let p = CodecParams::fixed_orthonormal(c_f, c_z, 17).unwrap();
            let mut g = SparseGrid::new([32, 32, 32], [1.0; 3], c_f).unwrap();
            let f: Vec<f32> = (0..c_f).map(|i| 0.1 + 0.13 * i as f32).collect();
            g.insert(VoxelCoord::new(4, 5, 6), f.clone()).unwrap();
            let decoded = decode(&encode(&frame32(), &g, &p).unwrap(), &p).unwrap();
            let fh = decoded.features.get(&VoxelCoord::new(4, 5, 6)).unwrap();
            for (a, b) in f.iter().zip(fh) {
                assert!((a - b).abs() <= 1e-5, "{a} vs {b} (C_z={c_z})");
            }
            assert!((decoded.confidence[&VoxelCoord::new(4, 5, 6)] - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn active_set_is_preserved_both_ways() {
        let p = CodecParams::fixed_orthonormal(6, 8, 23).unwrap();
        let g = small_feature_grid(100);
        let lat = encode(&frame32(), &g, &p).unwrap();
        let dec = decode(&lat, &p).unwrap();
        let coords: Vec<_> = g.iter().map(|(c, _)| *c).collect();
        let lat_coords: Vec<_> = lat.latents.iter().map(|(c, _)| *c).collect();
        let dec_coords: Vec<_> = dec.features.iter().map(|(c, _)| *c).collect();
        assert_eq!(coords, lat_coords);
        assert_eq!(coords, dec_coords);
        assert_eq!(coords.len(), dec.confidence.len());
    }

    #[test]
    fn decode_is_linear_in_the_feature_channels() {
        let p = CodecParams::fixed_orthonormal(6, 8, 29).unwrap();
        let frame = frame32();
        let mut g = SparseGrid::new([32, 32, 32], [1.0; 3], 6).unwrap();
        let f = vec![0.2f32, 0.4, 0.6, 0.1, 0.3, 0.5];
        g.insert(VoxelCoord::new(0, 0, 0), f.clone()).unwrap();
        let z1 = encode(&frame, &g, &p).unwrap();
        let mut z3 = z1.clone();
        let scaled: Vec<f32> = z1
            .latents
            .get(&VoxelCoord::new(0, 0, 0))
            .unwrap()
            .iter()
            .map(|v| v * 3.0)
            .collect();
        z3.latents.insert(VoxelCoord::new(0, 0, 0), scaled).unwrap();
        let d1 = decode(&z1, &p).unwrap();
        let d3 = decode(&z3, &p).unwrap();
        let f1 = d1.features.get(&VoxelCoord::new(0, 0, 0)).unwrap();
        let f3 = d3.features.get(&VoxelCoord::new(0, 0, 0)).unwrap();
        for (a, b) in f1.iter().zip(f3) {
            assert!((3.0 * a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let p = CodecParams::fixed_orthonormal(6, 8, 31).unwrap();
        let g = SparseGrid::new([32, 32, 32], [1.0; 3], 4).unwrap();
        assert!(matches!(
            encode(&frame32(), &g, &p),
            Err(CodecError::ChannelMismatch { expected: 6, got: 4 })
        ));
    }

    /// Decoder retraining on scene blocks beats the fixed decoder on a
    /// held-out block: the fixed codec pays 0.25 per voxel in confidence
    /// error and the refit recovers most of it.
    #[test]
    fn trained_decoder_beats_fixed_on_held_out_block() {
        let world = procgen::generate_world(WorldParams::new(808, 2)).unwrap();
        let res = world.grid.resolution();
        let frame = frame32();
        let mk_box = |lo: [u32; 3]| {
            crate::voxcore::crop(&world.grid, lo, [lo[0] + 32, lo[1] + 32, lo[2] + 32]).unwrap()
        };
        assert!(res[0] >= 96 && res[1] >= 48, "world too small: {res:?}");
        let train_a = mk_box([8, 8, 0]);
        let train_b = mk_box([40, 8, 0]);
        let held_out = mk_box([72, 8, 0]);
        assert!(train_a.len() + train_b.len() >= 1000, "need 1000 training voxels");
        assert!(held_out.len() >= 200);
        let fixed = CodecParams::fixed_orthonormal(FEATURE_CHANNELS, LATENT_CHANNELS, 7).unwrap();
        let trained = fit_trained(&fixed, &[&train_a, &train_b], 1e-8).unwrap();
        assert_eq!(trained.mode, CodecMode::TrainedLinear);
        let err_fixed = reconstruction_error(&frame, &held_out, &fixed).unwrap();
        let err_trained = reconstruction_error(&frame, &held_out, &trained).unwrap();
        assert!((err_fixed - 0.25).abs() < 1e-9, "fixed error {err_fixed}");
        assert!(
            err_trained < err_fixed,
            "trained {err_trained} not below fixed {err_fixed}"
        );
    }

    #[test]
    fn params_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.bin");
        let p = CodecParams::fixed_orthonormal(6, 8, 99).unwrap();
        p.save(&path).unwrap();
        let q = CodecParams::load(&path).unwrap();
        assert_eq!(p, q);
        let g = small_feature_grid(1);
        let trained = fit_trained(&p, &[&g], 1e-8).unwrap();
        trained.save(&path).unwrap();
        assert_eq!(trained, CodecParams::load(&path).unwrap());
    }

    fn solo_voxel_features() -> SparseGrid {
        let mut g = SparseGrid::new([4, 4, 4], [1.0; 3], 6).unwrap();
        g.insert(VoxelCoord::new(1, 1, 1), vec![1.0, 0.5, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        g
    }

    #[test]
    fn empty_grid_gives_empty_mesh() {
        let g = SparseGrid::new([4, 4, 4], [1.0; 3], 6).unwrap();
        let mesh = extract_mesh(&g, &BTreeMap::new());
        assert!(mesh.vertices.is_empty() && mesh.faces.is_empty());
    }

    #[test]
    fn single_voxel_meshes_to_a_topological_sphere() {
        let mesh = extract_mesh(&solo_voxel_features(), &BTreeMap::new());
        assert_eq!(mesh.vertices.len(), 8);
        assert_eq!(mesh.faces.len(), 12);
        // Count undirected edges; Euler characteristic must be 2.
        let mut edges = std::collections::BTreeSet::new();
        for f in &mesh.faces {
            let [a, b, c] = f.indices;
            for (u, v) in [(a, b), (b, c), (c, a)] {
                edges.insert((u.min(v), u.max(v)));
            }
        }
        let euler = mesh.vertices.len() as i64 - edges.len() as i64 + mesh.faces.len() as i64;
        assert_eq!(euler, 2);
        assert_eq!(mesh.faces[0].color, [255, 128, 0]);
    }

    #[test]
    fn adjacent_voxels_share_the_hidden_face() {
        let mut g = solo_voxel_features();
        g.insert(VoxelCoord::new(2, 1, 1), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let mesh = extract_mesh(&g, &BTreeMap::new());
        assert_eq!(mesh.faces.len(), 20); // 10 exposed quads
    }

    #[test]
    fn low_confidence_voxels_do_not_mesh() {
        let mut g = solo_voxel_features();
        g.insert(VoxelCoord::new(2, 1, 1), vec![0.0; 6]).unwrap();
        let mut conf = BTreeMap::new();
        conf.insert(VoxelCoord::new(1, 1, 1), 0.5f32); // threshold is inclusive
        conf.insert(VoxelCoord::new(2, 1, 1), 0.49f32);
        let mesh = extract_mesh(&g, &conf);
        assert_eq!(mesh.faces.len(), 12);
    }

    #[test]
    fn face_normals_point_away_from_the_solid_centroid() {
        let mesh = extract_mesh(&solo_voxel_features(), &BTreeMap::new());
        let centroid = [1.5f32, 1.5, 1.5];
        for f in &mesh.faces {
            let [a, b, c] = f.indices.map(|i| mesh.vertices[i as usize]);
            let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let n = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let fc = [
                (a[0] + b[0] + c[0]) / 3.0 - centroid[0],
                (a[1] + b[1] + c[1]) / 3.0 - centroid[1],
                (a[2] + b[2] + c[2]) / 3.0 - centroid[2],
            ];
            let dot = n[0] * fc[0] + n[1] * fc[1] + n[2] * fc[2];
            assert!(dot > 0.0, "inward-facing triangle {:?}", f.indices);
        }
    }

    #[test]
    fn ply_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ply");
        let p2 = dir.path().join("b.ply");
        let mesh = extract_mesh(&solo_voxel_features(), &BTreeMap::new());
        export_ply(&mesh, &p1).unwrap();
        let back = import_ply(&p1).unwrap();
        assert_eq!(back.vertices.len(), 8);
        assert_eq!(back.faces.len(), 12);
        assert_eq!(mesh, back);
        export_ply(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_mesh_exports_a_valid_ply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ply");
        export_ply(&TriMesh::empty(), &path).unwrap();
        let back = import_ply(&path).unwrap();
        assert!(back.vertices.is_empty() && back.faces.is_empty());
    }
}
