//! Unbounded scene growth. A seed window is generated from scratch, then an
//! overlap schedule slides half-window expansion steps across the plane:
//! each step keeps a 3/8-window committed margin as hard context, regenerates
//! the rest, and re-commits the whole window. Refinement upsamples the coarse
//! result 2x in XY and renoises block by block; an appearance pass fills
//! latents over the committed structure with the same window schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{self, CodecError, CodecParams};
use crate::flowgen::{self, ConditionVector, ConditionedField, FlowError, GeneratorModel, StageTag};
use crate::inpaint::{self, InpaintError};
use crate::seeds;
use crate::voxcore::{
    self, BlockFrame, DenseMask, DenseVolume, Level, SparseGrid, SparseMask, VoxError, VoxelCoord,
};

pub const DEFAULT_WINDOW: u32 = 32;
pub const DEFAULT_T_PRIME: f64 = 0.4;

#[derive(Debug, Error)]
pub enum GrowError {
    #[error("bad plan: {0}")]
    BadPlan(String),
    #[error("step ({ix}, {iy}): context voxel ({x}, {y}, {z}) not committed")]
    ContextNotCommitted { ix: u32, iy: u32, x: u32, y: u32, z: u32 },
    #[error("model stage {got} where {expected} is required")]
    WrongStage { expected: &'static str, got: &'static str },
    #[error("t' = {0} outside (0, 1)")]
    BadTPrime(f64),
    #[error("latent coverage incomplete: {0}")]
    IncompleteCoverage(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<GrowError>,
    },
    #[error("serialize: {0}")]
    Format(String),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Inpaint(#[from] InpaintError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn stage_err(stage: &'static str) -> impl FnOnce(GrowError) -> GrowError {
    move |e| GrowError::Stage {
        stage,
        source: Box::new(e),
    }
}

/// One window axis: the leading `context_len` voxels are kept as hard
/// context (0 on seed rows/columns, 3w/8 elsewhere), the rest is inpainted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisSplit {
    pub origin: u32,
    pub context_len: u32,
    pub window: u32,
}

impl AxisSplit {
    pub fn window_range(&self) -> (u32, u32) {
        (self.origin, self.origin + self.window)
    }

    pub fn context_range(&self) -> (u32, u32) {
        (self.origin, self.origin + self.context_len)
    }

    pub fn inpaint_range(&self) -> (u32, u32) {
        (self.origin + self.context_len, self.origin + self.window)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionStep {
    pub index: (u32, u32),
    pub x: AxisSplit,
    pub y: AxisSplit,
    /// Steps whose output this window reads: left, top, top-left.
    pub deps: Vec<(u32, u32)>,
}

impl ExpansionStep {
    pub fn origin(&self) -> (u32, u32) {
        (self.x.origin, self.y.origin)
    }

    pub fn is_seed(&self) -> bool {
        self.x.context_len == 0 && self.y.context_len == 0
    }

    /// Context membership in window-local XY. The context region is the
    /// union of the per-axis margins (an L shape when both are present).
    pub fn in_context(&self, lx: u32, ly: u32) -> bool {
        lx < self.x.context_len || ly < self.y.context_len
    }

    /// Dense window mask, true where content is regenerated.
    pub fn window_mask(&self, depth: u32) -> DenseMask {
        let mut m = DenseMask::filled([self.x.window, self.y.window, depth], true);
        for lx in 0..self.x.window {
            for ly in 0..self.y.window {
                if self.in_context(lx, ly) {
                    for z in 0..depth {
                        m.set(lx, ly, z, false);
                    }
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub w_vox: u32,
    pub steps: Vec<ExpansionStep>,
}

impl ExpansionPlan {
    /// Committed XY extent in voxels after all steps run.
    pub fn extent(&self) -> (u32, u32) {
        let x = self.steps.iter().map(|s| s.x.window_range().1).max();
        let y = self.steps.iter().map(|s| s.y.window_range().1).max();
        (x.unwrap_or(0), y.unwrap_or(0))
    }

    pub fn step(&self, index: (u32, u32)) -> Option<&ExpansionStep> {
        self.steps.iter().find(|s| s.index == index)
    }
}

fn check_window(w_vox: u32) -> Result<(), GrowError> {
    if w_vox == 0 || w_vox % 8 != 0 {
        return Err(GrowError::BadPlan(format!(
            "window {w_vox} must be a positive multiple of 8"
        )));
    }
    Ok(())
}

fn build_steps(steps_x: u32, steps_y: u32, stride: u32, w_vox: u32) -> Vec<ExpansionStep> {
    let margin = 3 * w_vox / 8;
    let mut steps = Vec::with_capacity((steps_x * steps_y) as usize);
    for iy in 0..steps_y {
        for ix in 0..steps_x {
            let axis = |i: u32| AxisSplit {
                origin: i * stride,
                context_len: if i > 0 { margin } else { 0 },
                window: w_vox,
            };
            let mut deps = Vec::new();
            if ix > 0 {
                deps.push((ix - 1, iy));
            }
            if iy > 0 {
                deps.push((ix, iy - 1));
            }
            if ix > 0 && iy > 0 {
                deps.push((ix - 1, iy - 1));
            }
            steps.push(ExpansionStep {
                index: (ix, iy),
                x: axis(ix),
                y: axis(iy),
                deps,
            });
        }
    }
    steps
}

/// Overlap schedule for an n_x x n_y block target: windows advance by w/2
/// per axis in raster order, so the frontier after k steps on one axis is
/// w + k w/2 and (2n - 1)^2 steps commit an extent of exactly n w.
pub fn plan_expansion(n_x: u32, n_y: u32, w_vox: u32) -> Result<ExpansionPlan, GrowError> {
    check_window(w_vox)?;
    if n_x == 0 || n_y == 0 {
        return Err(GrowError::BadPlan("block target must be nonzero".into()));
    }
    Ok(ExpansionPlan {
        w_vox,
        steps: build_steps(2 * n_x - 1, 2 * n_y - 1, w_vox / 2, w_vox),
    })
}

/// Disjoint partition used by refinement: same window/margin conventions
/// but stride w, one step per block.
pub fn plan_partition(blocks_x: u32, blocks_y: u32, w_vox: u32) -> Result<ExpansionPlan, GrowError> {
    check_window(w_vox)?;
    if blocks_x == 0 || blocks_y == 0 {
        return Err(GrowError::BadPlan("block target must be nonzero".into()));
    }
    Ok(ExpansionPlan {
        w_vox,
        steps: build_steps(blocks_x, blocks_y, w_vox, w_vox),
    })
}

/// Growth state shared by the three stages. Coarse cells are anisotropic
/// (2c, 2c, c); the fine lattice doubles the coarse XY resolution at the
/// same height, and latents live on the fine lattice.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub w_vox: u32,
    pub coarse: SparseGrid,
    pub fine: SparseGrid,
    pub latents: SparseGrid,
    pub coarse_committed: DenseMask,
    pub coarse_provisional: DenseMask,
}

impl WorldState {
    pub fn new(
        blocks: (u32, u32),
        w_vox: u32,
        fine_cell: f32,
        latent_channels: usize,
    ) -> Result<Self, GrowError> {
        check_window(w_vox)?;
        if blocks.0 == 0 || blocks.1 == 0 {
            return Err(GrowError::BadPlan("block target must be nonzero".into()));
        }
        let (ex, ey, ez) = (blocks.0 * w_vox, blocks.1 * w_vox, w_vox);
        let c = fine_cell;
        Ok(WorldState {
            w_vox,
            coarse: SparseGrid::new([ex, ey, ez], [2.0 * c, 2.0 * c, c], 1)?,
            fine: SparseGrid::new([2 * ex, 2 * ey, ez], [c, c, c], 1)?,
            latents: SparseGrid::new([2 * ex, 2 * ey, ez], [c, c, c], latent_channels)?,
            coarse_committed: DenseMask::filled([ex, ey, ez], false),
            coarse_provisional: DenseMask::filled([ex, ey, ez], false),
        })
    }

    fn mark_committed(&mut self, step: &ExpansionStep) {
        let (x0, x1) = step.x.window_range();
        let (y0, y1) = step.y.window_range();
        let depth = self.coarse.resolution()[2];
        for x in x0..x1 {
            for y in y0..y1 {
                for z in 0..depth {
                    self.coarse_committed.set(x, y, z, true);
                    self.coarse_provisional.set(x, y, z, false);
                }
            }
        }
        // Newly generated content within the trailing 1/8 window of either
        // frontier stays provisional until a later window regenerates it.
        let strip = step.x.window / 8;
        let (ix0, ix1) = step.x.inpaint_range();
        let (iy0, iy1) = step.y.inpaint_range();
        for x in (x1 - strip)..x1 {
            for y in iy0..iy1 {
                for z in 0..depth {
                    self.coarse_provisional.set(x, y, z, true);
                }
            }
        }
        for x in ix0..ix1 {
            for y in (y1 - strip)..y1 {
                for z in 0..depth {
                    self.coarse_provisional.set(x, y, z, true);
                }
            }
        }
    }

    pub fn provisional_voxels(&self) -> u64 {
        self.coarse_provisional.count_ones() as u64
    }
}

/// Schedule row plus integrity evidence for the run report: region digests
/// before and after the step and the committed occupancy count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub index: (u32, u32),
    pub window: ((u32, u32), (u32, u32)),
    pub context_len: (u32, u32),
    pub context_sha_before: String,
    pub context_sha_after: String,
    pub inpaint_sha: String,
    pub active_after: u64,
    pub seconds: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Canonical digest of a voxel box: coords ascending x, y, z; one 0 byte
/// per inactive voxel, a 1 byte plus little-endian channels per active one.
pub fn box_hash(grid: &SparseGrid, lo: [u32; 3], hi: [u32; 3]) -> String {
    let mut h = Sha256::new();
    for x in lo[0]..hi[0] {
        for y in lo[1]..hi[1] {
            for z in lo[2]..hi[2] {
                match grid.get(&VoxelCoord::new(x as u16, y as u16, z as u16)) {
                    Some(f) => {
                        h.update([1u8]);
                        for v in f {
                            h.update(v.to_le_bytes());
                        }
                    }
                    None => h.update([0u8]),
                }
            }
        }
    }
    hex(&h.finalize())
}

fn step_region_hash(grid: &SparseGrid, step: &ExpansionStep, context: bool) -> String {
    let mut h = Sha256::new();
    let (x0, _) = step.x.window_range();
    let (y0, _) = step.y.window_range();
    let depth = grid.resolution()[2];
    for lx in 0..step.x.window {
        for ly in 0..step.y.window {
            if step.in_context(lx, ly) != context {
                continue;
            }
            for z in 0..depth {
                let coord = VoxelCoord::new((x0 + lx) as u16, (y0 + ly) as u16, z as u16);
                match grid.get(&coord) {
                    Some(f) => {
                        h.update([1u8]);
                        for v in f {
                            h.update(v.to_le_bytes());
                        }
                    }
                    None => h.update([0u8]),
                }
            }
        }
    }
    hex(&h.finalize())
}

pub fn context_hash(grid: &SparseGrid, step: &ExpansionStep) -> String {
    step_region_hash(grid, step, true)
}

pub fn inpaint_hash(grid: &SparseGrid, step: &ExpansionStep) -> String {
    step_region_hash(grid, step, false)
}

fn step_key(index: (u32, u32)) -> u64 {
    ((index.1 as u64) << 32) | index.0 as u64
}

fn require_model(model: &GeneratorModel, stage: StageTag) -> Result<(), GrowError> {
    if model.stage == stage {
        return Ok(());
    }
    Err(GrowError::WrongStage {
        expected: stage.name(),
        got: model.stage.name(),
    })
}

/// Replace the box starting at `lo` with `vol` thresholded at 0.5: occupied
/// voxels become active with value 1, the rest are cleared.
fn commit_dense(grid: &mut SparseGrid, lo: [u32; 3], vol: &DenseVolume) -> Result<(), GrowError> {
    let res = vol.resolution();
    for x in 0..res[0] {
        for y in 0..res[1] {
            for z in 0..res[2] {
                let coord = VoxelCoord::new(
                    (lo[0] + x) as u16,
                    (lo[1] + y) as u16,
                    (lo[2] + z) as u16,
                );
                if vol.get(x, y, z) >= 0.5 {
                    grid.insert(coord, vec![1.0])?;
                } else {
                    grid.remove(&coord);
                }
            }
        }
    }
    Ok(())
}

/// Replace every latent entry inside [lo, hi) with the entries of `block`
/// (block coords are local to `lo`).
fn commit_latents(
    grid: &mut SparseGrid,
    lo: [u32; 3],
    hi: [u32; 3],
    block: &SparseGrid,
) -> Result<(), GrowError> {
    let stale: Vec<VoxelCoord> = grid
        .coords()
        .filter(|c| {
            let [x, y, z] = c.as_array();
            (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z)
        })
        .copied()
        .collect();
    for c in stale {
        grid.remove(&c);
    }
    for (coord, feat) in block.iter() {
        let [x, y, z] = coord.as_array();
        grid.insert(
            VoxelCoord::new((lo[0] + x) as u16, (lo[1] + y) as u16, (lo[2] + z) as u16),
            feat.to_vec(),
        )?;
    }
    Ok(())
}

fn window_active(grid: &SparseGrid, lo: [u32; 3], hi: [u32; 3]) -> u64 {
    grid.coords()
        .filter(|c| {
            let [x, y, z] = c.as_array();
            (lo[0]..hi[0]).contains(&x) && (lo[1]..hi[1]).contains(&y) && (lo[2]..hi[2]).contains(&z)
        })
        .count() as u64
}

/// Generate a seed window from scratch: a full-mask structure inpaint over
/// an empty volume.
pub fn seed_block(
    model: &GeneratorModel,
    w_vox: u32,
    depth: u32,
    condition: &ConditionVector,
    sample_steps: u32,
    seed: u64,
) -> Result<DenseVolume, GrowError> {
    require_model(model, StageTag::CoarseStructure)?;
    let zeros = DenseVolume::zeros([w_vox, w_vox, depth]);
    let mask = DenseMask::filled([w_vox, w_vox, depth], true);
    Ok(inpaint::inpaint_structure(
        model,
        &zeros,
        &mask,
        condition,
        sample_steps,
        seed,
    )?)
}

/// Run one coarse expansion step: verify the context is committed, inpaint
/// the window, and re-commit it whole. The hard constraint keeps the
/// context bits identical, which the returned record certifies.
pub fn run_coarse_step(
    state: &mut WorldState,
    model: &GeneratorModel,
    step: &ExpansionStep,
    condition: &ConditionVector,
    sample_steps: u32,
    run_seed: u64,
) -> Result<StepRecord, GrowError> {
    require_model(model, StageTag::CoarseStructure)?;
    let t0 = Instant::now();
    let res = state.coarse.resolution();
    let (x0, x1) = step.x.window_range();
    let (y0, y1) = step.y.window_range();
    if x1 > res[0] || y1 > res[1] {
        return Err(GrowError::BadPlan(format!(
            "window ({x0}, {y0})..({x1}, {y1}) exceeds extent {res:?}"
        )));
    }
    let depth = res[2];
    for lx in 0..step.x.window {
        for ly in 0..step.y.window {
            if !step.in_context(lx, ly) {
                continue;
            }
            for z in 0..depth {
                if !state.coarse_committed.get(x0 + lx, y0 + ly, z) {
                    return Err(GrowError::ContextNotCommitted {
                        ix: step.index.0,
                        iy: step.index.1,
                        x: x0 + lx,
                        y: y0 + ly,
                        z,
                    });
                }
            }
        }
    }
    let context_sha_before = context_hash(&state.coarse, step);
    let lo = [x0, y0, 0];
    let hi = [x1, y1, depth];
    let known_vol = voxcore::dense_from_sparse(&voxcore::crop(&state.coarse, lo, hi)?, 0)?;
    let m_s = step.window_mask(depth);
    let seed = seeds::derive(run_seed, seeds::tag::GROW_COARSE, step_key(step.index));
    let out = inpaint::inpaint_structure(model, &known_vol, &m_s, condition, sample_steps, seed)?;
    commit_dense(&mut state.coarse, lo, &out)?;
    state.mark_committed(step);
    Ok(StepRecord {
        index: step.index,
        window: ((x0, x1), (y0, y1)),
        context_len: (step.x.context_len, step.y.context_len),
        context_sha_before,
        context_sha_after: context_hash(&state.coarse, step),
        inpaint_sha: inpaint_hash(&state.coarse, step),
        active_after: window_active(&state.coarse, lo, hi),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Execute the whole coarse schedule in raster order.
pub fn grow_coarse(
    state: &mut WorldState,
    model: &GeneratorModel,
    plan: &ExpansionPlan,
    condition: &ConditionVector,
    sample_steps: u32,
    run_seed: u64,
) -> Result<Vec<StepRecord>, GrowError> {
    let res = state.coarse.resolution();
    let extent = plan.extent();
    if extent != (res[0], res[1]) {
        return Err(GrowError::BadPlan(format!(
            "plan extent {extent:?} does not match coarse grid {res:?}"
        )));
    }
    let mut records = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        records.push(run_coarse_step(
            state,
            model,
            step,
            condition,
            sample_steps,
            run_seed,
        )?);
    }
    Ok(records)
}

/// Sharpen the coarse result on the fine lattice. The coarse occupancy is
/// trilinearly upsampled 2x in XY, binarized at 0.5, and committed as the
/// initial fine state; each w^2-column block is then renoised to t' and
/// denoised for ceil(t' S) Euler steps with its margins held as context.
/// As t' -> 0 the output converges to the thresholded upsample exactly.
pub fn refine_fine(
    state: &mut WorldState,
    model: &GeneratorModel,
    condition: &ConditionVector,
    t_prime: f64,
    sample_steps: u32,
    run_seed: u64,
) -> Result<Vec<StepRecord>, GrowError> {
    require_model(model, StageTag::FineStructure)?;
    if !(t_prime > 0.0 && t_prime < 1.0) {
        return Err(GrowError::BadTPrime(t_prime));
    }
    if sample_steps == 0 {
        return Err(GrowError::BadPlan("sample steps must be >= 1".into()));
    }
    let up = voxcore::trilinear_upsample(&voxcore::dense_from_sparse(&state.coarse, 0)?, [2, 2, 1])?;
    let fres = state.fine.resolution();
    if up.resolution() != fres {
        return Err(GrowError::BadPlan(format!(
            "upsampled coarse {:?} does not match fine grid {fres:?}",
            up.resolution()
        )));
    }
    let mut bin = DenseVolume::zeros(fres);
    for x in 0..fres[0] {
        for y in 0..fres[1] {
            for z in 0..fres[2] {
                bin.set(x, y, z, if up.get(x, y, z) >= 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
    commit_dense(&mut state.fine, [0, 0, 0], &bin)?;

    let w = state.w_vox;
    let plan = plan_partition(fres[0] / w, fres[1] / w, w)?;
    let depth = fres[2];
    let k_steps = (t_prime * sample_steps as f64).ceil() as u32;
    let mut records = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        let t0 = Instant::now();
        let (x0, x1) = step.x.window_range();
        let (y0, y1) = step.y.window_range();
        let lo = [x0, y0, 0];
        let hi = [x1, y1, depth];
        let context_sha_before = context_hash(&state.fine, step);
        let known_vol = voxcore::dense_from_sparse(&voxcore::crop(&state.fine, lo, hi)?, 0)?;
        let m_s = step.window_mask(depth);
        let l0 = flowgen::tokenize_occupancy(&known_vol)?;
        let mask_tok = flowgen::tokenize_mask(&m_s)?;
        let known = flowgen::known_tokens(&l0, &mask_tok)?;
        let field = ConditionedField {
            model,
            mask: &mask_tok,
            known: &known,
            condition,
        };
        let seed = seeds::derive(run_seed, seeds::tag::GROW_REFINE, step_key(step.index));
        let mut rng = seeds::rng(seed);
        let eps = l0.gaussian_like(&mut rng);
        let noisy = flowgen::add_noise(&l0, t_prime, &eps)?;
        let out_tok = flowgen::sample_from(&field, noisy, t_prime, k_steps)?;
        let mut out = flowgen::detokenize_occupancy(&out_tok, m_s.resolution())?;
        for x in 0..step.x.window {
            for y in 0..step.y.window {
                for z in 0..depth {
                    if m_s.get(x, y, z) {
                        out.set(x, y, z, if out.get(x, y, z) >= 0.5 { 1.0 } else { 0.0 });
                    } else {
                        out.set(x, y, z, known_vol.get(x, y, z));
                    }
                }
            }
        }
        commit_dense(&mut state.fine, lo, &out)?;
        records.push(StepRecord {
            index: step.index,
            window: ((x0, x1), (y0, y1)),
            context_len: (step.x.context_len, step.y.context_len),
            context_sha_before,
            context_sha_after: context_hash(&state.fine, step),
            inpaint_sha: inpaint_hash(&state.fine, step),
            active_after: window_active(&state.fine, lo, hi),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

/// Fill latents over the committed fine structure with the expansion
/// schedule: each window inpaints latents at the active voxels of its
/// inpaint region conditioned on the context-region latents, which are
/// hard-preserved. Empty windows are recorded and skipped.
pub fn grow_appearance(
    state: &mut WorldState,
    model: &GeneratorModel,
    plan: &ExpansionPlan,
    condition: &ConditionVector,
    sample_steps: u32,
    run_seed: u64,
) -> Result<Vec<StepRecord>, GrowError> {
    require_model(model, StageTag::FineLatent)?;
    let fres = state.fine.resolution();
    let extent = plan.extent();
    if extent != (fres[0], fres[1]) {
        return Err(GrowError::BadPlan(format!(
            "plan extent {extent:?} does not match fine grid {fres:?}"
        )));
    }
    let depth = fres[2];
    let cell = state.fine.cell_size();
    let mut records = Vec::with_capacity(plan.steps.len());
    for step in &plan.steps {
        let t0 = Instant::now();
        let (x0, x1) = step.x.window_range();
        let (y0, y1) = step.y.window_range();
        let lo = [x0, y0, 0];
        let hi = [x1, y1, depth];
        let context_sha_before = context_hash(&state.latents, step);
        let structure = voxcore::crop(&state.fine, lo, hi)?;
        if structure.len() > 0 {
            let known = voxcore::crop(&state.latents, lo, hi)?;
            let mut m_l = SparseMask::new();
            for coord in structure.coords() {
                let [lx, ly, _] = coord.as_array();
                m_l.set(*coord, !step.in_context(lx, ly));
            }
            let frame = BlockFrame::new(
                Level::Fine,
                (step.index.0 as i64, step.index.1 as i64),
                [x0 as f64 * cell[0] as f64, y0 as f64 * cell[1] as f64, 0.0],
                step.x.window as f64 * cell[0] as f64,
                depth as f64 * cell[2] as f64,
                step.x.window,
            )?;
            let seed = seeds::derive(run_seed, seeds::tag::GROW_LATENT, step_key(step.index));
            let block = inpaint::inpaint_latent(
                model,
                &frame,
                &structure,
                &known,
                &m_l,
                condition,
                sample_steps,
                seed,
            )?;
            commit_latents(&mut state.latents, lo, hi, &block.latents)?;
        }
        records.push(StepRecord {
            index: step.index,
            window: ((x0, x1), (y0, y1)),
            context_len: (step.x.context_len, step.y.context_len),
            context_sha_before,
            context_sha_after: context_hash(&state.latents, step),
            inpaint_sha: inpaint_hash(&state.latents, step),
            active_after: window_active(&state.latents, lo, hi),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(records)
}

/// Every active fine voxel must carry exactly one latent entry and vice
/// versa once the appearance pass is done.
pub fn verify_latent_coverage(state: &WorldState) -> Result<(), GrowError> {
    if state.latents.len() != state.fine.len() {
        return Err(GrowError::IncompleteCoverage(format!(
            "{} latents for {} active voxels",
            state.latents.len(),
            state.fine.len()
        )));
    }
    for coord in state.fine.coords() {
        if !state.latents.is_active(coord) {
            return Err(GrowError::IncompleteCoverage(format!(
                "no latent at {:?}",
                coord.as_array()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowConfig {
    /// Target extent in coarse blocks.
    pub extent: (u32, u32),
    pub w_vox: u32,
    /// Fine cell edge in metres; coarse cells are twice as wide in XY.
    pub fine_cell: f32,
    pub t_prime: f64,
    pub sample_steps: u32,
    pub seed: u64,
    pub condition_seed: u64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        GrowConfig {
            extent: (1, 1),
            w_vox: DEFAULT_WINDOW,
            fine_cell: 3.0 / 32.0,
            t_prime: DEFAULT_T_PRIME,
            sample_steps: flowgen::DEFAULT_SAMPLE_STEPS,
            seed: 0,
            condition_seed: 0,
        }
    }
}

pub struct StageModels<'a> {
    pub coarse: &'a GeneratorModel,
    pub fine: &'a GeneratorModel,
    pub latent: &'a GeneratorModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(with = "seeds::hex")]
    pub seed: u64,
    #[serde(with = "seeds::hex")]
    pub condition_seed: u64,
    pub extent_blocks: (u32, u32),
    pub w_vox: u32,
    pub t_prime: f64,
    pub sample_steps: u32,
    pub coarse_extent: [u32; 3],
    pub fine_extent: [u32; 3],
    pub coarse_active: u64,
    pub fine_active: u64,
    pub latent_active: u64,
    pub provisional_voxels: u64,
    pub stage_seconds: BTreeMap<String, f64>,
    pub coarse_steps: Vec<StepRecord>,
    pub refine_steps: Vec<StepRecord>,
    pub latent_steps: Vec<StepRecord>,
}

impl RunReport {
    pub fn to_toml(&self) -> Result<String, GrowError> {
        toml::to_string(self).map_err(|e| GrowError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, GrowError> {
        toml::from_str(text).map_err(|e| GrowError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), GrowError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GrowError> {
        RunReport::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Full pipeline: seed and expand the coarse structure, refine it on the
/// fine lattice, then fill latents. Any stage failure aborts with the
/// stage name attached.
pub fn generate_world(
    models: &StageModels,
    cfg: &GrowConfig,
) -> Result<(WorldState, RunReport), GrowError> {
    require_model(models.coarse, StageTag::CoarseStructure)?;
    require_model(models.fine, StageTag::FineStructure)?;
    require_model(models.latent, StageTag::FineLatent)?;
    let mut state = WorldState::new(
        cfg.extent,
        cfg.w_vox,
        cfg.fine_cell,
        models.latent.token_channels(),
    )?;
    let mut stage_seconds = BTreeMap::new();

    let plan = plan_expansion(cfg.extent.0, cfg.extent.1, cfg.w_vox)?;
    let cond = ConditionVector::from_seed(cfg.condition_seed, models.coarse.condition_len());
    let t0 = Instant::now();
    let coarse_steps = grow_coarse(&mut state, models.coarse, &plan, &cond, cfg.sample_steps, cfg.seed)
        .map_err(stage_err("coarse"))?;
    stage_seconds.insert("coarse".into(), t0.elapsed().as_secs_f64());

    let cond = ConditionVector::from_seed(cfg.condition_seed, models.fine.condition_len());
    let t0 = Instant::now();
    let refine_steps = refine_fine(
        &mut state,
        models.fine,
        &cond,
        cfg.t_prime,
        cfg.sample_steps,
        cfg.seed,
    )
    .map_err(stage_err("refine"))?;
    stage_seconds.insert("refine".into(), t0.elapsed().as_secs_f64());

    let lat_plan = plan_expansion(2 * cfg.extent.0, 2 * cfg.extent.1, cfg.w_vox)?;
    let cond = ConditionVector::from_seed(cfg.condition_seed, models.latent.condition_len());
    let t0 = Instant::now();
    let latent_steps = grow_appearance(
        &mut state,
        models.latent,
        &lat_plan,
        &cond,
        cfg.sample_steps,
        cfg.seed,
    )
    .map_err(stage_err("appearance"))?;
    verify_latent_coverage(&state).map_err(stage_err("appearance"))?;
    stage_seconds.insert("appearance".into(), t0.elapsed().as_secs_f64());

    let report = RunReport {
        seed: cfg.seed,
        condition_seed: cfg.condition_seed,
        extent_blocks: cfg.extent,
        w_vox: cfg.w_vox,
        t_prime: cfg.t_prime,
        sample_steps: cfg.sample_steps,
        coarse_extent: state.coarse.resolution(),
        fine_extent: state.fine.resolution(),
        coarse_active: state.coarse.len() as u64,
        fine_active: state.fine.len() as u64,
        latent_active: state.latents.len() as u64,
        provisional_voxels: state.provisional_voxels(),
        stage_seconds,
        coarse_steps,
        refine_steps,
        latent_steps,
    };
    Ok((state, report))
}

#[derive(Debug, Clone)]
pub struct WorldExport {
    pub coarse: PathBuf,
    pub fine: PathBuf,
    pub latents: PathBuf,
    pub mesh: PathBuf,
    pub vertices: u64,
    pub faces: u64,
}

/// Write the three voxel layers plus the decoded world mesh. Fixed config
/// and seeds reproduce these files byte for byte.
pub fn export_world(
    state: &WorldState,
    params: &CodecParams,
    dir: &Path,
) -> Result<WorldExport, GrowError> {
    std::fs::create_dir_all(dir)?;
    let coarse = dir.join("coarse.wgb1");
    let fine = dir.join("fine.wgb1");
    let latents = dir.join("latents.wgb1");
    let mesh_path = dir.join("world.ply");
    voxcore::save_wgb1(&coarse, &state.coarse, Level::Coarse)?;
    voxcore::save_wgb1(&fine, &state.fine, Level::Fine)?;
    voxcore::save_wgb1(&latents, &state.latents, Level::Fine)?;
    let decoded = codec::decode_grid(&state.latents, params)?;
    let mesh = codec::extract_mesh(&decoded.features, &decoded.confidence);
    codec::export_ply(&mesh, &mesh_path)?;
    Ok(WorldExport {
        coarse,
        fine,
        latents,
        mesh: mesh_path,
        vertices: mesh.vertices.len() as u64,
        faces: mesh.faces.len() as u64,
    })
}
