//! Inpainting conditioning: quadrant training masks, the three-part
//! conditioning bundle, and the masked generation entry points for the
//! structure and latent stages.
//!
//! Masks mean "1 = generate, 0 = known context". Every inpainting call
//! ends with a hard constraint: the known region of the output is
//! overwritten with the input content bit for bit, which is the seam
//! guarantee the growth loop is built on. Quadrant splits are XY only;
//! the Z axis is never divided.

use rand::Rng;
use thiserror::Error;

use crate::flowgen::{
    self, known_tokens, position_encoding, sample, ConditionVector, ConditionedField, FlowError,
    GeneratorModel, StageTag, TokenSet, TrainSample,
};
use crate::seeds;
use crate::voxcore::{
    dense_from_sparse, BlockFrame, DenseMask, DenseVolume, SparseGrid, SparseMask, VoxError,
    VoxelCoord,
};

#[derive(Debug, Error)]
pub enum InpaintError {
    #[error("model stage {got} where {expected} is required")]
    WrongStage { expected: &'static str, got: &'static str },
    #[error("mask coordinate {0:?} outside the structure active set")]
    MaskOutsideStructure(VoxelCoord),
    #[error("known voxel {0:?} has no latent entry")]
    IncompleteKnown(VoxelCoord),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Vox(#[from] VoxError),
}

/// XY split of a block into four quadrants, one kept as context.
/// Quadrant index = (x >= x_split) + 2 (y >= y_split).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadrantSplit {
    pub x_split: u32,
    pub y_split: u32,
    pub kept: u8,
}

impl QuadrantSplit {
    /// True where the voxel column is masked (not in the kept quadrant).
    pub fn masks_column(&self, x: u32, y: u32) -> bool {
        let q = u8::from(x >= self.x_split) + 2 * u8::from(y >= self.y_split);
        q != self.kept
    }
}

/// Dense and active-restricted masks for a fixed split.
pub fn masks_for_split(
    frame: &BlockFrame,
    active: &SparseGrid,
    split: QuadrantSplit,
) -> (DenseMask, SparseMask) {
    let res = frame.resolution3();
    let mut m_s = DenseMask::filled(res, false);
    for y in 0..res[1] {
        for x in 0..res[0] {
            if split.masks_column(x, y) {
                for z in 0..res[2] {
                    m_s.set(x, y, z, true);
                }
            }
        }
    }
    let mut m_l = SparseMask::new();
    for coord in active.coords() {
        let [x, y, _] = coord.as_array();
        m_l.set(*coord, split.masks_column(x, y));
    }
    (m_s, m_l)
}

/// Draw a quadrant split with both positions in [N/4, 3N/4] (no sliver
/// quadrants) and build the masks: the dense mask covers the three masked
/// quadrants over the full height, the sparse mask is its restriction to
/// the block's active voxels.
pub fn make_training_masks(
    frame: &BlockFrame,
    active: &SparseGrid,
    seed: u64,
) -> (DenseMask, SparseMask, QuadrantSplit) {
    let n = frame.resolution;
    let mut rng = seeds::rng_for(seed, seeds::tag::MASK, 0);
    let split = QuadrantSplit {
        x_split: rng.gen_range(n / 4..=3 * n / 4),
        y_split: rng.gen_range(n / 4..=3 * n / 4),
        kept: rng.gen_range(0..4u8),
    };
    let (m_s, m_l) = masks_for_split(frame, active, split);
    (m_s, m_l, split)
}

/// The three channel groups every generator consumes, concatenated as
/// [noisy | mask | known] for 2 C + 1 input channels per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub noisy: TokenSet,
    pub mask: TokenSet,
    pub known: TokenSet,
}

impl ConditioningBundle {
    pub fn input_channels(&self) -> usize {
        2 * self.noisy.channels() + 1
    }
}

/// known = l0 (1 - m) per token; the bundle keeps the fixed order.
pub fn assemble_condition(
    noisy: &TokenSet,
    mask: &TokenSet,
    l0: &TokenSet,
) -> Result<ConditioningBundle, InpaintError> {
    if noisy.len() != l0.len() || noisy.channels() != l0.channels() {
        return Err(InpaintError::ShapeMismatch(format!(
            "noisy {}x{} vs l0 {}x{}",
            noisy.len(),
            noisy.channels(),
            l0.len(),
            l0.channels()
        )));
    }
    let known = known_tokens(l0, mask)?;
    Ok(ConditioningBundle {
        noisy: noisy.clone(),
        mask: mask.clone(),
        known,
    })
}

fn require_stage(model: &GeneratorModel, structure: bool) -> Result<(), InpaintError> {
    let ok = match model.stage {
        StageTag::CoarseStructure | StageTag::FineStructure => structure,
        StageTag::FineLatent => !structure,
    };
    if ok {
        Ok(())
    } else {
        Err(InpaintError::WrongStage {
            expected: if structure { "structure" } else { "latent" },
            got: model.stage.name(),
        })
    }
}

/// Complete the masked region of an occupancy volume. The sampler runs in
/// patch-token space; afterwards the known region (m_s = 0) is copied
/// back verbatim and the generated region is binarized at 0.5.
pub fn inpaint_structure(
    model: &GeneratorModel,
    known_vol: &DenseVolume,
    m_s: &DenseMask,
    condition: &ConditionVector,
    steps: u32,
    seed: u64,
) -> Result<DenseVolume, InpaintError> {
    require_stage(model, true)?;
    let res = known_vol.resolution();
    if m_s.resolution() != res {
        return Err(InpaintError::ShapeMismatch(format!(
            "mask {:?} vs volume {:?}",
            m_s.resolution(),
            res
        )));
    }
    let l0 = flowgen::tokenize_occupancy(known_vol)?;
    let mask_tok = flowgen::tokenize_mask(m_s)?;
    let known = known_tokens(&l0, &mask_tok)?;
    let field = ConditionedField {
        model,
        mask: &mask_tok,
        known: &known,
        condition,
    };
    let out_tok = sample(&field, &l0, steps, seed)?;
    let mut out = flowgen::detokenize_occupancy(&out_tok, res)?;
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                if m_s.get(x, y, z) {
                    out.set(x, y, z, if out.get(x, y, z) >= 0.5 { 1.0 } else { 0.0 });
                } else {
                    out.set(x, y, z, known_vol.get(x, y, z));
                }
            }
        }
    }
    Ok(out)
}

/// Generate latents at the active voxels of `structure`, preserving the
/// known ones. Mask bits: 1 = generate, 0 = known (the voxel must then
/// carry an entry in `known_latents`); active voxels absent from the mask
/// are treated as masked, never as known.
pub fn inpaint_latent(
    model: &GeneratorModel,
    frame: &BlockFrame,
    structure: &SparseGrid,
    known_latents: &SparseGrid,
    m_l: &SparseMask,
    condition: &ConditionVector,
    steps: u32,
    seed: u64,
) -> Result<crate::codec::LatentBlock, InpaintError> {
    require_stage(model, false)?;
    let c_z = model.token_channels();
    if known_latents.channels() != c_z {
        return Err(InpaintError::ShapeMismatch(format!(
            "known latents have {} channels, model expects {c_z}",
            known_latents.channels()
        )));
    }
    for (coord, _) in m_l.iter() {
        if !structure.is_active(coord) {
            return Err(InpaintError::MaskOutsideStructure(*coord));
        }
    }
    let res = structure.resolution();
    let cell = structure.cell_size();
    if structure.len() == 0 {
        return Ok(crate::codec::LatentBlock {
            frame: frame.clone(),
            latents: SparseGrid::new(res, cell, c_z)?,
        });
    }
    let coords: Vec<VoxelCoord> = structure.coords().copied().collect();
    let mut l0_values = Vec::with_capacity(coords.len() * c_z);
    let mut mask_values = Vec::with_capacity(coords.len());
    let mut positions = Vec::with_capacity(coords.len());
    for coord in &coords {
        let masked = m_l.get(coord).unwrap_or(true);
        mask_values.push(if masked { 1.0 } else { 0.0 });
        match known_latents.get(coord) {
            Some(z) => l0_values.extend(z.iter().map(|&v| v as f64)),
            None if masked => l0_values.extend(std::iter::repeat(0.0).take(c_z)),
            None => return Err(InpaintError::IncompleteKnown(*coord)),
        }
        positions.push(position_encoding(coord.as_array(), res));
    }
    let l0 = TokenSet::new(c_z, l0_values, positions.clone())?;
    let mask_tok = TokenSet::scalar(mask_values, positions)?;
    let known = known_tokens(&l0, &mask_tok)?;
    let field = ConditionedField {
        model,
        mask: &mask_tok,
        known: &known,
        condition,
    };
    let out_tok = sample(&field, &l0, steps, seed)?;
    let mut latents = flowgen::detokenize_latents(&out_tok, &coords, res, cell)?;
    // Hard constraint: known voxels keep their exact input latents.
    for coord in &coords {
        if !m_l.get(coord).unwrap_or(true) {
            let z = known_latents.get(coord).expect("checked above").to_vec();
            latents.insert(*coord, z)?;
        }
    }
    Ok(crate::codec::LatentBlock {
        frame: frame.clone(),
        latents,
    })
}

/// Quadrant-masked training sample for a structure stage: patch tokens of
/// the dense occupancy plus the token-level mask.
pub fn structure_training_sample(
    frame: &BlockFrame,
    occupancy: &SparseGrid,
    seed: u64,
) -> Result<(TrainSample, QuadrantSplit), InpaintError> {
    let vol = dense_from_sparse(&occupancy.occupancy(), 0)?;
    let (m_s, _, split) = make_training_masks(frame, occupancy, seed);
    let tokens = flowgen::tokenize_occupancy(&vol)?;
    let mask = flowgen::tokenize_mask(&m_s)?;
    Ok((TrainSample { tokens, mask }, split))
}

/// Quadrant-masked training sample for the latent stage: one token per
/// active voxel. `None` when the block has no active voxels.
pub fn latent_training_sample(
    frame: &BlockFrame,
    latents: &SparseGrid,
    seed: u64,
) -> Result<Option<(TrainSample, QuadrantSplit)>, InpaintError> {
    if latents.len() == 0 {
        return Ok(None);
    }
    let (_, m_l, split) = make_training_masks(frame, latents, seed);
    let (tokens, coords) = flowgen::tokenize_latents(latents)?;
    let mask_values = coords
        .iter()
        .map(|c| if m_l.get(c) == Some(true) { 1.0 } else { 0.0 })
        .collect();
    let positions = (0..coords.len())
        .map(|i| *tokens.position(i))
        .collect();
    let mask = TokenSet::scalar(mask_values, positions)?;
    Ok(Some((TrainSample { tokens, mask }, split)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowgen::CONDITION_LEN;
    use crate::voxcore::Level;

    fn frame32() -> BlockFrame {
        BlockFrame::new(Level::Fine, (0, 0), [0.0; 3], 3.0, 3.0, 32).unwrap()
    }

    fn block_with_slab() -> SparseGrid {
        let mut g = SparseGrid::new([32, 32, 32], [0.09375; 3], 1).unwrap();
        for y in 0..32u16 {
            for x in 0..32u16 {
                g.insert(VoxelCoord::new(x, y, 0), vec![1.0]).unwrap();
            }
        }
        for z in 1..5u16 {
            g.insert(VoxelCoord::new(10, 12, z), vec![1.0]).unwrap();
        }
        g
    }

    #[test]
    fn midpoint_split_masks_exactly_three_quarters() {
        let frame = frame32();
        let active = block_with_slab();
        for kept in 0..4u8 {
            let split = QuadrantSplit {
                x_split: 16,
                y_split: 16,
                kept,
            };
            let (m_s, _) = masks_for_split(&frame, &active, split);
            assert_eq!(m_s.count_ones(), 3 * 32 * 32 * 32 / 4);
        }
    }

    #[test]
    fn split_positions_respect_the_quarter_bounds() {
        let frame = frame32();
        let active = block_with_slab();
        for seed in 0..50u64 {
            let (_, _, split) = make_training_masks(&frame, &active, seed);
            assert!((8..=24).contains(&split.x_split), "x_split {}", split.x_split);
            assert!((8..=24).contains(&split.y_split), "y_split {}", split.y_split);
            assert!(split.kept < 4);
        }
        let (a_s, a_l, a_split) = make_training_masks(&frame, &active, 7);
        let (b_s, b_l, b_split) = make_training_masks(&frame, &active, 7);
        assert_eq!(a_split, b_split);
        assert_eq!(a_s, b_s);
        assert_eq!(
            a_l.iter().collect::<Vec<_>>(),
            b_l.iter().collect::<Vec<_>>()
        );
    }

    #[test]
    fn sparse_mask_is_the_restriction_to_active_voxels() {
        let frame = frame32();
        let active = block_with_slab();
        let (m_s, m_l, _) = make_training_masks(&frame, &active, 3);
        assert_eq!(m_l.len(), active.len());
        for (coord, bit) in m_l.iter() {
            assert!(active.is_active(coord));
            let [x, y, z] = coord.as_array();
            assert_eq!(bit, m_s.get(x, y, z));
        }
    }

    #[test]
    fn kept_quadrant_always_has_positive_area() {
        let frame = frame32();
        let active = block_with_slab();
        for seed in 0..20u64 {
            let (m_s, _, _) = make_training_masks(&frame, &active, seed);
            let total = 32 * 32 * 32;
            assert!(m_s.count_ones() < total, "nothing kept at seed {seed}");
            assert!(m_s.count_ones() > 0, "nothing masked at seed {seed}");
        }
    }

    fn toks(c: usize, rows: &[&[f64]]) -> TokenSet {
        let dims = [rows.len() as u32, 1, 1];
        TokenSet::new(
            c,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            (0..rows.len())
                .map(|i| position_encoding([i as u32, 0, 0], dims))
                .collect(),
        )
        .unwrap()
    }

    fn scalar_mask(bits: &[f64]) -> TokenSet {
        let dims = [bits.len() as u32, 1, 1];
        TokenSet::scalar(
            bits.to_vec(),
            (0..bits.len())
                .map(|i| position_encoding([i as u32, 0, 0], dims))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn bundle_known_channel_follows_the_mask() {
        let l0 = toks(2, &[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let noisy = l0.zeros_like();
        let all_masked = assemble_condition(&noisy, &scalar_mask(&[1.0, 1.0, 1.0]), &l0).unwrap();
        assert!(all_masked.known.values().iter().all(|&v| v == 0.0));
        let none_masked = assemble_condition(&noisy, &scalar_mask(&[0.0, 0.0, 0.0]), &l0).unwrap();
        assert_eq!(none_masked.known.values(), l0.values());
        let mixed = assemble_condition(&noisy, &scalar_mask(&[0.0, 1.0, 0.0]), &l0).unwrap();
        assert_eq!(mixed.known.values(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        assert_eq!(mixed.input_channels(), 5);
    }

    #[test]
    fn reassembling_a_bundle_from_its_parts_is_idempotent() {
        let l0 = toks(2, &[&[1.0, -2.0], &[0.5, 4.0]]);
        let noisy = toks(2, &[&[0.1, 0.2], &[0.3, 0.4]]);
        let bundle = assemble_condition(&noisy, &scalar_mask(&[1.0, 0.0]), &l0).unwrap();
        let again = assemble_condition(&bundle.noisy, &bundle.mask, &bundle.known).unwrap();
        assert_eq!(bundle, again);
    }

    fn structure_model() -> GeneratorModel {
        GeneratorModel::new(
            StageTag::FineStructure,
            flowgen::STRUCT_TOKEN_CHANNELS,
            16,
            CONDITION_LEN,
            5,
        )
        .unwrap()
    }

    #[test]
    fn fully_known_structure_passes_through_bit_exactly() {
        let model = structure_model();
        let cond = ConditionVector::from_seed(1, CONDITION_LEN);
        let mut vol = DenseVolume::zeros([8, 8, 8]);
        let mut rng = seeds::rng(9);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    vol.set(x, y, z, if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
                }
            }
        }
        let m = DenseMask::filled([8, 8, 8], false);
        let out = inpaint_structure(&model, &vol, &m, &cond, 4, 77).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(out.get(x, y, z), vol.get(x, y, z));
                }
            }
        }
    }

    #[test]
    fn fully_masked_structure_ignores_known_content() {
        let model = structure_model();
        let cond = ConditionVector::from_seed(2, CONDITION_LEN);
        let m = DenseMask::filled([8, 8, 8], true);
        let zeros = DenseVolume::zeros([8, 8, 8]);
        let mut ones = DenseVolume::zeros([8, 8, 8]);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    ones.set(x, y, z, 1.0);
                }
            }
        }
        let a = inpaint_structure(&model, &zeros, &m, &cond, 6, 123).unwrap();
        let b = inpaint_structure(&model, &ones, &m, &cond, 6, 123).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(a.get(x, y, z), b.get(x, y, z));
                    let v = a.get(x, y, z);
                    assert!(v == 0.0 || v == 1.0, "non-binary output {v}");
                }
            }
        }
    }

    #[test]
    fn partial_structure_mask_preserves_known_and_binarizes_the_rest() {
        let model = structure_model();
        let cond = ConditionVector::from_seed(3, CONDITION_LEN);
        let mut vol = DenseVolume::zeros([8, 8, 8]);
        for y in 0..8 {
            for x in 0..8 {
                vol.set(x, y, 0, 1.0);
            }
        }
        let mut m = DenseMask::filled([8, 8, 8], false);
        for z in 0..8 {
            for y in 0..8 {
                for x in 4..8 {
                    m.set(x, y, z, true);
                }
            }
        }
        let out = inpaint_structure(&model, &vol, &m, &cond, 8, 9).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    if m.get(x, y, z) {
                        let v = out.get(x, y, z);
                        assert!(v == 0.0 || v == 1.0);
                    } else {
                        assert_eq!(out.get(x, y, z), vol.get(x, y, z));
                    }
                }
            }
        }
    }

    fn latent_model() -> GeneratorModel {
        GeneratorModel::new(StageTag::FineLatent, 8, 12, CONDITION_LEN, 6).unwrap()
    }

    fn latent_fixture() -> (SparseGrid, SparseGrid) {
        let mut structure = SparseGrid::new([16, 16, 16], [0.1; 3], 1).unwrap();
        let mut latents = SparseGrid::new([16, 16, 16], [0.1; 3], 8).unwrap();
        let mut rng = seeds::rng(4);
        for i in 0..40u16 {
            let c = VoxelCoord::new(i % 16, (i * 7 + 3) % 16, (i * 3 + 1) % 16);
            if structure.is_active(&c) {
                continue;
            }
            structure.insert(c, vec![1.0]).unwrap();
            latents
                .insert(c, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        }
        (structure, latents)
    }

    #[test]
    fn all_known_latents_pass_through_bit_exactly() {
        let model = latent_model();
        let cond = ConditionVector::from_seed(5, CONDITION_LEN);
        let (structure, latents) = latent_fixture();
        let mut m_l = SparseMask::new();
        for coord in structure.coords() {
            m_l.set(*coord, false);
        }
        let out = inpaint_latent(
            &model,
            &frame32(),
            &structure,
            &latents,
            &m_l,
            &cond,
            5,
            31,
        )
        .unwrap();
        assert_eq!(out.latents, latents);
    }

    #[test]
    fn known_region_survives_while_masked_region_regenerates() {
        let model = latent_model();
        let cond = ConditionVector::from_seed(6, CONDITION_LEN);
        let (structure, latents) = latent_fixture();
        let mut m_l = SparseMask::new();
        for (i, coord) in structure.coords().enumerate() {
            m_l.set(*coord, i % 2 == 0);
        }
        let out = inpaint_latent(
            &model,
            &frame32(),
            &structure,
            &latents,
            &m_l,
            &cond,
            5,
            32,
        )
        .unwrap();
        assert_eq!(out.latents.len(), structure.len());
        let mut changed = 0usize;
        for (coord, bit) in m_l.iter() {
            if bit {
                if out.latents.get(coord) != latents.get(coord) {
                    changed += 1;
                }
            } else {
                assert_eq!(out.latents.get(coord), latents.get(coord));
            }
        }
        assert!(changed > 0, "masked latents never regenerated");
    }

    #[test]
    fn empty_structure_yields_an_empty_latent_block() {
        let model = latent_model();
        let cond = ConditionVector::from_seed(7, CONDITION_LEN);
        let structure = SparseGrid::new([16, 16, 16], [0.1; 3], 1).unwrap();
        let latents = SparseGrid::new([16, 16, 16], [0.1; 3], 8).unwrap();
        let out = inpaint_latent(
            &model,
            &frame32(),
            &structure,
            &latents,
            &SparseMask::new(),
            &cond,
            5,
            1,
        )
        .unwrap();
        assert_eq!(out.latents.len(), 0);
    }

    #[test]
    fn mask_outside_structure_is_rejected() {
        let model = latent_model();
        let cond = ConditionVector::from_seed(8, CONDITION_LEN);
        let (structure, latents) = latent_fixture();
        let mut m_l = SparseMask::new();
        m_l.set(VoxelCoord::new(15, 15, 15), true);
        assert!(!structure.is_active(&VoxelCoord::new(15, 15, 15)));
        let err = inpaint_latent(
            &model,
            &frame32(),
            &structure,
            &latents,
            &m_l,
            &cond,
            5,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, InpaintError::MaskOutsideStructure(_)));
    }

    #[test]
    fn known_voxel_without_latent_entry_is_rejected() {
        let model = latent_model();
        let cond = ConditionVector::from_seed(9, CONDITION_LEN);
        let (structure, _) = latent_fixture();
        let empty = SparseGrid::new([16, 16, 16], [0.1; 3], 8).unwrap();
        let mut m_l = SparseMask::new();
        for coord in structure.coords() {
            m_l.set(*coord, false);
        }
        let err = inpaint_latent(
            &model,
            &frame32(),
            &structure,
            &empty,
            &m_l,
            &cond,
            5,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, InpaintError::IncompleteKnown(_)));
    }

    #[test]
    fn stage_tags_are_enforced() {
        let cond = ConditionVector::from_seed(10, CONDITION_LEN);
        let vol = DenseVolume::zeros([8, 8, 8]);
        let m = DenseMask::filled([8, 8, 8], true);
        let err = inpaint_structure(&latent_model(), &vol, &m, &cond, 2, 1).unwrap_err();
        assert!(matches!(err, InpaintError::WrongStage { .. }));
        let (structure, latents) = latent_fixture();
        let err = inpaint_latent(
            &structure_model(),
            &frame32(),
            &structure,
            &latents,
            &SparseMask::new(),
            &cond,
            2,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, InpaintError::WrongStage { .. }));
    }

    #[test]
    fn training_samples_carry_consistent_masks() {
        let frame = frame32();
        let block = block_with_slab();
        let (sample, split) = structure_training_sample(&frame, &block, 11).unwrap();
        assert_eq!(sample.tokens.len(), 8 * 8 * 8);
        assert_eq!(sample.tokens.channels(), flowgen::STRUCT_TOKEN_CHANNELS);
        assert_eq!(sample.mask.len(), sample.tokens.len());
        // Every masked token column lies in a masked quadrant.
        let masked_fraction = sample.mask.values().iter().sum::<f64>() / sample.mask.len() as f64;
        assert!(masked_fraction > 0.4 && masked_fraction < 0.95);
        let mut latents = SparseGrid::new([32, 32, 32], [0.09375; 3], 8).unwrap();
        for coord in block.coords() {
            latents.insert(*coord, vec![0.5; 8]).unwrap();
        }
        let (lat_sample, lat_split) = latent_training_sample(&frame, &latents, 11)
            .unwrap()
            .unwrap();
        assert_eq!(split, lat_split); // same seed, same split stream
        assert_eq!(lat_sample.tokens.len(), latents.len());
        let empty = SparseGrid::new([32, 32, 32], [0.09375; 3], 8).unwrap();
        assert!(latent_training_sample(&frame, &empty, 1).unwrap().is_none());
    }
}
