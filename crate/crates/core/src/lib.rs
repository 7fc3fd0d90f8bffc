//! Block-wise unbounded 3D scene growth on sparse structured latents.
//!
//! The pipeline runs in deterministic batch stages: procedural world
//! generation and block curation (`procgen`), occlusion-aware feature
//! lifting (`render`), a linear feature codec (`codec`), flow-matching
//! generators over token sets (`flowgen`), mask-conditioned inpainting
//! (`inpaint`), the coarse-to-fine expansion driver (`grow`), and
//! distribution metrics (`metrics`). Everything is seeded explicitly;
//! identical inputs produce bit-identical outputs.

pub mod codec;
pub mod flowgen;
pub mod grow;
pub mod inpaint;
pub mod metrics;
pub mod procgen;
pub mod render;
pub mod seeds;
pub mod voxcore;
