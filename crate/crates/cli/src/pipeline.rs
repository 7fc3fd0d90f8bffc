//! Command implementations. Each command reads artifacts produced by the
//! previous stage, so the pipeline can be driven piecemeal or end to end.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use worldgrow_core::codec::{self, CodecParams};
use worldgrow_core::flowgen::{
    self, AdamState, ConditionVector, GeneratorModel, StageTag, TrainConfig, TrainSample,
    CONDITION_LEN, STRUCT_TOKEN_CHANNELS,
};
use worldgrow_core::grow::{self, GrowConfig, RunReport, StageModels, StepRecord, WorldState};
use worldgrow_core::inpaint;
use worldgrow_core::metrics::{self, EvalReport};
use worldgrow_core::procgen::{self, DatasetConfig, Manifest, WorldParams};
use worldgrow_core::render;
use worldgrow_core::seeds::{self, tag};
use worldgrow_core::voxcore::{self, BlockFrame, DenseMask, Level, SparseGrid};

use crate::config::RunConfig;

/// Parse "NxM" extents for --extent and --world flags.
pub fn parse_pair(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxM, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<u32>()
            .map_err(|_| format!("expected NxM with positive integers, got {s:?}"))
    };
    let pair = (parse(a)?, parse(b)?);
    if pair.0 == 0 || pair.1 == 0 {
        return Err(format!("extent sides must be nonzero, got {s:?}"));
    }
    Ok(pair)
}

pub fn cmd_curate(cfg: &RunConfig, threshold: Option<&str>) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(t) = threshold {
        cfg.threshold = t.to_string();
    }
    let threshold = cfg.threshold()?;
    let mut params = WorldParams::new(cfg.world_seed, cfg.rooms);
    params.n = cfg.resolution;
    params.height_m = cfg.height_m;
    let world = procgen::generate_world(params)?;
    let ds = DatasetConfig {
        fine_count: cfg.fine_count,
        coarse_count: cfg.coarse_count,
        threshold,
        max_attempts: cfg.max_attempts,
        curation_seed: cfg.curation_seed,
        world_seed: cfg.world_seed,
    };
    let manifest = procgen::build_datasets(&world, &ds, &cfg.data_dir)?;
    let count = |level: &str| manifest.blocks.iter().filter(|b| b.level == level).count();
    let (fine, coarse) = (count("fine"), count("coarse"));
    println!(
        "curated {fine} fine and {coarse} coarse blocks at threshold {} into {}",
        manifest.threshold,
        cfg.data_dir.display()
    );
    anyhow::ensure!(
        fine >= cfg.min_blocks && coarse >= cfg.min_blocks,
        "curation shortfall: {fine} fine / {coarse} coarse accepted, need {} per level",
        cfg.min_blocks
    );
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg.data_dir.join("manifest.toml");
    anyhow::ensure!(
        path.exists(),
        "missing dataset: {} not found (run curate first)",
        path.display()
    );
    Ok(Manifest::load(&path)?)
}

/// Rebuild the frame a curated block was sliced with: geometry comes from
/// the manifest origin plus the configured block dimensions.
fn block_frame(cfg: &RunConfig, level: Level, index: usize, origin: [f64; 3]) -> anyhow::Result<BlockFrame> {
    let width = match level {
        Level::Fine => cfg.height_m,
        Level::Coarse => 2.0 * cfg.height_m,
    };
    Ok(BlockFrame::new(
        level,
        (index as i64, 0),
        origin,
        width,
        cfg.height_m,
        cfg.resolution,
    )?)
}

fn load_level_blocks(
    cfg: &RunConfig,
    level: Level,
) -> anyhow::Result<Vec<(SparseGrid, BlockFrame)>> {
    let manifest = load_manifest(cfg)?;
    let want = match level {
        Level::Fine => "fine",
        Level::Coarse => "coarse",
    };
    let mut out = Vec::new();
    for entry in manifest.blocks.iter().filter(|b| b.level == want) {
        let (grid, file_level) = voxcore::load_wgb1(&cfg.data_dir.join(&entry.path))?;
        anyhow::ensure!(
            file_level == level,
            "{} holds a {file_level:?} block where {level:?} was expected",
            entry.path
        );
        let frame = block_frame(cfg, level, out.len(), entry.origin)?;
        out.push((grid, frame));
    }
    anyhow::ensure!(
        !out.is_empty(),
        "missing dataset: manifest lists no {want} blocks"
    );
    Ok(out)
}

fn structure_samples(cfg: &RunConfig, level: Level) -> anyhow::Result<Vec<TrainSample>> {
    load_level_blocks(cfg, level)?
        .iter()
        .enumerate()
        .map(|(i, (grid, frame))| {
            let seed = seeds::derive(cfg.train_seed, tag::MASK, i as u64);
            let (sample, _) = inpaint::structure_training_sample(frame, grid, seed)?;
            Ok(sample)
        })
        .collect()
}

/// Fine-latent training data: render each block, lift features through the
/// depth-tested aggregation, encode to latents, then quadrant-mask.
fn latent_samples(cfg: &RunConfig, params: &CodecParams) -> anyhow::Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (i, (grid, frame)) in load_level_blocks(cfg, Level::Fine)?.iter().enumerate() {
        let views = render::render_rig(grid, 65, 0.8, 1.5)?;
        let tau = render::default_tau(grid);
        let lifted = render::aggregate_features(grid, &views, tau)?;
        let block = codec::encode(frame, &lifted.features, params)?;
        let seed = seeds::derive(cfg.train_seed, tag::MASK, (1 << 32) + i as u64);
        if let Some((sample, _)) = inpaint::latent_training_sample(frame, &block.latents, seed)? {
            out.push(sample);
        }
    }
    anyhow::ensure!(!out.is_empty(), "missing dataset: no non-empty fine blocks to encode");
    Ok(out)
}

fn models_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("models")
}

fn checkpoint_path(cfg: &RunConfig, stage: StageTag) -> PathBuf {
    models_dir(cfg).join(format!("{}.wgck", stage.name()))
}

/// Codec parameters are derived from the config seed on first use and
/// persisted so every stage shares the same transform.
pub fn codec_params(cfg: &RunConfig) -> anyhow::Result<CodecParams> {
    let path = cfg.out_dir.join("codec.wgcp");
    if path.exists() {
        return Ok(CodecParams::load(&path)?);
    }
    let params = CodecParams::fixed_orthonormal(
        cfg.feature_channels,
        cfg.latent_channels,
        cfg.codec_seed,
    )?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    params.save(&path)?;
    Ok(params)
}

pub fn cmd_train(cfg: &RunConfig, stage: StageTag, steps: Option<u32>) -> anyhow::Result<()> {
    let steps = steps.unwrap_or(cfg.train_steps);
    let data = match stage {
        StageTag::CoarseStructure => structure_samples(cfg, Level::Coarse)?,
        StageTag::FineStructure => structure_samples(cfg, Level::Fine)?,
        StageTag::FineLatent => {
            let params = codec_params(cfg)?;
            latent_samples(cfg, &params)?
        }
    };
    let ckpt = checkpoint_path(cfg, stage);
    let (mut model, mut opt) = if ckpt.exists() {
        let (model, opt) = flowgen::load_checkpoint(&ckpt)?;
        anyhow::ensure!(
            model.stage == stage,
            "checkpoint {} holds stage {} where {} was requested",
            ckpt.display(),
            model.stage.name(),
            stage.name()
        );
        (model, opt)
    } else {
        let c_token = match stage {
            StageTag::FineLatent => cfg.latent_channels,
            _ => STRUCT_TOKEN_CHANNELS,
        };
        let model = GeneratorModel::new(
            stage,
            c_token,
            cfg.hidden_width,
            CONDITION_LEN,
            seeds::derive(cfg.model_seed, tag::MODEL_INIT, stage.tag() as u64),
        )?;
        let opt = AdamState::new(&model);
        (model, opt)
    };
    let start_step = opt.step;
    let cond = ConditionVector::from_seed(cfg.condition_seed, CONDITION_LEN);
    let tc = TrainConfig {
        steps,
        batch: cfg.batch,
        lr: cfg.learning_rate,
        weight_decay: 0.0,
        seed: cfg.train_seed,
    };
    let curve = flowgen::train(&mut model, &mut opt, &data, &cond, &tc)?;
    std::fs::create_dir_all(models_dir(cfg))?;
    flowgen::save_checkpoint(&model, &opt, &ckpt)?;
    let loss_path = models_dir(cfg).join(format!("loss-{}.txt", stage.name()));
    let mut lines = String::new();
    for (k, loss) in curve.iter().enumerate() {
        lines.push_str(&format!("{} {loss:e}\n", start_step + k as u64));
    }
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&loss_path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, lines.as_bytes()))
        .with_context(|| format!("appending {}", loss_path.display()))?;
    println!(
        "trained {} on {} samples for {} steps (loss {:.6} -> {:.6}) -> {}",
        stage.name(),
        data.len(),
        steps,
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn load_stage_model(cfg: &RunConfig, stage: StageTag) -> anyhow::Result<GeneratorModel> {
    let path = checkpoint_path(cfg, stage);
    anyhow::ensure!(
        path.exists(),
        "missing checkpoint {}: run train --stage {}",
        path.display(),
        stage.name()
    );
    let (model, _) = flowgen::load_checkpoint(&path)?;
    anyhow::ensure!(
        model.stage == stage,
        "checkpoint {} holds stage {} where {} was expected",
        path.display(),
        model.stage.name(),
        stage.name()
    );
    Ok(model)
}

/// Wall-clock fields vary run to run; saved reports zero them so identical
/// configs produce byte-identical artifacts.
fn strip_timings(report: &mut RunReport) {
    report.stage_seconds.clear();
    for rec in report
        .coarse_steps
        .iter_mut()
        .chain(report.refine_steps.iter_mut())
        .chain(report.latent_steps.iter_mut())
    {
        rec.seconds = 0.0;
    }
}

pub fn cmd_grow(cfg: &RunConfig, extent: Option<(u32, u32)>) -> anyhow::Result<()> {
    let (nx, ny) = extent.unwrap_or((cfg.extent_x, cfg.extent_y));
    let coarse = load_stage_model(cfg, StageTag::CoarseStructure)?;
    let fine = load_stage_model(cfg, StageTag::FineStructure)?;
    let latent = load_stage_model(cfg, StageTag::FineLatent)?;
    let gcfg = GrowConfig {
        extent: (nx, ny),
        w_vox: cfg.resolution,
        fine_cell: cfg.fine_cell(),
        t_prime: cfg.t_prime,
        sample_steps: cfg.sample_steps,
        seed: cfg.grow_seed,
        condition_seed: cfg.condition_seed,
    };
    let started = std::time::Instant::now();
    let (state, mut report) = grow::generate_world(
        &StageModels {
            coarse: &coarse,
            fine: &fine,
            latent: &latent,
        },
        &gcfg,
    )?;
    let params = codec_params(cfg)?;
    let dir = cfg.out_dir.join("world");
    let export = grow::export_world(&state, &params, &dir)?;
    strip_timings(&mut report);
    report.save(&dir.join("report.toml"))?;
    println!(
        "grew {nx}x{ny} coarse blocks in {:.2}s: {} coarse / {} refine / {} latent steps; mesh {} vertices {} faces -> {}",
        started.elapsed().as_secs_f64(),
        report.coarse_steps.len(),
        report.refine_steps.len(),
        report.latent_steps.len(),
        export.vertices,
        export.faces,
        export.mesh.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RefineReport {
    steps: Vec<StepRecord>,
}

pub fn cmd_refine(cfg: &RunConfig, input: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = cfg.out_dir.join("world");
    let path = input.unwrap_or_else(|| dir.join("coarse.wgb1"));
    anyhow::ensure!(
        path.exists(),
        "missing coarse world {}: run grow first or pass --input",
        path.display()
    );
    let (coarse, level) = voxcore::load_wgb1(&path)?;
    anyhow::ensure!(
        level == Level::Coarse,
        "{} holds a {level:?} grid, refine expects a coarse world",
        path.display()
    );
    let res = coarse.resolution();
    let w = cfg.resolution;
    anyhow::ensure!(
        res[2] == w && res[0] % w == 0 && res[1] % w == 0 && res[0] > 0 && res[1] > 0,
        "world {res:?} is not a whole number of {w}-voxel blocks"
    );
    let mut state = WorldState::new((res[0] / w, res[1] / w), w, cfg.fine_cell(), cfg.latent_channels)?;
    state.coarse = coarse;
    state.coarse_committed = DenseMask::filled(res, true);
    let model = load_stage_model(cfg, StageTag::FineStructure)?;
    let cond = ConditionVector::from_seed(cfg.condition_seed, model.condition_len());
    let mut steps = grow::refine_fine(
        &mut state,
        &model,
        &cond,
        cfg.t_prime,
        cfg.sample_steps,
        cfg.grow_seed,
    )?;
    std::fs::create_dir_all(&dir)?;
    voxcore::save_wgb1(&dir.join("fine.wgb1"), &state.fine, Level::Fine)?;
    for rec in &mut steps {
        rec.seconds = 0.0;
    }
    let report = RefineReport { steps };
    std::fs::write(
        dir.join("refine-report.toml"),
        toml::to_string_pretty(&report).context("serializing refine report")?,
    )?;
    println!(
        "refined {} fine blocks ({} active voxels) -> {}",
        report.steps.len(),
        state.fine.len(),
        dir.join("fine.wgb1").display()
    );
    Ok(())
}

pub fn cmd_decode(
    cfg: &RunConfig,
    latents: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let dir = cfg.out_dir.join("world");
    let path = latents.unwrap_or_else(|| dir.join("latents.wgb1"));
    anyhow::ensure!(
        path.exists(),
        "missing latents {}: run grow first or pass --latents",
        path.display()
    );
    let (grid, _) = voxcore::load_wgb1(&path)?;
    let params = codec_params(cfg)?;
    let decoded = codec::decode_grid(&grid, &params)?;
    let mesh = codec::extract_mesh(&decoded.features, &decoded.confidence);
    let out = out.unwrap_or_else(|| dir.join("decoded.ply"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    codec::export_ply(&mesh, &out)?;
    println!(
        "decoded {} voxels into {} vertices / {} faces -> {}",
        grid.len(),
        mesh.vertices.len(),
        mesh.faces.len(),
        out.display()
    );
    Ok(())
}

/// Load every .wgb1 and .ply block in a directory, sorted by file name.
/// Meshes are voxelized at the configured resolution.
fn load_block_dir(cfg: &RunConfig, dir: &Path) -> anyhow::Result<Vec<SparseGrid>> {
    anyhow::ensure!(dir.is_dir(), "{} is not a directory", dir.display());
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("wgb1") | Some("ply")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let grid = match path.extension().and_then(|e| e.to_str()) {
            Some("wgb1") => voxcore::load_wgb1(&path)?.0,
            _ => {
                let mesh = codec::import_ply(&path)?;
                metrics::voxelize_mesh(&mesh, cfg.resolution, cfg.eval_seed)?
            }
        };
        if grid.len() > 0 {
            out.push(grid);
        }
    }
    anyhow::ensure!(
        !out.is_empty(),
        "no non-empty .wgb1 or .ply blocks under {}",
        dir.display()
    );
    Ok(out)
}

pub fn cmd_eval(cfg: &RunConfig, generated: &Path, reference: &Path) -> anyhow::Result<()> {
    let gen_blocks = load_block_dir(cfg, generated)
        .with_context(|| format!("loading generated set {}", generated.display()))?;
    let ref_blocks = load_block_dir(cfg, reference)
        .with_context(|| format!("loading reference set {}", reference.display()))?;
    let report = metrics::evaluate(&gen_blocks, &ref_blocks, cfg.eval_points, cfg.eval_seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.toml");
    report.save(&path)?;
    print!("{}", report.to_toml()?);
    println!("# saved to {}", path.display());
    Ok(())
}

pub fn cmd_stability(
    cfg: &RunConfig,
    world: Option<(u32, u32)>,
    input: Option<PathBuf>,
    reference: Option<PathBuf>,
) -> anyhow::Result<()> {
    let path = input.unwrap_or_else(|| cfg.out_dir.join("world").join("fine.wgb1"));
    anyhow::ensure!(
        path.exists(),
        "missing fine world {}: run grow first or pass --input",
        path.display()
    );
    let (grid, _) = voxcore::load_wgb1(&path)?;
    let w = cfg.resolution;
    let res = grid.resolution();
    let lattice = (res[0] / w, res[1] / w);
    if let Some((wx, wy)) = world {
        anyhow::ensure!(
            lattice.0 >= wx && lattice.1 >= wy,
            "world is {}x{} fine blocks, --world asked for {wx}x{wy}",
            lattice.0,
            lattice.1
        );
    }
    let ref_dir = reference.unwrap_or_else(|| cfg.data_dir.join("fine"));
    let ref_blocks = load_block_dir(cfg, &ref_dir)
        .with_context(|| format!("loading reference set {}", ref_dir.display()))?;
    let (inner, outer) =
        metrics::stability_protocol(&grid, w, &ref_blocks, cfg.eval_points, cfg.eval_seed)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    inner.save(&cfg.out_dir.join("stability-inner.toml"))?;
    outer.save(&cfg.out_dir.join("stability-outer.toml"))?;
    println!("# inner 3x3 region");
    print!("{}", inner.to_toml()?);
    println!("# outer ring");
    print!("{}", outer.to_toml()?);
    println!(
        "# saved to {} and {}",
        cfg.out_dir.join("stability-inner.toml").display(),
        cfg.out_dir.join("stability-outer.toml").display()
    );
    Ok(())
}

/// Shared by tests: evaluate-report pair loaded back from disk.
pub fn load_stability_reports(cfg: &RunConfig) -> anyhow::Result<(EvalReport, EvalReport)> {
    Ok((
        EvalReport::load(&cfg.out_dir.join("stability-inner.toml"))?,
        EvalReport::load(&cfg.out_dir.join("stability-outer.toml"))?,
    ))
}
