//! Command-line driver: corpus generation, three-phase training, seeded
//! inference, metric reports and the ablation harness.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. `FIRSTFILL_OUT_ROOT` rebases relative output paths and
//! `FIRSTFILL_WORKERS` caps the worker thread pool.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use firstfill_core::checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
use firstfill_core::config::{config_hash, FreezePolicy, RunConfig};
use firstfill_core::datagen::{
    corpus_clips, quantize_clip, read_clip, read_mask_png, read_rgb_png, write_corpus,
    write_rgb_png, ClipData, CorpusManifest,
};
use firstfill_core::flowlab::FlowField;
use firstfill_core::metrics::{e_warp, psnr, psnr_masked, ssim, vfid_proxy, ClipMetrics, MetricReport};
use firstfill_core::nn::Adam;
use firstfill_core::npz::Npz;
use firstfill_core::pipeline::{
    infer, run_ablation, train_diffusion, AblationCheckpoints, AblationVariant, FffModel,
    InferenceRequest, TrainPhase,
};
use firstfill_core::types::{MaskSequence, VideoClip};
use firstfill_core::vae2d::train_vae;
use firstfill_core::CoreError;

type Result<T> = std::result::Result<T, CoreError>;

#[derive(Parser)]
#[command(
    name = "firstfill",
    version,
    about = "Flow-guided first-frame-filling video inpainting toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus of moving-shape clips with masks, flows
    /// and occlusion ground truth.
    GenData(GenDataArgs),
    /// Train one phase: the frame autoencoder, the first-frame-conditioned
    /// video pretrain, or an inpainting finetune variant.
    Train(TrainArgs),
    /// Inpaint one clip directory with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted clips against a ground-truth corpus.
    Eval(EvalArgs),
    /// Evaluate the four system variants and write ablation.csv/.json.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Corpus output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of clips to generate.
    #[arg(long)]
    clips: usize,
    /// Corpus seed; clip i derives its stream from (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Vae,
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    NoFff,
    Lp,
    LpDna,
}

impl VariantArg {
    fn to_variant(self) -> AblationVariant {
        match self {
            VariantArg::NoFff => AblationVariant::NoFff,
            VariantArg::Lp => AblationVariant::Lp,
            VariantArg::LpDna => AblationVariant::LpDna,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Which phase to run.
    #[arg(long, value_enum)]
    phase: PhaseArg,
    /// Training corpus directory (from gen-data).
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint and loss-curve output directory.
    #[arg(long)]
    out: PathBuf,
    /// Finetune variant (finetune phase only).
    #[arg(long, value_enum, default_value = "lp-dna")]
    variant: VariantArg,
    /// Continue from a checkpoint of the same phase; restores weights and
    /// optimizer moments, continues the loss CSV, and derives a fresh batch
    /// stream from (seed, completed steps).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Autoencoder checkpoint for the pretrain phase (default: OUT/vae.ckpt).
    #[arg(long)]
    vae_checkpoint: Option<PathBuf>,
    /// Pretrain checkpoint for the finetune phase (default: OUT/pretrain.ckpt).
    #[arg(long)]
    pretrain_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip directory with frame_%04d.png (and gt.npz when propagation runs).
    #[arg(long)]
    input: PathBuf,
    /// Directory with mask_%04d.png (default: the input directory).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Output directory for composited frames.
    #[arg(long)]
    out: PathBuf,
    /// Sampler steps (default: the checkpoint configuration).
    #[arg(long)]
    steps: Option<usize>,
    /// Noise seed (default: the checkpoint configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Start every frame from fresh noise instead of inverted latents.
    #[arg(long)]
    no_inversion: bool,
    /// Disable deformable noise alignment.
    #[arg(long)]
    no_dna: bool,
    /// Disable latent propagation into the first frame.
    #[arg(long)]
    no_lp: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted clips, one subdirectory per corpus clip name.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth corpus directory.
    #[arg(long)]
    gt: PathBuf,
    /// Also compute the flow-warping error from ground-truth flows.
    #[arg(long)]
    flows: bool,
    /// Checkpoint providing the feature extractor for the distribution
    /// metric; omitted, that column is left empty.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report CSV path; a .json twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Accept predictions whose recorded corpus hash differs from the
    /// ground-truth corpus.
    #[arg(long)]
    allow_mixed: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Evaluation corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding finetune_{no_fff,lp,lp_dna}.ckpt.
    #[arg(long)]
    checkpoints: PathBuf,
    /// Output directory for ablation.csv and ablation.json.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    init_workers();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

fn init_workers() {
    if let Ok(v) = std::env::var("FIRSTFILL_WORKERS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid FIRSTFILL_WORKERS={v}"),
        }
    }
}

/// Rebases a relative output path under `FIRSTFILL_OUT_ROOT` when set.
fn resolve_out(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os("FIRSTFILL_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(p),
        None => p,
    }
}

fn load_corpus(root: &Path) -> Result<(CorpusManifest, Vec<ClipData>)> {
    let (manifest, dirs) = corpus_clips(root)?;
    if dirs.is_empty() {
        return Err(CoreError::Data(format!(
            "corpus {} lists no clips",
            root.display()
        )));
    }
    let clips = dirs.iter().map(|d| read_clip(d)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, clips))
}

/// Writes (or extends) a loss curve CSV: header `step,loss`, one row per
/// optimizer step.
fn write_loss_csv(path: &Path, first_step: usize, losses: &[f64], append: bool) -> Result<()> {
    let mut file = if append && path.exists() {
        std::fs::OpenOptions::new().append(true).open(path)?
    } else {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "step,loss")?;
        f
    };
    for (i, loss) in losses.iter().enumerate() {
        writeln!(file, "{},{}", first_step + i, loss)?;
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&a.config)?;
    let out = resolve_out(a.out);
    let manifest = write_corpus(&cfg.data, &out, a.clips, a.seed, a.force)?;
    println!(
        "wrote {} clips to {} (corpus hash {})",
        manifest.clips.len(),
        out.display(),
        &manifest.config_hash[..12]
    );
    Ok(())
}

fn make_meta(
    kind: &str,
    variant: Option<String>,
    step: usize,
    cfg: &RunConfig,
    corpus_hash: &str,
) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.to_string(),
        variant,
        step,
        config_hash: config_hash(cfg),
        corpus_hash: Some(corpus_hash.to_string()),
        latent_scale: 1.0,
        config: cfg.clone(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&a.config)?;
    let out = resolve_out(a.out);
    std::fs::create_dir_all(&out)?;
    let (manifest, clips) = load_corpus(&a.corpus)?;
    let log_every = cfg.train.log_every.max(1);
    let progress = |phase: &'static str| {
        move |step: usize, loss: f64| {
            if step % log_every == 0 {
                println!("[{phase}] step {step}: loss {loss:.6}");
            }
        }
    };

    match a.phase {
        PhaseArg::Vae => {
            if a.resume.is_some() {
                return Err(CoreError::Config(
                    "--resume applies to the pretrain and finetune phases".into(),
                ));
            }
            let mut model = FffModel::init(&cfg);
            let videos: Vec<VideoClip> = clips.iter().map(|c| c.video.clone()).collect();
            let losses = train_vae(&mut model.store, &model.vae, &cfg, &videos, progress("vae"))?;
            write_loss_csv(&out.join("vae_loss.csv"), 0, &losses, false)?;
            let meta = make_meta("vae", None, losses.len(), &cfg, &manifest.config_hash);
            save_checkpoint(&out.join("vae.ckpt"), &model.store, &meta, true)?;
            println!("saved {} after {} steps", out.join("vae.ckpt").display(), losses.len());
        }
        PhaseArg::Pretrain => {
            let mut model = FffModel::init(&cfg);
            let mut opt = Adam::new(cfg.train.lr_pretrain);
            let mut done = 0usize;
            if let Some(resume) = &a.resume {
                let meta = load_checkpoint(resume, &mut model.store)?;
                if meta.kind != "pretrain" {
                    return Err(CoreError::Config(format!(
                        "--resume expects a pretrain checkpoint, found kind {}",
                        meta.kind
                    )));
                }
                done = meta.step;
                opt.t = done as u64;
            } else {
                let vae_ckpt = a
                    .vae_checkpoint
                    .unwrap_or_else(|| out.join("vae.ckpt"));
                if !vae_ckpt.exists() {
                    return Err(CoreError::Data(format!(
                        "missing autoencoder checkpoint {}; run --phase vae first",
                        vae_ckpt.display()
                    )));
                }
                load_checkpoint(&vae_ckpt, &mut model.store)?;
            }
            let remaining = cfg.train.pretrain_steps.saturating_sub(done);
            if remaining == 0 {
                println!("pretrain already complete at step {done}");
                return Ok(());
            }
            let losses = train_diffusion(
                &mut model,
                &clips,
                TrainPhase::Pretrain,
                &cfg.fff,
                remaining,
                &mut opt,
                cfg.train.seed.wrapping_add(done as u64),
                progress("pretrain"),
            )?;
            write_loss_csv(&out.join("pretrain_loss.csv"), done, &losses, done > 0)?;
            let meta = make_meta("pretrain", None, done + remaining, &cfg, &manifest.config_hash);
            save_checkpoint(&out.join("pretrain.ckpt"), &model.store, &meta, true)?;
            println!(
                "saved {} after {} steps",
                out.join("pretrain.ckpt").display(),
                done + remaining
            );
        }
        PhaseArg::Finetune => {
            if cfg.train.finetune_freeze != FreezePolicy::TemporalOnly {
                return Err(CoreError::Config(
                    "the finetune phase enforces the temporal_only freeze policy; \
                     set train.finetune_freeze to \"temporal_only\""
                        .into(),
                ));
            }
            let variant = a.variant.to_variant();
            let key = variant.key();
            let mut model = FffModel::init(&cfg);
            let mut opt = Adam::new(cfg.train.lr_finetune);
            let mut done = 0usize;
            if let Some(resume) = &a.resume {
                let meta = load_checkpoint(resume, &mut model.store)?;
                if meta.kind != "finetune" || meta.variant.as_deref() != Some(key) {
                    return Err(CoreError::Config(format!(
                        "--resume expects a finetune checkpoint of variant {key}"
                    )));
                }
                done = meta.step;
                opt.t = done as u64;
            } else {
                let pre = a
                    .pretrain_checkpoint
                    .unwrap_or_else(|| out.join("pretrain.ckpt"));
                if !pre.exists() {
                    return Err(CoreError::Data(format!(
                        "missing pretrain checkpoint {}; run --phase pretrain first",
                        pre.display()
                    )));
                }
                load_checkpoint(&pre, &mut model.store)?;
            }
            let remaining = cfg.train.finetune_steps.saturating_sub(done);
            if remaining == 0 {
                println!("finetune {key} already complete at step {done}");
                return Ok(());
            }
            // Distinct deterministic batch stream per variant.
            let variant_salt = match variant {
                AblationVariant::NoFff => 1u64,
                AblationVariant::Lp => 2,
                _ => 3,
            };
            let seed = cfg
                .train
                .seed
                .wrapping_add(1_000 * variant_salt)
                .wrapping_add(done as u64);
            let fff = variant.flags(&cfg.fff);
            let losses = train_diffusion(
                &mut model,
                &clips,
                TrainPhase::Finetune,
                &fff,
                remaining,
                &mut opt,
                seed,
                progress(key),
            )?;
            let csv = out.join(format!("finetune_{key}_loss.csv"));
            write_loss_csv(&csv, done, &losses, done > 0)?;
            let meta = make_meta(
                "finetune",
                Some(key.to_string()),
                done + remaining,
                &cfg,
                &manifest.config_hash,
            );
            let ckpt = out.join(format!("finetune_{key}.ckpt"));
            save_checkpoint(&ckpt, &model.store, &meta, true)?;
            println!("saved {} after {} steps", ckpt.display(), done + remaining);
        }
    }
    Ok(())
}

/// Reads frame_%04d.png files from a directory into `[S, 3, H, W]`.
fn read_frames_dir(dir: &Path) -> Result<ndarray::Array4<f64>> {
    let mut frames = Vec::new();
    for i in 0.. {
        let path = dir.join(format!("frame_{i:04}.png"));
        if !path.exists() {
            break;
        }
        frames.push(read_rgb_png(&path)?);
    }
    if frames.is_empty() {
        return Err(CoreError::Data(format!(
            "no frame_%04d.png files in {}",
            dir.display()
        )));
    }
    let (c, h, w) = frames[0].dim();
    let mut out = ndarray::Array4::zeros((frames.len(), c, h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != (c, h, w) {
            return Err(CoreError::Data(format!(
                "inconsistent frame sizes in {}",
                dir.display()
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(f);
    }
    Ok(out)
}

/// Reads mask_%04d.png files from a directory into `[S, H, W]`.
fn read_masks_dir(dir: &Path) -> Result<ndarray::Array3<u8>> {
    let mut masks = Vec::new();
    for i in 0.. {
        let path = dir.join(format!("mask_{i:04}.png"));
        if !path.exists() {
            break;
        }
        masks.push(read_mask_png(&path)?);
    }
    if masks.is_empty() {
        return Err(CoreError::Data(format!(
            "no mask_%04d.png files in {}",
            dir.display()
        )));
    }
    let (h, w) = masks[0].dim();
    let mut out = ndarray::Array3::zeros((masks.len(), h, w));
    for (i, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(CoreError::Data(format!(
                "inconsistent mask sizes in {}",
                dir.display()
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i).assign(m);
    }
    Ok(out)
}

/// Loads the adjacent forward flows from a clip's gt.npz.
fn read_flows(path: &Path, frames: usize) -> Result<Vec<FlowField>> {
    let npz = Npz::read_from(path).map_err(|e| {
        CoreError::Data(format!(
            "latent propagation needs flow data; cannot read {}: {e}",
            path.display()
        ))
    })?;
    let flows = npz.required("flows")?.to_f64();
    let flows: ndarray::Array4<f64> = flows
        .into_dimensionality()
        .map_err(|_| CoreError::Data("flows array is not [S-1, H, W, 2]".into()))?;
    if flows.dim().0 + 1 != frames {
        return Err(CoreError::Data(format!(
            "{} flows cannot chain {frames} frames",
            flows.dim().0
        )));
    }
    Ok(flows
        .outer_iter()
        .map(|f| FlowField { data: f.to_owned() })
        .collect())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let meta = read_meta(&a.checkpoint)?;
    let cfg = meta.config.clone();
    let mut model = FffModel::init(&cfg);
    load_checkpoint(&a.checkpoint, &mut model.store)?;

    let frames = read_frames_dir(&a.input)?;
    let mask_dir = a.mask.clone().unwrap_or_else(|| a.input.clone());
    let masks = read_masks_dir(&mask_dir)?;
    if masks.dim().0 != frames.dim().0 {
        return Err(CoreError::Data(format!(
            "{} masks do not match {} frames",
            masks.dim().0,
            frames.dim().0
        )));
    }
    let clip = VideoClip::new(frames)?;
    let masks = MaskSequence::new(masks)?;

    let mut fff = cfg.fff.clone();
    if a.no_lp {
        fff.enable_propagation = false;
    }
    if a.no_dna {
        fff.enable_alignment = false;
    }
    let use_inversion = cfg.infer.use_inversion && !a.no_inversion;
    let flows = if fff.enable_propagation {
        read_flows(&a.input.join("gt.npz"), clip.frames())?
    } else {
        Vec::new()
    };
    let steps = a.steps.unwrap_or(cfg.diffusion.ddim_steps);
    let seed = a.seed.unwrap_or(cfg.infer.seed);

    let req = InferenceRequest {
        clip: clip.clone(),
        masks,
        flows,
        steps,
        seed,
    };
    let result = infer(&model, &fff, use_inversion, &req)?;

    let out = resolve_out(a.out);
    std::fs::create_dir_all(&out)?;
    let quant = quantize_clip(&result);
    for i in 0..quant.frames() {
        write_rgb_png(
            &out.join(format!("frame_{i:04}.png")),
            quant.data.index_axis(ndarray::Axis(0), i),
        )?;
    }
    let manifest = serde_json::json!({
        "config_hash": meta.config_hash,
        "corpus_hash": meta.corpus_hash,
        "checkpoint_kind": meta.kind,
        "checkpoint_variant": meta.variant,
        "input": a.input.display().to_string(),
        "seed": seed,
        "steps": steps,
        "use_inversion": use_inversion,
        "propagation": fff.enable_propagation,
        "alignment": fff.enable_alignment,
    });
    std::fs::write(
        out.join("run.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    println!("wrote {} frames to {}", quant.frames(), out.display());
    Ok(())
}

fn occlusion_rows(occ: &ndarray::Array3<u8>) -> Vec<ndarray::Array2<u8>> {
    occ.outer_iter().map(|r| r.to_owned()).collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (manifest, gt_dirs) = corpus_clips(&a.gt)?;
    if manifest.clips.is_empty() {
        return Err(CoreError::Data("ground-truth corpus lists no clips".into()));
    }
    let extractor = match &a.checkpoint {
        Some(path) => {
            let meta = read_meta(path)?;
            let mut model = FffModel::init(&meta.config);
            load_checkpoint(path, &mut model.store)?;
            Some(model)
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut pred_hashes: BTreeSet<String> = BTreeSet::new();
    let mut feats_pred: Vec<ndarray::Array2<f64>> = Vec::new();
    let mut feats_gt: Vec<ndarray::Array2<f64>> = Vec::new();
    for (entry, gt_dir) in manifest.clips.iter().zip(&gt_dirs) {
        let pred_dir = a.pred.join(&entry.name);
        if !pred_dir.is_dir() {
            return Err(CoreError::Data(format!(
                "prediction directory missing for clip {}",
                entry.name
            )));
        }
        let pred = read_frames_dir(&pred_dir)?;
        let gt = read_clip(gt_dir)?;
        if pred.dim() != gt.video.data.dim() {
            return Err(CoreError::Data(format!(
                "clip {}: prediction shape {:?} does not match ground truth {:?}",
                entry.name,
                pred.dim(),
                gt.video.data.dim()
            )));
        }
        let run_path = pred_dir.join("run.json");
        if run_path.exists() {
            let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&run_path)?)?;
            if let Some(h) = value.get("corpus_hash").and_then(|v| v.as_str()) {
                pred_hashes.insert(h.to_string());
            }
        }
        let pred_clip = VideoClip::new(pred)?;
        let warp_err = if a.flows {
            1e3 * e_warp(
                &pred_clip,
                &gt.gt.flows_reverse,
                &occlusion_rows(&gt.gt.occlusion),
            )?
        } else {
            f64::NAN
        };
        if let Some(model) = &extractor {
            feats_pred.push(model.vae.frame_features(&model.store, &pred_clip.data));
            feats_gt.push(model.vae.frame_features(&model.store, &gt.video.data));
        }
        rows.push((
            entry.name.clone(),
            ClipMetrics {
                psnr: psnr(&pred_clip, &gt.video)?,
                psnr_masked: psnr_masked(&pred_clip, &gt.video, &gt.masks)?,
                ssim: ssim(&pred_clip, &gt.video)?,
                e_warp_x1e3: warp_err,
            },
        ));
    }

    if !a.allow_mixed {
        if pred_hashes.len() > 1 {
            return Err(CoreError::Data(
                "predictions come from different corpora (mixed corpus hashes); \
                 pass --allow-mixed to evaluate anyway"
                    .into(),
            ));
        }
        if let Some(h) = pred_hashes.iter().next() {
            if h != &manifest.config_hash {
                return Err(CoreError::Data(format!(
                    "prediction corpus hash {h} does not match ground truth {}; \
                     pass --allow-mixed to evaluate anyway",
                    manifest.config_hash
                )));
            }
        }
    }

    let vfid = match &extractor {
        Some(_) => {
            let stack = |parts: &[ndarray::Array2<f64>]| {
                let total: usize = parts.iter().map(|p| p.nrows()).sum();
                let dim = parts[0].ncols();
                let mut out = ndarray::Array2::zeros((total, dim));
                let mut row = 0;
                for p in parts {
                    for r in 0..p.nrows() {
                        out.row_mut(row).assign(&p.row(r));
                        row += 1;
                    }
                }
                out
            };
            vfid_proxy(&stack(&feats_pred), &stack(&feats_gt))?
        }
        None => f64::NAN,
    };
    let report = MetricReport::new(rows, vfid);
    let out = resolve_out(a.out);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&out, report.to_csv()?)?;
    let mut json = serde_json::to_value(&report)?;
    json.as_object_mut()
        .expect("report serializes to an object")
        .insert(
            "corpus_hash".into(),
            serde_json::Value::String(manifest.config_hash.clone()),
        );
    std::fs::write(out.with_extension("json"), serde_json::to_vec_pretty(&json)?)?;
    let agg = &report.aggregate;
    println!(
        "{} clips: psnr {:.3} dB, masked {:.3} dB, ssim {:.4}",
        report.clips.len(),
        agg.psnr,
        agg.psnr_masked,
        agg.ssim
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = RunConfig::from_path(&a.config)?;
    let (manifest, clips) = load_corpus(&a.corpus)?;
    let ckpts = AblationCheckpoints::in_dir(&a.checkpoints);
    let out = resolve_out(a.out);
    let report = run_ablation(&cfg, &ckpts, &clips, &out)?;
    let json_path = out.join("ablation.json");
    let mut json: serde_json::Value = serde_json::from_slice(&std::fs::read(&json_path)?)?;
    json.as_object_mut()
        .expect("ablation report serializes to an object")
        .insert(
            "config_hash".into(),
            serde_json::Value::String(config_hash(&cfg)),
        );
    json.as_object_mut().unwrap().insert(
        "corpus_hash".into(),
        serde_json::Value::String(manifest.config_hash),
    );
    std::fs::write(&json_path, serde_json::to_vec_pretty(&json)?)?;
    println!(
        "{:<12} {:>8} {:>12} {:>8} {:>12} {:>11}",
        "variant", "psnr", "psnr_masked", "ssim", "e_warp_x1e3", "vfid_proxy"
    );
    for row in &report.rows {
        let m = &row.report.aggregate;
        println!(
            "{:<12} {:>8.3} {:>12.3} {:>8.4} {:>12.4} {:>11.5}",
            row.variant, m.psnr, m.psnr_masked, m.ssim, m.e_warp_x1e3, row.report.vfid_proxy
        );
    }
    println!("reports in {}", out.display());
    Ok(())
}
