//! End-to-end pipeline: the bundled model, the training loop over noised
//! latents, seeded inference with first-frame filling, and the ablation
//! harness that scores each variant on an evaluation corpus.
//!
//! Conditioning follows one scheme everywhere: the conditional latents of
//! the masked clip enter through the merge convolution in front of the
//! denoiser trunk. Training runs `denoise(fff(merge(L_t, L^m)), t)`; the
//! samplers re-merge their evolving state with the same convolution at every
//! step, so the chain stays in plain latent space and decodes directly. The
//! fill module itself runs once per training step and once at the start of
//! sampling.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{FffConfig, FreezePolicy, RunConfig, DOWNSAMPLE};
use crate::datagen::ClipData;
use crate::diffusion::{ddim_invert, ddim_sample, NoiseSchedule};
use crate::fff::{fff_forward, fff_forward_var, DnaWeights, PropagationPlan};
use crate::flowlab::{complete_flow, downsample_flow, FlowField};
use crate::metrics::{e_warp, psnr, psnr_masked, ssim, vfid_proxy, ClipMetrics, MetricReport};
use crate::nn::{init_rng, randn, sample_timestep, Adam, ParamStore, Session};
use crate::types::{LatentClip, MaskSequence, VideoClip};
use crate::unet3d::{finetune_trainable, UNet3d};
use crate::vae2d::{masked_conditional_latent, Vae2d};
use crate::{CoreError, Result};

/// The complete trainable system: autoencoder, conditioning merge, denoiser,
/// alignment module and the noise schedule, all parameters in one store.
pub struct FffModel {
    pub store: ParamStore,
    pub vae: Vae2d,
    pub unet: UNet3d,
    pub dna: DnaWeights,
    pub schedule: NoiseSchedule,
    pub config: RunConfig,
}

impl FffModel {
    /// Builds a fresh model from configuration seeds. The alignment module
    /// is always constructed (checkpoints stay uniform across ablation
    /// variants); config flags decide whether it runs.
    pub fn init(config: &RunConfig) -> Self {
        let mut store = ParamStore::new();
        let mut vae_rng = init_rng(config.vae.seed);
        let vae = Vae2d::init(&mut store, "vae", &config.vae, &mut vae_rng);
        let mut net_rng = init_rng(config.unet.seed);
        let c = config.vae.latent_channels;
        let unet = UNet3d::init(&mut store, &config.unet, c, &mut net_rng);
        let dna = DnaWeights::init(&mut store, &config.fff, c, &mut net_rng);
        let schedule = NoiseSchedule::linear(
            config.diffusion.timesteps,
            config.diffusion.beta_start,
            config.diffusion.beta_end,
        );
        Self {
            store,
            vae,
            unet,
            dna,
            schedule,
            config: config.clone(),
        }
    }

    /// Latent grid shape `[S, C, h, w]` for a clip of the given pixel shape.
    pub fn latent_shape(&self, s: usize, h: usize, w: usize) -> [usize; 4] {
        [
            s,
            self.config.vae.latent_channels,
            h / DOWNSAMPLE,
            w / DOWNSAMPLE,
        ]
    }
}

/// One training sample: a clean clip, its mask track, ground-truth adjacent
/// flows (frame i grid, pointing into i+1, pixel resolution), the sampled
/// timestep, the noise target `eps`, and the independent noise `fill`
/// consumed by the filling module.
pub struct TrainBatch {
    pub clip: VideoClip,
    pub masks: MaskSequence,
    pub flows: Vec<FlowField>,
    pub t: usize,
    pub eps: Array4<f64>,
    pub fill: Array4<f64>,
}

/// First-frame-conditioning masks: frame 1 fully visible, every later frame
/// fully hidden. Pretraining on these turns the denoiser into a
/// first-frame-conditioned video generator.
pub fn degenerate_masks(s: usize, h: usize, w: usize) -> MaskSequence {
    let mut m = Array3::ones((s, h, w));
    m.index_axis_mut(Axis(0), 0).fill(0u8);
    MaskSequence::new(m).expect("valid mask stack")
}

/// Prepares flows for latent-space propagation: each adjacent flow is
/// completed across the union of the two masks it connects (flow estimates
/// under a mask are untrustworthy), then downsampled to the latent grid.
pub fn prepare_latent_flows(
    flows: &[FlowField],
    masks: &MaskSequence,
) -> Result<Vec<FlowField>> {
    let (s, h, w) = masks.data.dim();
    if flows.len() + 1 != s {
        return Err(CoreError::Config(format!(
            "{} flows cannot chain {s} frames",
            flows.len()
        )));
    }
    let mut out = Vec::with_capacity(flows.len());
    for (i, flow) in flows.iter().enumerate() {
        if (flow.height(), flow.width()) != (h, w) {
            return Err(CoreError::Config(format!(
                "flow {}x{} does not match {h}x{w} masks",
                flow.height(),
                flow.width()
            )));
        }
        let mut union = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                union[[y, x]] =
                    u8::from(masks.data[[i, y, x]] != 0 || masks.data[[i + 1, y, x]] != 0);
            }
        }
        let completed = complete_flow(flow, &union)?;
        out.push(downsample_flow(&completed, DOWNSAMPLE)?);
    }
    Ok(out)
}

fn validate_batch(model: &FffModel, batch: &TrainBatch) -> Result<()> {
    let t_max = model.schedule.timesteps();
    if batch.t == 0 || batch.t > t_max {
        return Err(CoreError::Config(format!(
            "timestep {} outside 1..={t_max}",
            batch.t
        )));
    }
    let (s, _, h, w) = batch.clip.data.dim();
    if batch.masks.data.dim() != (s, h, w) {
        return Err(CoreError::Config("mask shape does not match clip".into()));
    }
    let latent = model.latent_shape(s, h, w);
    let want = (latent[0], latent[1], latent[2], latent[3]);
    if batch.eps.dim() != want || batch.fill.dim() != want {
        return Err(CoreError::Config(format!(
            "noise shape {:?} does not match latent grid {want:?}",
            batch.eps.dim()
        )));
    }
    Ok(())
}

/// One optimization step: encode, noise, condition, fill, predict, MSE over
/// every latent cell, backprop, Adam update. Returns the loss.
pub fn train_step(
    model: &mut FffModel,
    opt: &mut Adam,
    fff: &FffConfig,
    batch: &TrainBatch,
) -> Result<f64> {
    validate_batch(model, batch)?;
    batch.clip.check_divisible(DOWNSAMPLE)?;
    let FffModel {
        store,
        vae,
        unet,
        dna,
        schedule,
        ..
    } = model;

    let l0 = vae.encode_clip(&*store, &batch.clip);
    let l_t = schedule.add_noise(&l0.data, &batch.eps, batch.t);
    let mc = masked_conditional_latent(vae, &*store, &batch.clip, &batch.masks)?;

    let plan = if fff.enable_propagation {
        let latent_flows = prepare_latent_flows(&batch.flows, &batch.masks)?;
        Some(PropagationPlan::build(
            &mc.mask_latent,
            &latent_flows,
            fff.validity_threshold,
        )?)
    } else {
        None
    };
    let dna_opt = if fff.enable_alignment { Some(&*dna) } else { None };

    let (loss_val, grads) = {
        let mut sess = Session::new(&*store);
        let xt = sess.constant(l_t.into_dyn());
        let cond = sess.constant(mc.latents.data.clone().into_dyn());
        let merged = unet.merge(&mut sess, xt, cond);
        let z_prime = fff_forward_var(
            &mut sess,
            merged,
            &mc.mask_latent,
            plan.as_ref(),
            &batch.fill,
            dna_opt,
        );
        let eps_hat = unet.forward(&mut sess, z_prime, batch.t);
        let target = sess.constant(batch.eps.clone().into_dyn());
        let loss = sess.tape.mse(eps_hat, target);
        let loss_val = sess.tape.value(loss)[[0]];
        (loss_val, sess.grads(loss))
    };
    if !loss_val.is_finite() {
        return Err(CoreError::Numeric(format!(
            "training loss {loss_val} at t={} (mask coverage frame 1: {:.3}); \
             aborting before the optimizer step",
            batch.t,
            batch.masks.coverage(0)
        )));
    }
    opt.step(store, &grads);
    Ok(loss_val)
}

/// Which diffusion training phase is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    /// First-frame-conditioned video generation on degenerate masks.
    Pretrain,
    /// Inpainting adaptation on the corpus mask tracks.
    Finetune,
}

/// Whether a parameter trains in the given phase. The autoencoder is frozen
/// in both diffusion phases; the finetune phase additionally applies the
/// configured freeze policy.
pub fn trainable_in_phase(phase: TrainPhase, policy: FreezePolicy, name: &str) -> bool {
    if name.starts_with("vae.") {
        return false;
    }
    match phase {
        TrainPhase::Pretrain => true,
        TrainPhase::Finetune => finetune_trainable(policy, name),
    }
}

/// Runs `steps` optimizer steps over randomly drawn clips. Pretraining
/// forces the filling module off and substitutes degenerate masks; the
/// finetune phase uses each clip's own mask track and the supplied flags.
/// The optimizer comes from the caller so a resumed run can restore its
/// step counter. `on_step` observes every (step, loss) pair, in order.
pub fn train_diffusion(
    model: &mut FffModel,
    clips: &[ClipData],
    phase: TrainPhase,
    fff: &FffConfig,
    steps: usize,
    opt: &mut Adam,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(CoreError::Config("training needs at least one clip".into()));
    }
    let mut fff = fff.clone();
    if phase == TrainPhase::Pretrain {
        fff.enable_propagation = false;
        fff.enable_alignment = false;
    }
    let policy = model.config.train.finetune_freeze;
    model
        .store
        .set_trainable(|name| trainable_in_phase(phase, policy, name));
    let t_max = model.config.diffusion.timesteps;
    let c = model.config.vae.latent_channels;
    let mut rng = init_rng(seed);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let clip = &clips[rng.gen_range(0..clips.len())];
        let (s, _, h, w) = clip.video.data.dim();
        let masks = match phase {
            TrainPhase::Pretrain => degenerate_masks(s, h, w),
            TrainPhase::Finetune => clip.masks.clone(),
        };
        let t = sample_timestep(&mut rng, t_max);
        let shape = [s, c, h / DOWNSAMPLE, w / DOWNSAMPLE];
        let eps = randn(&mut rng, &shape).into_dimensionality().expect("4d");
        let fill = randn(&mut rng, &shape).into_dimensionality().expect("4d");
        let batch = TrainBatch {
            clip: clip.video.clone(),
            masks,
            flows: clip.gt.flows.clone(),
            t,
            eps,
            fill,
        };
        let loss = train_step(model, opt, &fff, &batch)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}

use rand::Rng;

/// One inference job: a clip (raw or with masked pixels already zeroed),
/// its binary mask track, ground-truth adjacent flows for propagation
/// routing, the sampler step count and the noise seed.
pub struct InferenceRequest {
    pub clip: VideoClip,
    pub masks: MaskSequence,
    pub flows: Vec<FlowField>,
    pub steps: usize,
    pub seed: u64,
}

/// Applies the merge convolution outside of training.
fn merge_eval(store: &ParamStore, unet: &UNet3d, x: &Array4<f64>, cond: &Array4<f64>) -> Array4<f64> {
    let mut sess = Session::new(store);
    let xv = sess.constant(x.clone().into_dyn());
    let cv = sess.constant(cond.clone().into_dyn());
    let merged = unet.merge(&mut sess, xv, cv);
    sess.tape
        .value(merged)
        .clone()
        .into_dimensionality()
        .expect("merge keeps rank 4")
}

/// Replaces masked pixels of the original with generated content; unmasked
/// pixels are copied from the original, bit for bit.
pub fn composite(
    original: &VideoClip,
    generated: &VideoClip,
    masks: &MaskSequence,
) -> Result<VideoClip> {
    let dims = original.data.dim();
    if generated.data.dim() != dims {
        return Err(CoreError::Config("generated clip shape mismatch".into()));
    }
    let (s, _, h, w) = dims;
    if masks.data.dim() != (s, h, w) {
        return Err(CoreError::Config("mask shape mismatch".into()));
    }
    let mut out = original.data.clone();
    for i in 0..s {
        for y in 0..h {
            for x in 0..w {
                if masks.data[[i, y, x]] != 0 {
                    for ch in 0..3 {
                        out[[i, ch, y, x]] = generated.data[[i, ch, y, x]];
                    }
                }
            }
        }
    }
    VideoClip::new(out)
}

/// Full inference: conditional encoding, starting-noise assembly (inverted
/// or fresh), first-frame filling, deterministic sampling, decoding and
/// pixel compositing.
///
/// The starting state is assembled per the testing-stage recipe: with
/// inversion on, frames 2..S start from the inverted conditional latents and
/// frame 1 from fresh noise (drawn lazily, one frame only); with inversion
/// off, every frame starts from fresh noise. Both branches pass through the
/// same merge convolution the trainer used.
pub fn infer(
    model: &FffModel,
    fff: &FffConfig,
    use_inversion: bool,
    req: &InferenceRequest,
) -> Result<VideoClip> {
    if req.steps < 1 {
        return Err(CoreError::Config("sampler needs at least one step".into()));
    }
    let (s, _, ph, pw) = req.clip.data.dim();
    if req.masks.data.dim() != (s, ph, pw) {
        return Err(CoreError::Config("mask shape does not match clip".into()));
    }
    let store = &model.store;
    let mc = masked_conditional_latent(&model.vae, store, &req.clip, &req.masks)?;
    let cond = mc.latents.data.clone();
    let (_, c, h, w) = cond.dim();

    let mut rng = init_rng(req.seed);
    let x_t: Array4<f64> = if use_inversion {
        let inverted = ddim_invert(&model.schedule, &cond, req.steps, |x, t| {
            model.unet.predict(store, x, &cond, t)
        })?;
        let mut assembled = merge_eval(store, &model.unet, &inverted, &cond);
        let n1: Array4<f64> = randn(&mut rng, &[1, c, h, w])
            .into_dimensionality()
            .expect("4d");
        let cond1 = cond.slice(s![0..1, .., .., ..]).to_owned();
        let rand1 = merge_eval(store, &model.unet, &n1, &cond1);
        assembled
            .index_axis_mut(Axis(0), 0)
            .assign(&rand1.index_axis(Axis(0), 0));
        assembled
    } else {
        let n: Array4<f64> = randn(&mut rng, &[s, c, h, w])
            .into_dimensionality()
            .expect("4d");
        merge_eval(store, &model.unet, &n, &cond)
    };

    let fill: Array4<f64> = randn(&mut rng, &[s, c, h, w])
        .into_dimensionality()
        .expect("4d");
    let latent_flows = if fff.enable_propagation {
        prepare_latent_flows(&req.flows, &req.masks)?
    } else {
        Vec::new()
    };
    let weights = if fff.enable_alignment {
        Some(&model.dna)
    } else {
        None
    };
    let z_t = fff_forward(
        store,
        fff,
        weights,
        &LatentClip::new(x_t),
        &mc.mask_latent,
        &latent_flows,
        &fill,
    )?;

    let z0 = ddim_sample(&model.schedule, &z_t.data, req.steps, |x, t| {
        model.unet.predict(store, x, &cond, t)
    })?;
    let decoded = model.vae.decode_clip(store, &LatentClip::new(z0));
    composite(&req.clip, &decoded, &req.masks)
}

/// The four evaluated system variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AblationVariant {
    /// No filling module at all: every frame starts from conditioned noise.
    NoFff,
    /// Latent propagation into frame 1, no alignment, no inversion.
    Lp,
    /// Propagation plus deformable noise alignment.
    LpDna,
    /// Propagation, alignment, and inverted noise for frames 2..S.
    LpDnaInv,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::NoFff,
        AblationVariant::Lp,
        AblationVariant::LpDna,
        AblationVariant::LpDnaInv,
    ];

    pub fn key(self) -> &'static str {
        match self {
            AblationVariant::NoFff => "no_fff",
            AblationVariant::Lp => "lp",
            AblationVariant::LpDna => "lp_dna",
            AblationVariant::LpDnaInv => "lp_dna_inv",
        }
    }

    pub fn use_inversion(self) -> bool {
        matches!(self, AblationVariant::LpDnaInv)
    }

    /// Effective filling flags, inheriting tuning knobs from `base`.
    pub fn flags(self, base: &FffConfig) -> FffConfig {
        let mut f = base.clone();
        match self {
            AblationVariant::NoFff => {
                f.enable_propagation = false;
                f.enable_alignment = false;
            }
            AblationVariant::Lp => {
                f.enable_propagation = true;
                f.enable_alignment = false;
            }
            AblationVariant::LpDna | AblationVariant::LpDnaInv => {
                f.enable_propagation = true;
                f.enable_alignment = true;
            }
        }
        f
    }

    /// Name of the finetuned checkpoint this variant evaluates with; the
    /// inversion variant reuses the propagation-plus-alignment weights.
    pub fn trained_as(self) -> &'static str {
        match self {
            AblationVariant::NoFff => "no_fff",
            AblationVariant::Lp => "lp",
            AblationVariant::LpDna | AblationVariant::LpDnaInv => "lp_dna",
        }
    }
}

/// Finetuned checkpoint locations for the ablation run.
pub struct AblationCheckpoints {
    pub no_fff: PathBuf,
    pub lp: PathBuf,
    pub lp_dna: PathBuf,
}

impl AblationCheckpoints {
    /// Conventional file names under a checkpoint directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            no_fff: dir.join("finetune_no_fff.ckpt"),
            lp: dir.join("finetune_lp.ckpt"),
            lp_dna: dir.join("finetune_lp_dna.ckpt"),
        }
    }

    fn for_variant(&self, v: AblationVariant) -> &Path {
        match v.trained_as() {
            "no_fff" => &self.no_fff,
            "lp" => &self.lp,
            _ => &self.lp_dna,
        }
    }
}

fn occlusion_rows(occ: &Array3<u8>) -> Vec<Array2<u8>> {
    occ.outer_iter().map(|r| r.to_owned()).collect()
}

fn clip_metrics(out: &VideoClip, clip: &ClipData) -> Result<ClipMetrics> {
    Ok(ClipMetrics {
        psnr: psnr(out, &clip.video)?,
        psnr_masked: psnr_masked(out, &clip.video, &clip.masks)?,
        ssim: ssim(out, &clip.video)?,
        e_warp_x1e3: 1e3 * e_warp(out, &clip.gt.flows_reverse, &occlusion_rows(&clip.gt.occlusion))?,
    })
}

/// Scores one loaded model over an evaluation corpus: composited outputs
/// against the clean clips, plus the set-level feature-distribution
/// distance. Clips run in parallel; per-clip seeds derive from `base_seed`
/// and the clip index, so repeated runs are identical.
pub fn evaluate_model(
    model: &FffModel,
    fff: &FffConfig,
    use_inversion: bool,
    clips: &[ClipData],
    steps: usize,
    base_seed: u64,
) -> Result<MetricReport> {
    if clips.is_empty() {
        return Err(CoreError::Data("evaluation corpus is empty".into()));
    }
    let per_clip: Vec<(String, ClipMetrics, ndarray::Array2<f64>, ndarray::Array2<f64>)> = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| -> Result<_> {
            let req = InferenceRequest {
                clip: clip.video.clone(),
                masks: clip.masks.clone(),
                flows: clip.gt.flows.clone(),
                steps,
                seed: base_seed.wrapping_add(i as u64),
            };
            let out = infer(model, fff, use_inversion, &req)?;
            let metrics = clip_metrics(&out, clip)?;
            let feat_out = model.vae.frame_features(&model.store, &out.data);
            let feat_gt = model.vae.frame_features(&model.store, &clip.video.data);
            Ok((format!("clip_{i:04}"), metrics, feat_out, feat_gt))
        })
        .collect::<Result<Vec<_>>>()?;

    let dim = per_clip[0].2.ncols();
    let total: usize = per_clip.iter().map(|r| r.2.nrows()).sum();
    let mut feats_out = Array2::zeros((total, dim));
    let mut feats_gt = Array2::zeros((total, dim));
    let mut row = 0;
    for (_, _, fo, fg) in &per_clip {
        for r in 0..fo.nrows() {
            feats_out.row_mut(row).assign(&fo.row(r));
            feats_gt.row_mut(row).assign(&fg.row(r));
            row += 1;
        }
    }
    let vfid = vfid_proxy(&feats_out, &feats_gt)?;
    let rows = per_clip
        .into_iter()
        .map(|(id, m, _, _)| (id, m))
        .collect();
    Ok(MetricReport::new(rows, vfid))
}

/// Per-variant metric tables.
#[derive(Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
}

impl AblationReport {
    pub fn variant(&self, key: &str) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.variant == key)
            .map(|r| &r.report)
    }

    /// CSV rendering: per-clip rows for every variant, each variant closed
    /// by its aggregate row (the only rows with a vfid_proxy value).
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "variant",
            "clip_id",
            "psnr",
            "psnr_masked",
            "ssim",
            "e_warp_x1e3",
            "vfid_proxy",
        ])
        .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v:.6}")
            } else {
                String::new()
            }
        };
        for row in &self.rows {
            for (id, m) in &row.report.clips {
                wtr.write_record([
                    row.variant.as_str(),
                    id.as_str(),
                    &fmt(m.psnr),
                    &fmt(m.psnr_masked),
                    &fmt(m.ssim),
                    &fmt(m.e_warp_x1e3),
                    "",
                ])
                .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
            }
            let a = &row.report.aggregate;
            wtr.write_record([
                row.variant.as_str(),
                "aggregate",
                &fmt(a.psnr),
                &fmt(a.psnr_masked),
                &fmt(a.ssim),
                &fmt(a.e_warp_x1e3),
                &fmt(row.report.vfid_proxy),
            ])
            .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| CoreError::Data(format!("csv utf8: {e}")))
    }
}

/// Evaluates the four variants with their finetuned checkpoints and writes
/// `ablation.csv` and `ablation.json` into `out_dir`.
pub fn run_ablation(
    config: &RunConfig,
    ckpts: &AblationCheckpoints,
    clips: &[ClipData],
    out_dir: &Path,
) -> Result<AblationReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for v in AblationVariant::ALL {
        let mut model = FffModel::init(config);
        let path = ckpts.for_variant(v);
        crate::checkpoint::load_checkpoint(path, &mut model.store)
            .map_err(|e| CoreError::Data(format!("variant {}: {e}", v.key())))?;
        let report = evaluate_model(
            &model,
            &v.flags(&config.fff),
            v.use_inversion(),
            clips,
            config.diffusion.ddim_steps,
            config.infer.seed,
        )?;
        rows.push(AblationRow {
            variant: v.key().to_string(),
            report,
        });
    }
    let report = AblationReport { rows };
    std::fs::write(
        out_dir.join("ablation.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("ablation.csv"), report.to_csv()?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{save_checkpoint, CheckpointMeta};
    use crate::config::config_hash;
    use crate::datagen::generate_clip;

    /// Small configuration for pipeline tests: 32x32 frames, 4 frames per
    /// clip, an 8x8 latent grid, and a short schedule.
    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.frames = 4;
        cfg.data.height = 32;
        cfg.data.width = 32;
        cfg.vae.widths = [8, 16];
        cfg.vae.groups = 8;
        cfg.vae.latent_channels = 2;
        cfg.diffusion.timesteps = 40;
        cfg.diffusion.ddim_steps = 4;
        cfg.unet.widths = vec![8, 16];
        cfg.unet.temporal_levels = vec![1];
        cfg.unet.groups = 8;
        cfg.unet.time_dim = 16;
        cfg.fff.dna_width = 8;
        cfg.validate().expect("tiny config is valid");
        cfg
    }

    fn tiny_batch(cfg: &RunConfig, model: &FffModel, seed: u64, t: usize) -> (ClipData, TrainBatch) {
        let clip = generate_clip(&cfg.data, seed, 0);
        let (s, _, h, w) = clip.video.data.dim();
        let shape = model.latent_shape(s, h, w);
        let mut rng = init_rng(seed ^ 0x5eed);
        let eps = randn(&mut rng, &shape).into_dimensionality().unwrap();
        let fill = randn(&mut rng, &shape).into_dimensionality().unwrap();
        let batch = TrainBatch {
            clip: clip.video.clone(),
            masks: clip.masks.clone(),
            flows: clip.gt.flows.clone(),
            t,
            eps,
            fill,
        };
        (clip, batch)
    }

    #[test]
    fn fresh_model_loss_equals_noise_energy_exactly() {
        // The prediction head is zero-initialized, so a fresh model predicts
        // exactly zero noise and the loss must equal mean(eps^2) bit for bit.
        let cfg = tiny_config();
        let mut model = FffModel::init(&cfg);
        let (_, batch) = tiny_batch(&cfg, &model, 3, 1);
        let zero_pred = model.unet.predict(
            &model.store,
            &batch.eps,
            &Array4::zeros(batch.eps.raw_dim()),
            1,
        );
        assert!(zero_pred.iter().all(|&v| v == 0.0), "fresh head is silent");
        let expected = batch.eps.mapv(|v| v * v).mean().unwrap();
        let mut opt = Adam::new(1e-3);
        let loss = train_step(&mut model, &mut opt, &cfg.fff, &batch).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        // Equality up to summation order: the tape and ndarray reduce the
        // mean in different associations.
        assert!(
            (loss - expected).abs() < 1e-12 * expected.max(1.0),
            "{loss} vs {expected}"
        );
    }

    #[test]
    fn nan_input_aborts_with_numeric_error() {
        let cfg = tiny_config();
        let mut model = FffModel::init(&cfg);
        let (_, mut batch) = tiny_batch(&cfg, &model, 4, 7);
        batch.eps[[0, 0, 0, 0]] = f64::NAN;
        let mut opt = Adam::new(1e-3);
        let before = model.store.checksum(|_| true);
        let err = train_step(&mut model, &mut opt, &cfg.fff, &batch).unwrap_err();
        assert!(matches!(err, CoreError::Numeric(_)), "got {err}");
        assert_eq!(
            model.store.checksum(|_| true),
            before,
            "no optimizer step happens on a numeric abort"
        );
    }

    #[test]
    fn bad_timestep_and_bad_shapes_are_config_errors() {
        let cfg = tiny_config();
        let mut model = FffModel::init(&cfg);
        let (_, mut batch) = tiny_batch(&cfg, &model, 5, 1);
        batch.t = 0;
        let mut opt = Adam::new(1e-3);
        assert!(matches!(
            train_step(&mut model, &mut opt, &cfg.fff, &batch),
            Err(CoreError::Config(_))
        ));
        let (_, mut batch) = tiny_batch(&cfg, &model, 5, 1);
        batch.eps = Array4::zeros((1, 1, 1, 1));
        assert!(matches!(
            train_step(&mut model, &mut opt, &cfg.fff, &batch),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn degenerate_masks_expose_only_frame_one() {
        let m = degenerate_masks(3, 4, 5);
        assert_eq!(m.coverage(0), 0.0);
        assert_eq!(m.coverage(1), 1.0);
        assert_eq!(m.coverage(2), 1.0);
    }

    #[test]
    fn latent_flow_prep_downsamples_and_completes() {
        let cfg = tiny_config();
        let clip = generate_clip(&cfg.data, 11, 0);
        let flows = prepare_latent_flows(&clip.gt.flows, &clip.masks).unwrap();
        assert_eq!(flows.len(), clip.video.frames() - 1);
        assert_eq!(flows[0].height(), 8);
        assert_eq!(flows[0].width(), 8);
        // With no masks anywhere, completion is the identity and the result
        // is exactly the downsampled ground-truth flow.
        let empty = MaskSequence::new(Array3::zeros((4, 32, 32))).unwrap();
        let plain = prepare_latent_flows(&clip.gt.flows, &empty).unwrap();
        let direct = downsample_flow(&clip.gt.flows[0], DOWNSAMPLE).unwrap();
        assert_eq!(plain[0].data, direct.data);
    }

    #[test]
    fn zero_mask_inference_returns_input_bit_exact_and_is_deterministic() {
        let cfg = tiny_config();
        let model = FffModel::init(&cfg);
        let clip = generate_clip(&cfg.data, 21, 0);
        let (s, _, h, w) = clip.video.data.dim();
        let req = InferenceRequest {
            clip: clip.video.clone(),
            masks: MaskSequence::new(Array3::zeros((s, h, w))).unwrap(),
            flows: clip.gt.flows.clone(),
            steps: cfg.diffusion.ddim_steps,
            seed: 99,
        };
        let out = infer(&model, &cfg.fff, true, &req).unwrap();
        assert_eq!(out.data, clip.video.data, "zero mask copies the input");
        let again = infer(&model, &cfg.fff, true, &req).unwrap();
        assert_eq!(out.data, again.data, "fixed seed is deterministic");
        assert_eq!(out.frames(), clip.video.frames());
    }

    #[test]
    fn inference_preserves_unmasked_pixels_for_every_variant() {
        let cfg = tiny_config();
        let model = FffModel::init(&cfg);
        let clip = generate_clip(&cfg.data, 22, 1);
        let req = InferenceRequest {
            clip: clip.video.clone(),
            masks: clip.masks.clone(),
            flows: clip.gt.flows.clone(),
            steps: cfg.diffusion.ddim_steps,
            seed: 7,
        };
        for v in AblationVariant::ALL {
            let out = infer(&model, &v.flags(&cfg.fff), v.use_inversion(), &req).unwrap();
            let (s, _, h, w) = clip.video.data.dim();
            for i in 0..s {
                for y in 0..h {
                    for x in 0..w {
                        if clip.masks.data[[i, y, x]] == 0 {
                            for ch in 0..3 {
                                assert!(
                                    out.data[[i, ch, y, x]].to_bits()
                                        == clip.video.data[[i, ch, y, x]].to_bits(),
                                    "variant {} leaked at frame {i} ({y},{x})",
                                    v.key()
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn inference_leaves_parameters_untouched() {
        let cfg = tiny_config();
        let model = FffModel::init(&cfg);
        let clip = generate_clip(&cfg.data, 23, 2);
        let before = model.store.checksum(|_| true);
        let req = InferenceRequest {
            clip: clip.video.clone(),
            masks: clip.masks.clone(),
            flows: clip.gt.flows.clone(),
            steps: cfg.diffusion.ddim_steps,
            seed: 1,
        };
        infer(&model, &cfg.fff, true, &req).unwrap();
        assert_eq!(model.store.checksum(|_| true), before);
    }

    #[test]
    fn pretrain_freezes_vae_and_finetune_applies_policy() {
        let cfg = tiny_config();
        let mut model = FffModel::init(&cfg);
        let clips = vec![generate_clip(&cfg.data, 31, 0)];
        train_diffusion(
            &mut model,
            &clips,
            TrainPhase::Pretrain,
            &cfg.fff,
            1,
            &mut Adam::new(1e-4),
            5,
            |_, _| {},
        )
        .unwrap();
        for slot in model.store.iter() {
            let expect = !slot.name.starts_with("vae.");
            assert_eq!(slot.trainable, expect, "pretrain flag on {}", slot.name);
        }
        train_diffusion(
            &mut model,
            &clips,
            TrainPhase::Finetune,
            &cfg.fff,
            1,
            &mut Adam::new(1e-4),
            5,
            |_, _| {},
        )
        .unwrap();
        for slot in model.store.iter() {
            let expect = finetune_trainable(FreezePolicy::TemporalOnly, &slot.name);
            assert_eq!(slot.trainable, expect, "finetune flag on {}", slot.name);
        }
    }

    #[test]
    fn training_steps_report_in_order_and_change_trainable_weights() {
        let cfg = tiny_config();
        let mut model = FffModel::init(&cfg);
        let clips = vec![
            generate_clip(&cfg.data, 41, 0),
            generate_clip(&cfg.data, 42, 1),
        ];
        let vae_before = model.store.checksum(|n| n.starts_with("vae."));
        let rest_before = model.store.checksum(|n| !n.starts_with("vae."));
        let mut seen = Vec::new();
        let losses = train_diffusion(
            &mut model,
            &clips,
            TrainPhase::Pretrain,
            &cfg.fff,
            3,
            &mut Adam::new(1e-3),
            6,
            |step, loss| seen.push((step, loss)),
        )
        .unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(seen.len(), 3);
        assert!(seen.iter().enumerate().all(|(i, (s, _))| *s == i));
        assert_eq!(
            model.store.checksum(|n| n.starts_with("vae.")),
            vae_before,
            "autoencoder stays frozen"
        );
        assert_ne!(
            model.store.checksum(|n| !n.starts_with("vae.")),
            rest_before,
            "denoiser weights move"
        );
    }

    #[test]
    fn ablation_runs_are_identical_and_checkpoint_must_exist() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let ckpt_dir = dir.path();
        let model = FffModel::init(&cfg);
        let meta = CheckpointMeta {
            kind: "finetune".into(),
            variant: None,
            step: 0,
            config_hash: config_hash(&cfg),
            corpus_hash: None,
            latent_scale: 1.0,
            config: cfg.clone(),
        };
        let ckpts = AblationCheckpoints::in_dir(ckpt_dir);
        for path in [&ckpts.no_fff, &ckpts.lp, &ckpts.lp_dna] {
            save_checkpoint(path, &model.store, &meta, false).unwrap();
        }
        let clips = vec![
            generate_clip(&cfg.data, 51, 0),
            generate_clip(&cfg.data, 52, 1),
        ];
        let out_a = dir.path().join("run_a");
        let out_b = dir.path().join("run_b");
        let rep_a = run_ablation(&cfg, &ckpts, &clips, &out_a).unwrap();
        let _rep_b = run_ablation(&cfg, &ckpts, &clips, &out_b).unwrap();
        let csv_a = std::fs::read(out_a.join("ablation.csv")).unwrap();
        let csv_b = std::fs::read(out_b.join("ablation.csv")).unwrap();
        assert_eq!(csv_a, csv_b, "identical configs give identical tables");
        let json_a = std::fs::read(out_a.join("ablation.json")).unwrap();
        let json_b = std::fs::read(out_b.join("ablation.json")).unwrap();
        assert_eq!(json_a, json_b);
        assert_eq!(rep_a.rows.len(), 4);
        assert!(rep_a.variant("lp_dna").is_some());
        for row in &rep_a.rows {
            assert_eq!(row.report.clips.len(), 2);
        }

        // A missing checkpoint is reported as a data error naming the variant.
        let broken = AblationCheckpoints {
            no_fff: ckpt_dir.join("absent.ckpt"),
            lp: ckpts.lp.clone(),
            lp_dna: ckpts.lp_dna.clone(),
        };
        let err = run_ablation(&cfg, &broken, &clips, &dir.path().join("run_c")).unwrap_err();
        assert!(matches!(err, CoreError::Data(_)), "got {err}");
    }
}
