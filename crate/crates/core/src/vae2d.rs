//! Per-frame autoencoder mapping RGB frames to a compact latent grid.
//!
//! Two stride-2 stages give a fixed 4x spatial reduction (see
//! [`crate::config::DOWNSAMPLE`]); the bottleneck predicts a mean and
//! log-variance per latent cell. Deterministic consumers encode to the mean,
//! with the sampled path used only while training the autoencoder itself.
//!
//! This module also builds the masked conditional input used everywhere
//! downstream: frames are zero-filled inside the mask *before* encoding, the
//! mask is max-pooled to latent resolution, and any latent cell touching a
//! masked pixel is zeroed after encoding, so no masked content leaks through
//! the encoder's receptive field.

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{RunConfig, VaeConfig, DOWNSAMPLE};
use crate::flowlab::downsample_mask;
use crate::nn::{init_rng, randn, Adam, Conv2d, GroupNorm, Init, ParamStore, Session};
use crate::types::{LatentClip, MaskSequence, VideoClip};
use crate::Result;

/// Frame autoencoder; parameters live in a [`ParamStore`] under the given
/// name prefix (checkpoints embed them under `vae.`).
pub struct Vae2d {
    pub latent_channels: usize,
    enc_in: Conv2d,
    enc_down1: Conv2d,
    enc_norm1: GroupNorm,
    enc_down2: Conv2d,
    enc_norm2: GroupNorm,
    enc_mid: Conv2d,
    enc_norm3: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_norm0: GroupNorm,
    dec_mid: Conv2d,
    dec_norm1: GroupNorm,
    dec_up1: Conv2d,
    dec_norm2: GroupNorm,
    dec_up2: Conv2d,
    dec_norm3: GroupNorm,
    dec_out: Conv2d,
}

impl Vae2d {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let [w0, w1] = cfg.widths;
        let c = cfg.latent_channels;
        let g = cfg.groups;
        let p = |tail: &str| format!("{prefix}.{tail}");
        Self {
            latent_channels: c,
            enc_in: Conv2d::init(store, &p("enc_in"), 3, w0, 3, 1, 1, rng, Init::HeNormal),
            enc_down1: Conv2d::init(store, &p("enc_down1"), w0, w1, 3, 2, 1, rng, Init::HeNormal),
            enc_norm1: GroupNorm::init(store, &p("enc_norm1"), w1, g),
            enc_down2: Conv2d::init(store, &p("enc_down2"), w1, w1, 3, 2, 1, rng, Init::HeNormal),
            enc_norm2: GroupNorm::init(store, &p("enc_norm2"), w1, g),
            enc_mid: Conv2d::init(store, &p("enc_mid"), w1, w1, 3, 1, 1, rng, Init::HeNormal),
            enc_norm3: GroupNorm::init(store, &p("enc_norm3"), w1, g),
            enc_out: Conv2d::init(store, &p("enc_out"), w1, 2 * c, 1, 1, 0, rng, Init::HeNormal),
            dec_in: Conv2d::init(store, &p("dec_in"), c, w1, 1, 1, 0, rng, Init::HeNormal),
            dec_norm0: GroupNorm::init(store, &p("dec_norm0"), w1, g),
            dec_mid: Conv2d::init(store, &p("dec_mid"), w1, w1, 3, 1, 1, rng, Init::HeNormal),
            dec_norm1: GroupNorm::init(store, &p("dec_norm1"), w1, g),
            dec_up1: Conv2d::init(store, &p("dec_up1"), w1, w0, 3, 1, 1, rng, Init::HeNormal),
            dec_norm2: GroupNorm::init(store, &p("dec_norm2"), w0, g),
            dec_up2: Conv2d::init(store, &p("dec_up2"), w0, w0, 3, 1, 1, rng, Init::HeNormal),
            dec_norm3: GroupNorm::init(store, &p("dec_norm3"), w0, g),
            dec_out: Conv2d::init(store, &p("dec_out"), w0, 3, 3, 1, 1, rng, Init::HeNormal),
        }
    }

    /// Encoder distribution head: `(mu, logvar)`, each `[N, C, H/4, W/4]`.
    pub fn encode_dist(&self, sess: &mut Session, x: Var) -> (Var, Var) {
        let mut h = self.enc_in.forward(sess, x);
        h = sess.tape.silu(h);
        h = self.enc_down1.forward(sess, h);
        h = self.enc_norm1.forward(sess, h);
        h = sess.tape.silu(h);
        h = self.enc_down2.forward(sess, h);
        h = self.enc_norm2.forward(sess, h);
        h = sess.tape.silu(h);
        h = self.enc_mid.forward(sess, h);
        h = self.enc_norm3.forward(sess, h);
        h = sess.tape.silu(h);
        let out = self.enc_out.forward(sess, h);
        let c = self.latent_channels;
        let mu = sess.tape.slice_axis1(out, 0, c);
        let logvar = sess.tape.slice_axis1(out, c, 2 * c);
        (mu, logvar)
    }

    /// Decoder: `[N, C, h, w]` latents to unclamped `[N, 3, 4h, 4w]` frames.
    pub fn decode_var(&self, sess: &mut Session, z: Var) -> Var {
        let mut h = self.dec_in.forward(sess, z);
        h = self.dec_norm0.forward(sess, h);
        h = sess.tape.silu(h);
        h = self.dec_mid.forward(sess, h);
        h = self.dec_norm1.forward(sess, h);
        h = sess.tape.silu(h);
        h = sess.tape.upsample2(h);
        h = self.dec_up1.forward(sess, h);
        h = self.dec_norm2.forward(sess, h);
        h = sess.tape.silu(h);
        h = sess.tape.upsample2(h);
        h = self.dec_up2.forward(sess, h);
        h = self.dec_norm3.forward(sess, h);
        h = sess.tape.silu(h);
        self.dec_out.forward(sess, h)
    }

    /// Deterministic encoding (distribution mean) of a frame batch.
    pub fn encode(&self, store: &ParamStore, frames: &Array4<f64>) -> Array4<f64> {
        let mut sess = Session::new(store);
        let x = sess.constant(frames.clone().into_dyn());
        let (mu, _) = self.encode_dist(&mut sess, x);
        sess.tape
            .value(mu)
            .clone()
            .into_dimensionality()
            .expect("mu is 4d")
    }

    /// Decodes latents and clamps to the displayable range.
    pub fn decode(&self, store: &ParamStore, z: &Array4<f64>) -> Array4<f64> {
        let mut sess = Session::new(store);
        let zv = sess.constant(z.clone().into_dyn());
        let out = self.decode_var(&mut sess, zv);
        sess.tape
            .value(out)
            .mapv(|v| v.clamp(0.0, 1.0))
            .into_dimensionality()
            .expect("frames are 4d")
    }

    /// Encodes a whole clip to its latent stack (deterministic path).
    pub fn encode_clip(&self, store: &ParamStore, video: &VideoClip) -> LatentClip {
        LatentClip {
            data: self.encode(store, &video.data),
        }
    }

    /// Decodes a latent stack back to a clip.
    pub fn decode_clip(&self, store: &ParamStore, latents: &LatentClip) -> VideoClip {
        VideoClip::new(self.decode(store, &latents.data)).expect("decoded clip is well-formed")
    }

    /// Per-frame pooled encoder statistics: spatial mean and spread of each
    /// latent channel, `[N, 2 C]`. Used as the feature space for the
    /// distribution-distance metric.
    pub fn frame_features(&self, store: &ParamStore, frames: &Array4<f64>) -> Array2<f64> {
        let mu = self.encode(store, frames);
        let (n, c, h, w) = mu.dim();
        let cells = (h * w) as f64;
        let mut out = Array2::zeros((n, 2 * c));
        for ni in 0..n {
            for ci in 0..c {
                let plane = mu.slice(ndarray::s![ni, ci, .., ..]);
                let mean = plane.iter().sum::<f64>() / cells;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cells;
                out[[ni, ci]] = mean;
                out[[ni, c + ci]] = var.sqrt();
            }
        }
        out
    }
}

/// Masked conditional input: per-frame latents of the zero-filled frames with
/// every mask-touching latent cell zeroed, plus the latent-resolution mask.
pub struct MaskedConditional {
    /// `[S, C, h, w]`.
    pub latents: LatentClip,
    /// `[S, h, w]`, 1.0 where any covered pixel was masked.
    pub mask_latent: Array3<f64>,
}

/// Builds the conditional encoding of a masked clip. Masked pixels are
/// zeroed before encoding and the affected latent cells are zeroed after it.
pub fn masked_conditional_latent(
    vae: &Vae2d,
    store: &ParamStore,
    video: &VideoClip,
    masks: &MaskSequence,
) -> Result<MaskedConditional> {
    let (s, _, h, w) = video.data.dim();
    video.check_divisible(DOWNSAMPLE)?;
    let mut filled = video.data.clone();
    for i in 0..s {
        for y in 0..h {
            for x in 0..w {
                if masks.data[[i, y, x]] != 0 {
                    for c in 0..3 {
                        filled[[i, c, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    let mut latents = vae.encode(store, &filled);
    let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let mut mask_latent = Array3::zeros((s, lh, lw));
    for i in 0..s {
        let frame_mask = masks.data.index_axis(ndarray::Axis(0), i).to_owned();
        let coarse = downsample_mask(&frame_mask, DOWNSAMPLE)?;
        for y in 0..lh {
            for x in 0..lw {
                if coarse[[y, x]] != 0 {
                    mask_latent[[i, y, x]] = 1.0;
                    for c in 0..latents.dim().1 {
                        latents[[i, c, y, x]] = 0.0;
                    }
                }
            }
        }
    }
    Ok(MaskedConditional {
        latents: LatentClip { data: latents },
        mask_latent,
    })
}

/// Trains the autoencoder on random frames drawn from the corpus clips.
/// Returns the per-step loss curve; parameters update in place.
pub fn train_vae(
    store: &mut ParamStore,
    vae: &Vae2d,
    cfg: &RunConfig,
    clips: &[VideoClip],
    mut log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    assert!(!clips.is_empty(), "training needs at least one clip");
    let vcfg = &cfg.vae;
    let mut rng = init_rng(vcfg.seed ^ 0x76ae_2d00);
    let mut adam = Adam::new(vcfg.lr);
    let mut losses = Vec::with_capacity(vcfg.steps);
    let (_, _, h, w) = clips[0].data.dim();
    for step in 0..vcfg.steps {
        // Draw a batch of random frames.
        let mut batch = Array4::zeros((vcfg.batch_frames, 3, h, w));
        for b in 0..vcfg.batch_frames {
            use rand::Rng;
            let clip = &clips[rng.gen_range(0..clips.len())];
            let frame = rng.gen_range(0..clip.frames());
            batch
                .index_axis_mut(ndarray::Axis(0), b)
                .assign(&clip.data.index_axis(ndarray::Axis(0), frame));
        }
        let eps = randn(&mut rng, &[vcfg.batch_frames, vcfg.latent_channels, h / DOWNSAMPLE, w / DOWNSAMPLE]);

        let mut sess = Session::new(store);
        let x = sess.constant(batch.into_dyn());
        let (mu, logvar) = vae.encode_dist(&mut sess, x);
        // z = mu + exp(logvar / 2) * eps
        let half_logvar = sess.tape.scale(logvar, 0.5);
        let std = sess.tape.exp(half_logvar);
        let noise = sess.constant(eps);
        let scaled = sess.tape.mul(std, noise);
        let z = sess.tape.add(mu, scaled);
        let xhat = vae.decode_var(&mut sess, z);
        let rec = sess.tape.mse(xhat, x);
        // KL to the unit normal, averaged per element:
        // -0.5 (1 + logvar - mu^2 - exp(logvar))
        let mu2 = sess.tape.mul(mu, mu);
        let evar = sess.tape.exp(logvar);
        let one_plus = sess.tape.add_scalar(logvar, 1.0);
        let a = sess.tape.sub(one_plus, mu2);
        let b = sess.tape.sub(a, evar);
        let kl_term = sess.tape.mean_all(b);
        let kl = sess.tape.scale(kl_term, -0.5);
        let weighted = sess.tape.scale(kl, vcfg.kl_weight);
        let loss = sess.tape.add(rec, weighted);

        let loss_value = sess.tape.value(loss)[[0]];
        let grads = sess.grads(loss);
        adam.step(store, &grads);
        losses.push(loss_value);
        if step % cfg.train.log_every == 0 {
            log(step, loss_value);
        }
    }
    Ok(losses)
}

/// Mean squared reconstruction PSNR of the deterministic encode/decode path
/// over a clip, in decibels.
pub fn reconstruction_psnr(store: &ParamStore, vae: &Vae2d, video: &VideoClip) -> f64 {
    let z = vae.encode_clip(store, video);
    let rec = vae.decode_clip(store, &z);
    let mse = (&rec.data - &video.data).mapv(|v| v * v).mean().unwrap_or(f64::INFINITY);
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}
