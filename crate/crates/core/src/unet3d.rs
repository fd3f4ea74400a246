//! Noise-prediction network over latent clips.
//!
//! The backbone is a 2D UNet applied per frame (frames ride the batch axis),
//! with temporal attention blocks at the configured coarse levels mixing
//! information across frames at each spatial position. Timestep conditioning
//! enters every residual block through a FiLM layer fed by a sinusoidal
//! embedding.
//!
//! Two deliberate initialization choices give a fresh model simple, testable
//! behavior: the conditioning merge convolution starts as `[I | 0]`, so
//! merging is initially a no-op on the noisy stream, and the output head
//! starts at zero, so a fresh model predicts zero noise everywhere.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::{FreezePolicy, UNetConfig};
use crate::nn::{
    sinusoidal_embedding, Conv2d, GroupNorm, Init, Linear, ParamStore, ResBlock, Session,
    TemporalAttention,
};

struct DownStage {
    res: ResBlock,
    attn: Option<TemporalAttention>,
    pool: Conv2d,
}

struct UpStage {
    lift: Conv2d,
    fuse: Conv2d,
    res: ResBlock,
    attn: Option<TemporalAttention>,
}

/// Frame-batched UNet with temporal attention; predicts the noise component
/// of a latent clip `[S, C, h, w]` at a given diffusion timestep.
pub struct UNet3d {
    pub latent_channels: usize,
    pub time_dim: usize,
    merge_conv: Conv2d,
    stem: Conv2d,
    time_lin1: Linear,
    time_lin2: Linear,
    downs: Vec<DownStage>,
    mid_res1: ResBlock,
    mid_attn: Option<TemporalAttention>,
    mid_res2: ResBlock,
    head_norm: GroupNorm,
    head: Conv2d,
    /// Deepest level first.
    ups: Vec<UpStage>,
}

impl UNet3d {
    pub fn init(
        store: &mut ParamStore,
        cfg: &UNetConfig,
        latent_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let widths = &cfg.widths;
        let n = widths.len();
        assert!(n >= 2, "need at least two resolution levels");
        let g = cfg.groups;
        let td = cfg.time_dim;
        let c = latent_channels;
        let has_attn = |level: usize| cfg.temporal_levels.contains(&level);

        let merge_conv = Conv2d::init(store, "merge.conv", 2 * c, c, 1, 1, 0, rng, Init::IdentitySlice);
        let stem = Conv2d::init(store, "unet.stem", c, widths[0], 3, 1, 1, rng, Init::HeNormal);
        let time_lin1 = Linear::init(store, "unet.time.lin1", td, td, rng, Init::HeNormal);
        let time_lin2 = Linear::init(store, "unet.time.lin2", td, td, rng, Init::HeNormal);

        let mut downs = Vec::new();
        for i in 0..n - 1 {
            let name = format!("unet.down{i}");
            downs.push(DownStage {
                res: ResBlock::init(store, &format!("{name}.res"), widths[i], widths[i], td, g, rng),
                attn: has_attn(i)
                    .then(|| TemporalAttention::init(store, &format!("{name}.attn"), widths[i], g, rng)),
                pool: Conv2d::init(store, &format!("{name}.pool"), widths[i], widths[i + 1], 3, 2, 1, rng, Init::HeNormal),
            });
        }
        let deepest = widths[n - 1];
        let mid_res1 = ResBlock::init(store, "unet.mid.res1", deepest, deepest, td, g, rng);
        let mid_attn = has_attn(n - 1)
            .then(|| TemporalAttention::init(store, "unet.mid.attn", deepest, g, rng));
        let mid_res2 = ResBlock::init(store, "unet.mid.res2", deepest, deepest, td, g, rng);

        let mut ups = Vec::new();
        for i in (0..n - 1).rev() {
            let name = format!("unet.up{i}");
            ups.push(UpStage {
                lift: Conv2d::init(store, &format!("{name}.lift"), widths[i + 1], widths[i], 3, 1, 1, rng, Init::HeNormal),
                fuse: Conv2d::init(store, &format!("{name}.fuse"), 2 * widths[i], widths[i], 3, 1, 1, rng, Init::HeNormal),
                res: ResBlock::init(store, &format!("{name}.res"), widths[i], widths[i], td, g, rng),
                attn: has_attn(i)
                    .then(|| TemporalAttention::init(store, &format!("{name}.attn"), widths[i], g, rng)),
            });
        }
        let head_norm = GroupNorm::init(store, "unet.head.norm", widths[0], g);
        let head = Conv2d::init(store, "unet.head.conv", widths[0], c, 3, 1, 1, rng, Init::Zero);

        Self {
            latent_channels: c,
            time_dim: td,
            merge_conv,
            stem,
            time_lin1,
            time_lin2,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            head_norm,
            head,
            ups,
        }
    }

    /// Fuses the noisy stream with the conditional stream through the 1x1
    /// merge convolution. With fresh parameters this returns `x` unchanged.
    pub fn merge(&self, sess: &mut Session, x: Var, cond: Var) -> Var {
        let cat = sess.tape.concat_axis1(x, cond);
        self.merge_conv.forward(sess, cat)
    }

    /// Predicts noise for an already-merged latent clip at timestep `t`.
    pub fn forward(&self, sess: &mut Session, x: Var, t: usize) -> Var {
        let emb = sinusoidal_embedding(t as f64, self.time_dim);
        let e = sess.constant(emb.into_dyn());
        let mut ctx = self.time_lin1.forward(sess, e);
        ctx = sess.tape.silu(ctx);
        ctx = self.time_lin2.forward(sess, ctx);

        let mut h = self.stem.forward(sess, x);
        let mut skips = Vec::with_capacity(self.downs.len());
        for stage in &self.downs {
            h = stage.res.forward(sess, h, ctx);
            if let Some(attn) = &stage.attn {
                h = attn.forward(sess, h);
            }
            skips.push(h);
            h = stage.pool.forward(sess, h);
        }
        h = self.mid_res1.forward(sess, h, ctx);
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(sess, h);
        }
        h = self.mid_res2.forward(sess, h, ctx);
        for stage in &self.ups {
            h = sess.tape.upsample2(h);
            h = stage.lift.forward(sess, h);
            let skip = skips.pop().expect("one skip per up stage");
            let cat = sess.tape.concat_axis1(h, skip);
            h = stage.fuse.forward(sess, cat);
            h = stage.res.forward(sess, h, ctx);
            if let Some(attn) = &stage.attn {
                h = attn.forward(sess, h);
            }
        }
        h = self.head_norm.forward(sess, h);
        h = sess.tape.silu(h);
        self.head.forward(sess, h)
    }

    /// Convenience non-training path: merge `x` with `cond`, then predict.
    pub fn predict(
        &self,
        store: &ParamStore,
        x: &Array4<f64>,
        cond: &Array4<f64>,
        t: usize,
    ) -> Array4<f64> {
        let mut sess = Session::new(store);
        let xv = sess.constant(x.clone().into_dyn());
        let cv = sess.constant(cond.clone().into_dyn());
        let merged = self.merge(&mut sess, xv, cv);
        let out = self.forward(&mut sess, merged, t);
        sess.tape
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("prediction is 4d")
    }
}

/// Whether a parameter stays trainable under the given freeze policy.
///
/// `TemporalOnly` keeps the cross-frame machinery adaptable while pinning all
/// per-frame weights: temporal attention blocks, the conditioning merge
/// convolution, and the noise-alignment module (parameters under `dna.`).
pub fn finetune_trainable(policy: FreezePolicy, name: &str) -> bool {
    match policy {
        FreezePolicy::None => true,
        FreezePolicy::TemporalOnly => {
            name.starts_with("merge.") || name.starts_with("dna.") || name.contains(".attn.")
        }
    }
}
