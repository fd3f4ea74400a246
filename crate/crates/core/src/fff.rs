//! First-frame filling: flow-guided latent propagation, noise fill, and
//! learned alignment of the filled noise.
//!
//! Working on the merged latent stream `Z^m`, the module
//! 1. fills frame 1's masked latent cells by warping unmasked cells of later
//!    frames backward along composed flows (nearest frame wins, each cell is
//!    written at most once),
//! 2. adds unit noise to the masked cells of frames 2..S and to frame-1
//!    cells no frame could fill, and
//! 3. optionally aligns each frame against its successor with a deformable
//!    sampler whose offsets and modulation come from a small 3D-conv
//!    predictor, fused back through a residual layer.
//!
//! Every step preserves unmasked cells bit-exactly: propagation and noise
//! fill only touch masked cells, and the alignment output is recombined as
//! `(1 - M) * Z^m + M * aligned`.
//!
//! All three steps run on the autodiff tape, so training can push gradients
//! through the whole module into both the alignment parameters and whatever
//! produced the input stream.

use std::rc::Rc;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::FffConfig;
use crate::flowlab::{compose_flows, FlowField, ValidityMap, WarpPlan};
use crate::nn::{Conv2d, Conv3d, Init, ParamStore, Session};
use crate::types::LatentClip;
use crate::{CoreError, Result};

/// Deformable sampling kernel extent (K x K taps per cell).
pub const DNA_KERNEL: usize = 3;

/// A latent clip whose first frame has been (partially) filled by
/// propagation, with maps recording which masked cells were filled and which
/// stayed empty.
pub struct PropagatedLatent {
    pub latents: LatentClip,
    /// 1 where a masked frame-1 cell received propagated content.
    pub frame1_filled: ValidityMap,
    /// 1 where a masked frame-1 cell was never filled (noise takes over).
    pub frame1_unfilled: ValidityMap,
}

/// Parameters of the deformable noise-alignment stage. All tensors live in a
/// [`ParamStore`] under the `dna.` prefix so the finetune freeze policy can
/// select them by name.
pub struct DnaWeights {
    pub channels: usize,
    pub clamp: f64,
    fuse: Conv2d,
    pred1: Conv3d,
    pred2: Conv3d,
    deform_w: usize,
    deform_b: usize,
    r1: Conv2d,
    r2: Conv2d,
}

impl DnaWeights {
    /// Initialization is a structural no-op: the fusion conv passes the
    /// propagated stream through (identity slice), the offset/modulation
    /// predictor starts at zero, the deformable kernel is a center tap, and
    /// the residual layer's final conv is zero.
    pub fn init(
        store: &mut ParamStore,
        cfg: &FffConfig,
        latent_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = latent_channels;
        let k2 = DNA_KERNEL * DNA_KERNEL;
        let fuse = Conv2d::init(store, "dna.fuse", 2 * c, c, 1, 1, 0, rng, Init::IdentitySlice);
        let pred1 = Conv3d::init(store, "dna.pred1", c + 1, cfg.dna_width, 3, 3, 3, rng, Init::HeNormal);
        let pred2 = Conv3d::init(store, "dna.pred2", cfg.dna_width, 3 * k2, 3, 3, 3, rng, Init::Zero);
        let mut kernel = ArrayD::zeros(IxDyn(&[c, c, DNA_KERNEL, DNA_KERNEL]));
        for ci in 0..c {
            kernel[[ci, ci, DNA_KERNEL / 2, DNA_KERNEL / 2]] = 1.0;
        }
        let deform_w = store.add("dna.deform.weight", kernel);
        let deform_b = store.add("dna.deform.bias", ArrayD::zeros(IxDyn(&[c])));
        let r1 = Conv2d::init(store, "dna.r.conv1", 2 * c, cfg.dna_width, 3, 1, 1, rng, Init::HeNormal);
        let r2 = Conv2d::init(store, "dna.r.conv2", cfg.dna_width, c, 3, 1, 1, rng, Init::Zero);
        Self {
            channels: c,
            clamp: cfg.dna_clamp,
            fuse,
            pred1,
            pred2,
            deform_w,
            deform_b,
            r1,
            r2,
        }
    }
}

/// Precomputed propagation routing: which source frame fills which frame-1
/// cell, and through which warp stencil. Depends only on masks and flows,
/// never on latent values, so it is reused across tape evaluations.
pub struct PropagationPlan {
    /// One entry per source frame i = 2..S: warp stencil onto frame 1's
    /// grid, the cells this frame fills (binary), and whether any cell is
    /// filled at all.
    routes: Vec<(Rc<WarpPlan>, Array2<f64>, bool)>,
    pub frame1_filled: Array2<f64>,
    pub frame1_unfilled: Array2<f64>,
}

impl PropagationPlan {
    /// `m_lat` is the `[S, h, w]` latent-resolution mask stack; `flows` the
    /// S-1 adjacent latent-resolution flows (frame i grid, pointing into
    /// i+1). A warped cell is accepted when its blended source validity
    /// reaches `threshold` and no earlier frame claimed it.
    pub fn build(m_lat: &Array3<f64>, flows: &[FlowField], threshold: f64) -> Result<Self> {
        let (s, h, w) = m_lat.dim();
        if flows.len() + 1 != s {
            return Err(CoreError::Config(format!(
                "{} flows cannot chain {} frames",
                flows.len(),
                s
            )));
        }
        for f in flows {
            if (f.height(), f.width()) != (h, w) {
                return Err(CoreError::Config(format!(
                    "flow {}x{} vs mask {h}x{w} resolution mismatch",
                    f.height(),
                    f.width()
                )));
            }
        }
        let mut remaining = m_lat.index_axis(Axis(0), 0).to_owned();
        let mut filled = Array2::zeros((h, w));
        let mut routes = Vec::with_capacity(s.saturating_sub(1));
        let mut chain: Option<FlowField> = None;
        for i in 1..s {
            let composed = match chain {
                None => flows[0].clone(),
                Some(acc) => compose_flows(&[acc, flows[i - 1].clone()])?,
            };
            let source_valid = m_lat.index_axis(Axis(0), i).mapv(|m| 1.0 - m);
            let plan = WarpPlan::build(&composed, Some(&source_valid));
            let validity = plan.validity();
            let mut sel = Array2::zeros((h, w));
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    if remaining[[y, x]] != 0.0 && validity.data[[y, x]] >= threshold {
                        sel[[y, x]] = 1.0;
                        remaining[[y, x]] = 0.0;
                        filled[[y, x]] = 1.0;
                        any = true;
                    }
                }
            }
            routes.push((Rc::new(plan), sel, any));
            chain = Some(composed);
        }
        Ok(Self {
            routes,
            frame1_filled: filled,
            frame1_unfilled: remaining,
        })
    }
}

/// Broadcasts a `[h, w]` map over `c` channels.
fn span_channels(map: &Array2<f64>, c: usize) -> ArrayD<f64> {
    let (h, w) = map.dim();
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        out.index_axis_mut(Axis(0), ci).assign(map);
    }
    out.into_dyn()
}

/// Builds the `[S, C, h, w]` additive noise gate: masked cells of frames
/// 2..S plus the unfilled frame-1 cells.
fn noise_gate(m_lat: &Array3<f64>, unfilled1: &Array2<f64>, c: usize) -> Array4<f64> {
    let (s, h, w) = m_lat.dim();
    let mut gate = Array4::zeros((s, c, h, w));
    for ci in 0..c {
        gate.slice_mut(ndarray::s![0, ci, .., ..]).assign(unfilled1);
    }
    for i in 1..s {
        let m = m_lat.index_axis(Axis(0), i);
        for ci in 0..c {
            gate.slice_mut(ndarray::s![i, ci, .., ..]).assign(&m);
        }
    }
    gate
}

fn dims4(v: &ArrayD<f64>) -> (usize, usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 4);
    (s[0], s[1], s[2], s[3])
}

fn to_clip(v: &ArrayD<f64>) -> LatentClip {
    LatentClip {
        data: v.clone().into_dimensionality().expect("latent clip is 4d"),
    }
}

/// Tape-mode propagation: replaces frame 1 of `zm` `[S, C, h, w]` with
/// `(1 - M_1) * zm_1 +` accepted warped contributions; later frames pass
/// through untouched. Masked cells no route fills become exactly zero.
pub fn latent_propagate_var(
    sess: &mut Session,
    zm: Var,
    m_lat: &Array3<f64>,
    plan: &PropagationPlan,
) -> Var {
    let (s, c, _, _) = dims4(sess.tape.value(zm));
    assert_eq!(s, m_lat.dim().0, "mask/latent frame count mismatch");
    let keep1 = span_channels(&m_lat.index_axis(Axis(0), 0).mapv(|m| 1.0 - m), c);
    let zm1 = sess.tape.index_axis0(zm, 0);
    let keep1 = sess.constant(keep1);
    let mut acc = sess.tape.mul(zm1, keep1);
    for i in 1..s {
        let (warp, sel, any) = &plan.routes[i - 1];
        if !any {
            continue;
        }
        let source_keep = span_channels(&m_lat.index_axis(Axis(0), i).mapv(|m| 1.0 - m), c);
        let source_keep = sess.constant(source_keep);
        let zmi = sess.tape.index_axis0(zm, i);
        let masked_src = sess.tape.mul(zmi, source_keep);
        let warped = sess.tape.warp_frame(masked_src, warp.clone());
        let sel_c = sess.constant(span_channels(sel, c));
        let contrib = sess.tape.mul(warped, sel_c);
        acc = sess.tape.add(acc, contrib);
    }
    let mut parts = vec![acc];
    for i in 1..s {
        parts.push(sess.tape.index_axis0(zm, i));
    }
    sess.tape.stack0(&parts)
}

/// Tape-mode noise fill: adds `eps` at masked cells of frames 2..S and at
/// the unfilled frame-1 cells. Purely additive, so unmasked and filled cells
/// pass through bit-exactly.
pub fn noise_fill_var(
    sess: &mut Session,
    zp: Var,
    m_lat: &Array3<f64>,
    unfilled1: &Array2<f64>,
    eps: &Array4<f64>,
) -> Var {
    let (_, c, _, _) = dims4(sess.tape.value(zp));
    let gate = noise_gate(m_lat, unfilled1, c);
    let noise = sess.constant((eps * &gate).into_dyn());
    sess.tape.add(zp, noise)
}

/// Tape-mode deformable alignment. Fuses `zp` and `zm`, predicts per-frame
/// offsets (clamped to `weights.clamp` cells) and sigmoid modulation with 3D
/// convolutions over the fused features plus the mask channel, then refines
/// frames back to front: each frame is residually fused with a deformable
/// sample of its successor. The result replaces only masked cells:
/// `(1 - M) * zm + M * aligned`.
pub fn dna_align_var(
    sess: &mut Session,
    zp: Var,
    zm: Var,
    m_lat: &Array3<f64>,
    weights: &DnaWeights,
) -> Var {
    let (s, c, _, _) = dims4(sess.tape.value(zm));
    assert_eq!(c, weights.channels, "latent width mismatch");
    let k2 = DNA_KERNEL * DNA_KERNEL;

    let cat = sess.tape.concat_axis1(zp, zm);
    let fused = weights.fuse.forward(sess, cat);

    // Offset/modulation predictor sees the fused stream plus the mask.
    let mask_channel = {
        let (sdim, h, w) = m_lat.dim();
        let mut m4 = Array4::zeros((sdim, 1, h, w));
        for i in 0..sdim {
            m4.slice_mut(ndarray::s![i, 0, .., ..])
                .assign(&m_lat.index_axis(Axis(0), i));
        }
        sess.constant(m4.into_dyn())
    };
    let with_mask = sess.tape.concat_axis1(fused, mask_channel);
    let pred_in = sess.tape.permute(with_mask, &[1, 0, 2, 3]);
    let hidden = weights.pred1.forward(sess, pred_in);
    let hidden = sess.tape.silu(hidden);
    let raw = weights.pred2.forward(sess, hidden);
    let raw = sess.tape.permute(raw, &[1, 0, 2, 3]);
    let offsets = sess.tape.slice_axis1(raw, 0, 2 * k2);
    let modu_raw = sess.tape.slice_axis1(raw, 2 * k2, 3 * k2);
    let modulation = sess.tape.sigmoid(modu_raw);

    let wdef = sess.param(weights.deform_w);
    let bdef = sess.param(weights.deform_b);
    let mut hat: Vec<Var> = (0..s).map(|i| sess.tape.index_axis0(fused, i)).collect();
    for si in (0..s.saturating_sub(1)).rev() {
        let off_s = sess.tape.index_axis0(offsets, si);
        let mod_s = sess.tape.index_axis0(modulation, si);
        let aligned = sess
            .tape
            .deform_sample(hat[si + 1], off_s, mod_s, wdef, bdef, weights.clamp);
        let a4 = sess.tape.stack0(&[aligned]);
        let b4 = sess.tape.stack0(&[hat[si]]);
        let pair = sess.tape.concat_axis1(a4, b4);
        let r = weights.r1.forward(sess, pair);
        let r = sess.tape.silu(r);
        let r = weights.r2.forward(sess, r);
        let residual = sess.tape.index_axis0(r, 0);
        hat[si] = sess.tape.add(hat[si], residual);
    }
    let aligned = sess.tape.stack0(&hat);

    let c_axis = c;
    let keep = {
        let (sdim, h, w) = m_lat.dim();
        let mut k = Array4::zeros((sdim, c_axis, h, w));
        for i in 0..sdim {
            let inv = m_lat.index_axis(Axis(0), i).mapv(|m| 1.0 - m);
            for ci in 0..c_axis {
                k.slice_mut(ndarray::s![i, ci, .., ..]).assign(&inv);
            }
        }
        sess.constant(k.into_dyn())
    };
    let take = {
        let (sdim, h, w) = m_lat.dim();
        let mut t = Array4::zeros((sdim, c_axis, h, w));
        for i in 0..sdim {
            let m = m_lat.index_axis(Axis(0), i);
            for ci in 0..c_axis {
                t.slice_mut(ndarray::s![i, ci, .., ..]).assign(&m);
            }
        }
        sess.constant(t.into_dyn())
    };
    let kept = sess.tape.mul(zm, keep);
    let taken = sess.tape.mul(aligned, take);
    sess.tape.add(kept, taken)
}

/// Tape-mode composition honoring the enable flags: propagation and noise
/// fill run as a unit when `plan` is given; alignment runs when `dna` is
/// given. With both absent the input passes through unchanged.
pub fn fff_forward_var(
    sess: &mut Session,
    zm: Var,
    m_lat: &Array3<f64>,
    plan: Option<&PropagationPlan>,
    eps: &Array4<f64>,
    dna: Option<&DnaWeights>,
) -> Var {
    let zp = match plan {
        Some(plan) => {
            let propagated = latent_propagate_var(sess, zm, m_lat, plan);
            noise_fill_var(sess, propagated, m_lat, &plan.frame1_unfilled, eps)
        }
        None => zm,
    };
    match dna {
        Some(weights) => dna_align_var(sess, zp, zm, m_lat, weights),
        None => zp,
    }
}

/// Fills frame 1's masked cells from later frames along composed flows.
pub fn latent_propagate(
    zm: &LatentClip,
    m_lat: &Array3<f64>,
    flows: &[FlowField],
    threshold: f64,
) -> Result<PropagatedLatent> {
    let plan = PropagationPlan::build(m_lat, flows, threshold)?;
    let store = ParamStore::new();
    let mut sess = Session::new(&store);
    let z = sess.constant(zm.data.clone().into_dyn());
    let out = latent_propagate_var(&mut sess, z, m_lat, &plan);
    Ok(PropagatedLatent {
        latents: to_clip(sess.tape.value(out)),
        frame1_filled: ValidityMap {
            data: plan.frame1_filled,
        },
        frame1_unfilled: ValidityMap {
            data: plan.frame1_unfilled,
        },
    })
}

/// Concatenates the propagated first frame with the noise-filled remainder:
/// frame 1 from `z1p` (unfilled cells get `eps`), frames 2..S are
/// `zm_rest + eps * M`.
pub fn noise_fill_concat(
    z1p: &PropagatedLatent,
    zm_rest: &Array4<f64>,
    m_lat: &Array3<f64>,
    eps: &Array4<f64>,
) -> Result<PropagatedLatent> {
    let (s, c, h, w) = z1p.latents.data.dim();
    if zm_rest.dim() != (s - 1, c, h, w) {
        return Err(CoreError::Config(format!(
            "rest frames {:?} do not extend a [{s}, {c}, {h}, {w}] clip",
            zm_rest.dim()
        )));
    }
    if eps.dim() != (s, c, h, w) || m_lat.dim() != (s, h, w) {
        return Err(CoreError::Config("noise or mask shape mismatch".into()));
    }
    let mut out = Array4::zeros((s, c, h, w));
    let gate = noise_gate(m_lat, &z1p.frame1_unfilled.data, c);
    out.index_axis_mut(Axis(0), 0)
        .assign(&z1p.latents.data.index_axis(Axis(0), 0));
    for i in 1..s {
        out.index_axis_mut(Axis(0), i)
            .assign(&zm_rest.index_axis(Axis(0), i - 1));
    }
    out = out + &(eps * &gate);
    Ok(PropagatedLatent {
        latents: LatentClip { data: out },
        frame1_filled: z1p.frame1_filled.clone(),
        frame1_unfilled: z1p.frame1_unfilled.clone(),
    })
}

/// Alignment stage over a propagated clip (evaluation path).
pub fn dna_align(
    store: &ParamStore,
    weights: &DnaWeights,
    zp: &PropagatedLatent,
    zm: &LatentClip,
    m_lat: &Array3<f64>,
) -> LatentClip {
    let mut sess = Session::new(store);
    let zpv = sess.constant(zp.latents.data.clone().into_dyn());
    let zmv = sess.constant(zm.data.clone().into_dyn());
    let out = dna_align_var(&mut sess, zpv, zmv, m_lat, weights);
    to_clip(sess.tape.value(out))
}

/// Full module composition honoring the config flags (evaluation path).
pub fn fff_forward(
    store: &ParamStore,
    cfg: &FffConfig,
    weights: Option<&DnaWeights>,
    zm: &LatentClip,
    m_lat: &Array3<f64>,
    flows: &[FlowField],
    eps: &Array4<f64>,
) -> Result<LatentClip> {
    let plan = if cfg.enable_propagation {
        Some(PropagationPlan::build(m_lat, flows, cfg.validity_threshold)?)
    } else {
        None
    };
    let dna = if cfg.enable_alignment {
        Some(weights.ok_or_else(|| {
            CoreError::Config("alignment enabled but no alignment weights supplied".into())
        })?)
    } else {
        None
    };
    let mut sess = Session::new(store);
    let zv = sess.constant(zm.data.clone().into_dyn());
    let out = fff_forward_var(&mut sess, zv, m_lat, plan.as_ref(), eps, dna);
    Ok(to_clip(sess.tape.value(out)))
}
