//! Synthetic video corpus with exact motion ground truth.
//!
//! Each clip layers a few soft-edged shapes over a panning value-noise
//! background. All layer velocities are whole pixels per frame and pairwise
//! distinct, and every layer's content is a pure function of integer material
//! coordinates, so the recorded flow satisfies an exact warp identity:
//! wherever `occlusion` is 0, sampling frame `i+1` at `x + flows[i](x)`
//! reproduces frame `i` bit for bit (before and after 8-bit quantization).
//! Anti-aliased layer boundaries, pixels leaving the frame and pixels covered
//! by a different layer in the next frame are all marked occluded.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{json_hash, DataConfig};
use crate::error::CoreError;
use crate::flowlab::FlowField;
use crate::npz::Npz;
use crate::types::{GroundTruth, MaskSequence, VideoClip};
use crate::Result;

/// How a clip's mask was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Fixed region (rectangles and strokes), constant across frames.
    Stationary,
    /// Dilated support of one tracked shape, moving with it.
    Object,
}

/// Everything generated for one clip.
pub struct ClipData {
    pub video: VideoClip,
    pub masks: MaskSequence,
    pub gt: GroundTruth,
    pub kind: MaskKind,
}

/// `corpus.json` written next to the clips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub data: DataConfig,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub mask_kind: MaskKind,
}

// ---- value noise ----

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1)`, channel-planar `[C, H, W]`.
/// Lattice values are interpolated with the cubic smoothstep; no
/// trigonometry is involved, so results are identical on every platform
/// with IEEE doubles.
fn value_noise(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize, octaves: &[(usize, f64)]) -> Array3<f64> {
    let mut out = Array3::zeros((channels, h, w));
    let amp_sum: f64 = octaves.iter().map(|&(_, a)| a).sum();
    for &(cell, amp) in octaves {
        let gh = h / cell + 2;
        let gw = w / cell + 2;
        let lattice = Array3::from_shape_fn((channels, gh, gw), |_| rng.gen::<f64>());
        for c in 0..channels {
            for y in 0..h {
                let fy = y as f64 / cell as f64;
                let iy = fy.floor() as usize;
                let ty = smoothstep(fy - iy as f64);
                for x in 0..w {
                    let fx = x as f64 / cell as f64;
                    let ix = fx.floor() as usize;
                    let tx = smoothstep(fx - ix as f64);
                    let v00 = lattice[[c, iy, ix]];
                    let v01 = lattice[[c, iy, ix + 1]];
                    let v10 = lattice[[c, iy + 1, ix]];
                    let v11 = lattice[[c, iy + 1, ix + 1]];
                    let v = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11);
                    out[[c, y, x]] += amp / amp_sum * v;
                }
            }
        }
    }
    out
}

// ---- shapes ----

struct Shape {
    /// Half-extents of the superellipse body.
    a: f64,
    b: f64,
    /// Exponent of the superellipse metric.
    p: f64,
    /// Horizontal shear applied before the metric.
    shear: f64,
    /// Soft edge width in metric units.
    edge: f64,
    base_color: [f64; 3],
    /// Interior texture indexed by integer material coordinates.
    tex: Array3<f64>,
    tex_half: (i64, i64),
    /// On-screen displacement per frame, whole pixels.
    vel: (i64, i64),
    /// Center position in frame 0.
    start: (i64, i64),
    /// Bounding half-extents in pixels (support is strictly inside).
    bbox: (i64, i64),
}

impl Shape {
    fn center(&self, frame: usize) -> (i64, i64) {
        (
            self.start.0 + frame as i64 * self.vel.0,
            self.start.1 + frame as i64 * self.vel.1,
        )
    }

    /// Coverage in `[0, 1]` at integer material coordinates.
    fn alpha(&self, dx: i64, dy: i64) -> f64 {
        let xs = dx as f64 + self.shear * dy as f64;
        let d = (xs.abs() / self.a).powf(self.p) + ((dy as f64).abs() / self.b).powf(self.p);
        let t = ((1.0 - d) / self.edge).clamp(0.0, 1.0);
        smoothstep(t)
    }

    /// Texture color at integer material coordinates.
    fn color(&self, dx: i64, dy: i64, ch: usize) -> f64 {
        let ty = (dy + self.tex_half.1) as usize;
        let tx = (dx + self.tex_half.0) as usize;
        let n = self.tex[[ch, ty, tx]];
        (self.base_color[ch] * (0.75 + 0.5 * (n - 0.5))).clamp(0.0, 1.0)
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, taken_velocities: &[(i64, i64)], max_speed: i64) -> Shape {
    let a: f64 = rng.gen_range(6.0..14.0);
    let b: f64 = rng.gen_range(6.0..14.0);
    let p: f64 = rng.gen_range(1.6..3.0);
    let shear: f64 = rng.gen_range(-0.45..0.45);
    let edge = (1.6 / a.min(b)).clamp(0.05, 0.5);
    let base_color = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
    let bx = (a + shear.abs() * b).ceil() as i64 + 1;
    let by = b.ceil() as i64 + 1;
    let tex_half = (bx + 1, by + 1);
    let tex = value_noise(
        rng,
        3,
        (2 * tex_half.1 + 1) as usize,
        (2 * tex_half.0 + 1) as usize,
        &[(7, 0.6), (3, 0.4)],
    );
    let vel = loop {
        let v = (rng.gen_range(-max_speed..=max_speed), rng.gen_range(-max_speed..=max_speed));
        if !taken_velocities.contains(&v) {
            break v;
        }
    };
    Shape {
        a,
        b,
        p,
        shear,
        edge,
        base_color,
        tex,
        tex_half,
        vel,
        start: (0, 0),
        bbox: (bx, by),
    }
}

// ---- clip generation ----

/// Deterministically generates clip `index` of a corpus. Each clip draws from
/// its own random stream, so results do not depend on generation order.
pub fn generate_clip(cfg: &DataConfig, seed: u64, index: u64) -> ClipData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    let (s, h, w) = (cfg.frames, cfg.height, cfg.width);

    let kind = if rng.gen::<f64>() < cfg.mask.stationary_fraction {
        MaskKind::Stationary
    } else {
        MaskKind::Object
    };

    // Background: a large canvas panned by an integer velocity. The window
    // origin moves opposite to the on-screen content motion.
    let bg_vel = (
        rng.gen_range(-cfg.bg_max_speed..=cfg.bg_max_speed),
        rng.gen_range(-cfg.bg_max_speed..=cfg.bg_max_speed),
    );
    let span = (s as i64 - 1) * cfg.bg_max_speed;
    let canvas_h = h + 2 * span as usize;
    let canvas_w = w + 2 * span as usize;
    let canvas = value_noise(&mut rng, 3, canvas_h, canvas_w, &[(17, 0.5), (9, 0.3), (5, 0.2)]);
    // Start centered; drift of at most `span` per axis stays on the canvas.
    let origin = |i: usize| -> (i64, i64) {
        (span - i as i64 * bg_vel.0, span - i as i64 * bg_vel.1)
    };
    for i in 0..s {
        let (ox, oy) = origin(i);
        assert!(ox >= 0 && oy >= 0, "window origin must stay on canvas");
        assert!(ox as usize + w <= canvas_w && oy as usize + h <= canvas_h);
    }

    // Shapes: object clips track exactly one shape that stays fully inside
    // the frame; stationary clips layer several that may leave it.
    let n_shapes = match kind {
        MaskKind::Object => 1,
        MaskKind::Stationary => rng.gen_range(cfg.shapes_min..=cfg.shapes_max),
    };
    let mut shapes: Vec<Shape> = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let mut taken: Vec<(i64, i64)> = vec![bg_vel];
        taken.extend(shapes.iter().map(|sh| sh.vel));
        let mut shape = sample_shape(&mut rng, &taken, cfg.max_speed);
        if kind == MaskKind::Object {
            // Keep the tracked shape and its soft edge inside the frame for
            // the whole clip, shrinking speed if geometry demands it.
            let mut tries = 0;
            loop {
                let span_x = (s as i64 - 1) * shape.vel.0;
                let span_y = (s as i64 - 1) * shape.vel.1;
                let pad = cfg.mask.object_dilation as i64 + 1;
                let lo_x = shape.bbox.0 + pad + 0.max(-span_x);
                let hi_x = w as i64 - 1 - shape.bbox.0 - pad - 0.max(span_x);
                let lo_y = shape.bbox.1 + pad + 0.max(-span_y);
                let hi_y = h as i64 - 1 - shape.bbox.1 - pad - 0.max(span_y);
                if lo_x <= hi_x && lo_y <= hi_y {
                    shape.start = (rng.gen_range(lo_x..=hi_x), rng.gen_range(lo_y..=hi_y));
                    break;
                }
                tries += 1;
                assert!(
                    tries <= 10_000,
                    "no {}x{} placement fits a tracked shape over {s} frames; \
                     shapes span 6-14 px half extents, so object masks need \
                     larger frames (or stationary masks)",
                    w, h
                );
                let cap = if tries > 50 { 1 } else { cfg.max_speed };
                shape = sample_shape(&mut rng, &taken, cap);
            }
        } else {
            shape.start = (
                rng.gen_range(0..w as i64),
                rng.gen_range(0..h as i64),
            );
        }
        shapes.push(shape);
    }

    // Render frames and per-pixel layer bookkeeping.
    let mut video = Array4::zeros((s, 3, h, w));
    let mut background = Array4::zeros((s, 3, h, w));
    let mut labels = Array3::<u8>::zeros((s, h, w));
    let mut pure = Array3::<u8>::from_elem((s, h, w), 1);
    let mut visibility = Array3::<u8>::from_elem((s, h, w), 1);
    for i in 0..s {
        let (ox, oy) = origin(i);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = canvas[[c, oy as usize + y, ox as usize + x]];
                    video[[i, c, y, x]] = v;
                    background[[i, c, y, x]] = v;
                }
            }
        }
        for (k, shape) in shapes.iter().enumerate() {
            let (cx, cy) = shape.center(i);
            let y_lo = (cy - shape.bbox.1).max(0);
            let y_hi = (cy + shape.bbox.1).min(h as i64 - 1);
            let x_lo = (cx - shape.bbox.0).max(0);
            let x_hi = (cx + shape.bbox.0).min(w as i64 - 1);
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let (dx, dy) = (x - cx, y - cy);
                    let alpha = shape.alpha(dx, dy);
                    if alpha == 0.0 {
                        continue;
                    }
                    let (yu, xu) = (y as usize, x as usize);
                    for c in 0..3 {
                        let col = shape.color(dx, dy, c);
                        video[[i, c, yu, xu]] = (1.0 - alpha) * video[[i, c, yu, xu]] + alpha * col;
                    }
                    visibility[[i, yu, xu]] = 0;
                    if alpha == 1.0 {
                        labels[[i, yu, xu]] = (k + 1) as u8;
                        pure[[i, yu, xu]] = 1;
                    } else {
                        pure[[i, yu, xu]] = 0;
                        if alpha > 0.5 {
                            labels[[i, yu, xu]] = (k + 1) as u8;
                        }
                    }
                }
            }
        }
    }

    // Flows and occlusion from the layer bookkeeping.
    let velocity = |label: u8| -> (i64, i64) {
        if label == 0 {
            bg_vel
        } else {
            shapes[label as usize - 1].vel
        }
    };
    let mut flows = Vec::with_capacity(s - 1);
    let mut flows_reverse = Vec::with_capacity(s - 1);
    let mut occlusion = Array3::<u8>::zeros((s - 1, h, w));
    for i in 0..s - 1 {
        let mut fwd = FlowField::zeros(h, w);
        let mut bwd = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let v = velocity(labels[[i, y, x]]);
                fwd.data[[y, x, 0]] = v.0 as f64;
                fwd.data[[y, x, 1]] = v.1 as f64;
                let vr = velocity(labels[[i + 1, y, x]]);
                bwd.data[[y, x, 0]] = -vr.0 as f64;
                bwd.data[[y, x, 1]] = -vr.1 as f64;

                let lx = x as i64 + v.0;
                let ly = y as i64 + v.1;
                let valid = pure[[i, y, x]] == 1
                    && lx >= 0
                    && ly >= 0
                    && lx < w as i64
                    && ly < h as i64
                    && pure[[i + 1, ly as usize, lx as usize]] == 1
                    && labels[[i + 1, ly as usize, lx as usize]] == labels[[i, y, x]];
                if !valid {
                    occlusion[[i, y, x]] = 1;
                }
            }
        }
        flows.push(fwd);
        flows_reverse.push(bwd);
    }

    // Masks.
    let mask = match kind {
        MaskKind::Stationary => stationary_mask(&mut rng, s, h, w, cfg.mask.coverage_min, cfg.mask.coverage_max),
        MaskKind::Object => object_mask(&shapes[0], s, h, w, cfg.mask.object_dilation),
    };

    ClipData {
        video: VideoClip::new(video).expect("generated clip is well-formed"),
        masks: MaskSequence::new(mask).expect("generated mask is binary"),
        gt: GroundTruth {
            background,
            flows,
            flows_reverse,
            visibility,
            occlusion,
        },
        kind,
    }
}

/// Rectangles and thick strokes, unioned until a sampled coverage target is
/// hit; the final primitive is trimmed pixel by pixel so coverage lands on
/// the target exactly (within one pixel).
fn stationary_mask(rng: &mut ChaCha8Rng, s: usize, h: usize, w: usize, cov_min: f64, cov_max: f64) -> Array3<u8> {
    let target = rng.gen_range(cov_min..cov_max);
    let want = (target * (h * w) as f64).round() as usize;
    let mut frame = Array2::<u8>::zeros((h, w));
    let mut count = 0usize;
    while count < want {
        // Record newly painted cells in paint order for exact trimming.
        let mut painted: Vec<(usize, usize)> = Vec::new();
        if rng.gen::<f64>() < 0.6 {
            let rw = rng.gen_range(w / 8..=w / 3);
            let rh = rng.gen_range(h / 8..=h / 3);
            let x0 = rng.gen_range(0..w - rw);
            let y0 = rng.gen_range(0..h - rh);
            for x in x0..x0 + rw {
                for y in y0..y0 + rh {
                    if frame[[y, x]] == 0 {
                        frame[[y, x]] = 1;
                        painted.push((y, x));
                    }
                }
            }
        } else {
            let mut y = rng.gen_range(0..h) as i64;
            let mut x = rng.gen_range(0..w) as i64;
            let thick = rng.gen_range(1..=2) as i64;
            let len = rng.gen_range(h..2 * h);
            for _ in 0..len {
                for ddy in -thick..=thick {
                    for ddx in -thick..=thick {
                        let (py, px) = (y + ddy, x + ddx);
                        if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                            let (py, px) = (py as usize, px as usize);
                            if frame[[py, px]] == 0 {
                                frame[[py, px]] = 1;
                                painted.push((py, px));
                            }
                        }
                    }
                }
                y = (y + rng.gen_range(-1..=1)).clamp(0, h as i64 - 1);
                x = (x + rng.gen_range(-1..=1)).clamp(0, w as i64 - 1);
            }
        }
        count += painted.len();
        while count > want {
            let (y, x) = painted.pop().expect("trim within last primitive");
            frame[[y, x]] = 0;
            count -= 1;
        }
    }
    let mut out = Array3::zeros((s, h, w));
    for i in 0..s {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&frame);
    }
    out
}

/// Dilated support of the tracked shape in every frame.
fn object_mask(shape: &Shape, s: usize, h: usize, w: usize, dilation: usize) -> Array3<u8> {
    let mut out = Array3::zeros((s, h, w));
    let r = dilation as i64;
    for i in 0..s {
        let (cx, cy) = shape.center(i);
        let mut support = Array2::<u8>::zeros((h, w));
        for dy in -shape.bbox.1..=shape.bbox.1 {
            for dx in -shape.bbox.0..=shape.bbox.0 {
                if shape.alpha(dx, dy) > 0.0 {
                    let (y, x) = (cy + dy, cx + dx);
                    assert!(y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w, "tracked shape left the frame");
                    support[[y as usize, x as usize]] = 1;
                }
            }
        }
        let mut frame = out.index_axis_mut(ndarray::Axis(0), i);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                'search: for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy > r * r {
                            continue;
                        }
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && support[[sy as usize, sx as usize]] == 1 {
                            frame[[y as usize, x as usize]] = 1;
                            break 'search;
                        }
                    }
                }
            }
        }
    }
    out
}

// ---- PNG and npz I/O ----

/// Writes a `[3, H, W]` frame in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, frame: ndarray::ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = frame.dim();
    assert_eq!(c, 3, "expected RGB planes");
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(quantize(frame[[ch, y, x]]));
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    Ok(())
}

/// Reads an 8-bit RGB PNG into `[3, H, W]` planes in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::Data(format!(
            "{} must be an 8-bit RGB PNG",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[[ch, y, x]] = buf[(y * w + x) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Writes a binary mask as an 8-bit grayscale PNG (0 or 255).
pub fn write_mask_png(path: &Path, mask: ndarray::ArrayView2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    Ok(())
}

/// Reads a grayscale PNG into a 0/1 mask; any nonzero byte counts as masked.
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::Data(format!(
            "{} must be an 8-bit grayscale PNG",
            path.display()
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| u8::from(buf[y * w + x] != 0)))
}

fn png_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Data(format!("png error: {e}"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds a clip through the same 8-bit quantization PNG storage applies.
pub fn quantize_clip(video: &VideoClip) -> VideoClip {
    VideoClip::new(video.data.mapv(|v| quantize(v) as f64 / 255.0)).expect("same shape")
}

fn gt_to_npz(gt: &GroundTruth) -> Npz {
    let s_1 = gt.flows.len();
    let (h, w) = (gt.flows[0].height(), gt.flows[0].width());
    let mut fwd = Array4::<f64>::zeros((s_1, h, w, 2));
    let mut bwd = Array4::<f64>::zeros((s_1, h, w, 2));
    for i in 0..s_1 {
        fwd.index_axis_mut(ndarray::Axis(0), i).assign(&gt.flows[i].data);
        bwd.index_axis_mut(ndarray::Axis(0), i).assign(&gt.flows_reverse[i].data);
    }
    let mut npz = Npz::new();
    npz.insert_f32("background", gt.background.mapv(|v| v as f32).into_dyn());
    npz.insert_f32("flows", fwd.mapv(|v| v as f32).into_dyn());
    npz.insert_f32("flows_reverse", bwd.mapv(|v| v as f32).into_dyn());
    npz.insert_u8("visibility", gt.visibility.clone().into_dyn());
    npz.insert_u8("occlusion", gt.occlusion.clone().into_dyn());
    npz
}

fn required_u8(npz: &Npz, name: &str) -> Result<ndarray::ArrayD<u8>> {
    npz.required(name)?
        .as_u8()
        .cloned()
        .ok_or_else(|| CoreError::Data(format!("array {name:?} must have dtype u8")))
}

fn gt_from_npz(npz: &Npz) -> Result<GroundTruth> {
    let background = npz.required("background")?.to_f64().into_dimensionality().map_err(shape_err)?;
    let fwd: Array4<f64> = npz.required("flows")?.to_f64().into_dimensionality().map_err(shape_err)?;
    let bwd: Array4<f64> = npz.required("flows_reverse")?.to_f64().into_dimensionality().map_err(shape_err)?;
    let visibility: Array3<u8> = required_u8(npz, "visibility")?.into_dimensionality().map_err(shape_err)?;
    let occlusion: Array3<u8> = required_u8(npz, "occlusion")?.into_dimensionality().map_err(shape_err)?;
    let mut flows = Vec::new();
    let mut flows_reverse = Vec::new();
    for i in 0..fwd.dim().0 {
        flows.push(FlowField {
            data: fwd.index_axis(ndarray::Axis(0), i).to_owned(),
        });
        flows_reverse.push(FlowField {
            data: bwd.index_axis(ndarray::Axis(0), i).to_owned(),
        });
    }
    Ok(GroundTruth {
        background,
        flows,
        flows_reverse,
        visibility,
        occlusion,
    })
}

fn shape_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Data(format!("ground-truth array has wrong rank: {e}"))
}

/// Writes a full corpus: `clip_NNNN/frame_NNNN.png`, `mask_NNNN.png`,
/// `gt.npz` per clip, plus `corpus.json` at the root.
pub fn write_corpus(cfg: &DataConfig, out: &Path, clips: usize, seed: u64, force: bool) -> Result<CorpusManifest> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CoreError::Data(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
        std::fs::remove_dir_all(out)?;
    }
    std::fs::create_dir_all(out)?;

    let entries: Vec<Result<ClipEntry>> = (0..clips)
        .into_par_iter()
        .map(|i| {
            let clip = generate_clip(cfg, seed, i as u64);
            let name = format!("clip_{i:04}");
            let dir = out.join(&name);
            write_clip(&dir, &clip)?;
            Ok(ClipEntry {
                name,
                mask_kind: clip.kind,
            })
        })
        .collect();
    let clips: Vec<ClipEntry> = entries.into_iter().collect::<Result<_>>()?;

    let manifest = CorpusManifest {
        version: 1,
        seed,
        config_hash: json_hash(cfg),
        data: cfg.clone(),
        clips,
    };
    std::fs::write(out.join("corpus.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(manifest)
}

/// Writes one clip directory.
pub fn write_clip(dir: &Path, clip: &ClipData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..clip.video.frames() {
        write_rgb_png(
            &dir.join(format!("frame_{i:04}.png")),
            clip.video.data.index_axis(ndarray::Axis(0), i),
        )?;
        write_mask_png(
            &dir.join(format!("mask_{i:04}.png")),
            clip.masks.data.index_axis(ndarray::Axis(0), i),
        )?;
    }
    gt_to_npz(&clip.gt).write_to(&dir.join("gt.npz"))?;
    Ok(())
}

/// Reads one clip directory back (video quantized to 8 bits by storage).
pub fn read_clip(dir: &Path) -> Result<ClipData> {
    let mut frames = Vec::new();
    let mut masks = Vec::new();
    for i in 0.. {
        let fp = dir.join(format!("frame_{i:04}.png"));
        if !fp.exists() {
            break;
        }
        frames.push(read_rgb_png(&fp)?);
        masks.push(read_mask_png(&dir.join(format!("mask_{i:04}.png")))?);
    }
    if frames.len() < 2 {
        return Err(CoreError::Data(format!(
            "clip {} has {} frames; need at least 2",
            dir.display(),
            frames.len()
        )));
    }
    let (c, h, w) = frames[0].dim();
    let mut video = Array4::zeros((frames.len(), c, h, w));
    let mut mask = Array3::zeros((frames.len(), h, w));
    for (i, (f, m)) in frames.iter().zip(&masks).enumerate() {
        if f.dim() != (c, h, w) || m.dim() != (h, w) {
            return Err(CoreError::Data(format!("clip {} has inconsistent frame sizes", dir.display())));
        }
        video.index_axis_mut(ndarray::Axis(0), i).assign(f);
        mask.index_axis_mut(ndarray::Axis(0), i).assign(m);
    }
    let gt = gt_from_npz(&Npz::read_from(&dir.join("gt.npz"))?)?;
    // The mask kind lives in the corpus manifest; a lone clip directory does
    // not repeat it, so default to the conservative stationary semantics.
    Ok(ClipData {
        video: VideoClip::new(video)?,
        masks: MaskSequence::new(mask)?,
        gt,
        kind: MaskKind::Stationary,
    })
}

/// Reads the corpus manifest and returns clip directories in manifest order.
pub fn corpus_clips(root: &Path) -> Result<(CorpusManifest, Vec<PathBuf>)> {
    let text = std::fs::read_to_string(root.join("corpus.json"))
        .map_err(|e| CoreError::Data(format!("missing corpus manifest in {}: {e}", root.display())))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("corrupt corpus manifest: {e}")))?;
    let dirs = manifest.clips.iter().map(|c| root.join(&c.name)).collect();
    Ok((manifest, dirs))
}
