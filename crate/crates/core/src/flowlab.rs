//! Optical-flow utilities: warping, chain composition, harmonic completion,
//! resolution changes and `.flo` I/O.
//!
//! Conventions, fixed once for the whole crate:
//! - A flow field between frames `a` and `b` is sampled on `a`'s grid and
//!   points into `b`: warping `b`'s content by it reproduces that content on
//!   `a`'s grid (backward warping, `out(x) = b(x + flow(x))`).
//! - Flow vectors are `(dx, dy)` in pixels, stored `[H, W, 2]`.
//! - `warp` does bilinear sampling with no border clamping: a target cell
//!   whose sampling stencil leaves the grid gets value 0 and validity 0.
//! - `compose_flows` left-folds `result(x) = A(x) + B(x + A(x))`, sampling the
//!   later field bilinearly with clamp-to-border.

use ndarray::{Array2, Array3};

use crate::error::CoreError;
use crate::Result;

/// Dense displacement map `[H, W, 2]`, `(dx, dy)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.dim().2 != 2 {
            return Err(CoreError::Config(format!(
                "flow needs 2 vector channels, got {}",
                data.dim().2
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { data: Array3::zeros((h, w, 2)) }
    }

    /// Constant flow `(dx, dy)` everywhere.
    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let mut data = Array3::zeros((h, w, 2));
        data.slice_mut(ndarray::s![.., .., 0]).fill(dx);
        data.slice_mut(ndarray::s![.., .., 1]).fill(dy);
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }
}

/// Per-cell validity in `[0, 1]` produced by warping.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMap {
    pub data: Array2<f64>,
}

/// Bilinear stencil for one target cell: in-bounds taps into the flattened
/// source plane plus the resolved validity. `oob` marks stencils that touched
/// the outside of the grid; those cells always produce value 0.
#[derive(Debug, Clone, Copy)]
pub struct WarpTaps {
    pub n: u8,
    pub idx: [usize; 4],
    pub weight: [f64; 4],
    pub validity: f64,
    pub oob: bool,
}

/// Precomputed sampling plan shared by the plain warp, the differentiable
/// warp and latent propagation.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pub h: usize,
    pub w: usize,
    pub taps: Vec<WarpTaps>,
}

impl WarpPlan {
    /// Builds the stencil for sampling a source plane of the same size at
    /// `x + flow(x)`. `source_valid` defaults to all-ones.
    pub fn build(flow: &FlowField, source_valid: Option<&Array2<f64>>) -> WarpPlan {
        let (h, w, _) = flow.data.dim();
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let px = x as f64 + flow.data[[y, x, 0]];
                let py = y as f64 + flow.data[[y, x, 1]];
                taps.push(stencil(px, py, h, w, source_valid));
            }
        }
        WarpPlan { h, w, taps }
    }

    /// Applies the plan to one channel plane (flattened row-major source).
    pub fn apply_plane(&self, src: &[f64], dst: &mut [f64]) {
        for (cell, out) in self.taps.iter().zip(dst.iter_mut()) {
            *out = if cell.validity == 0.0 {
                0.0
            } else {
                let mut acc = 0.0;
                for k in 0..cell.n as usize {
                    acc += cell.weight[k] * src[cell.idx[k]];
                }
                acc
            };
        }
    }

    pub fn validity(&self) -> ValidityMap {
        let vals: Vec<f64> = self.taps.iter().map(|t| t.validity).collect();
        ValidityMap { data: Array2::from_shape_vec((self.h, self.w), vals).expect("plan covers the grid") }
    }
}

fn stencil(px: f64, py: f64, h: usize, w: usize, source_valid: Option<&Array2<f64>>) -> WarpTaps {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let mut taps = WarpTaps { n: 0, idx: [0; 4], weight: [0.0; 4], validity: 0.0, oob: false };
    // Corners with nonzero bilinear weight; a zero fraction drops the far corner,
    // so sampling exactly at a border cell stays in bounds.
    let xs: &[(f64, f64)] = if fx == 0.0 { &[(0.0, 1.0)] } else { &[(0.0, 1.0 - fx), (1.0, fx)] };
    let ys: &[(f64, f64)] = if fy == 0.0 { &[(0.0, 1.0)] } else { &[(0.0, 1.0 - fy), (1.0, fy)] };
    let mut validity = 0.0;
    for &(dy, wy) in ys {
        for &(dx, wx) in xs {
            let cx = x0 + dx;
            let cy = y0 + dy;
            if cx < 0.0 || cy < 0.0 || cx > (w - 1) as f64 || cy > (h - 1) as f64 {
                taps.oob = true;
                continue;
            }
            let idx = cy as usize * w + cx as usize;
            let weight = wx * wy;
            taps.idx[taps.n as usize] = idx;
            taps.weight[taps.n as usize] = weight;
            taps.n += 1;
            validity += weight * source_valid.map_or(1.0, |v| v.as_slice().expect("contiguous validity")[idx]);
        }
    }
    taps.validity = if taps.oob { 0.0 } else { validity };
    taps
}

/// Warps a multi-channel field `[D, H, W]` by `flow`, returning the warped
/// field and the validity map. Values are zero wherever validity is zero.
pub fn warp(field: &Array3<f64>, flow: &FlowField, source_valid: Option<&Array2<f64>>) -> Result<(Array3<f64>, ValidityMap)> {
    let (d, h, w) = field.dim();
    if (h, w) != (flow.height(), flow.width()) {
        return Err(CoreError::Config(format!(
            "field {h}x{w} vs flow {}x{} resolution mismatch",
            flow.height(),
            flow.width()
        )));
    }
    if let Some(v) = source_valid {
        if v.dim() != (h, w) {
            return Err(CoreError::Config("validity resolution mismatch".into()));
        }
    }
    let plan = WarpPlan::build(flow, source_valid);
    let mut out = Array3::zeros((d, h, w));
    for c in 0..d {
        let src: Vec<f64> = field.index_axis(ndarray::Axis(0), c).iter().copied().collect();
        let mut dst = vec![0.0; h * w];
        plan.apply_plane(&src, &mut dst);
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&Array2::from_shape_vec((h, w), dst).expect("plane size"));
    }
    Ok((out, plan.validity()))
}

/// Samples one flow component with clamp-to-border bilinear interpolation.
pub(crate) fn sample_flow_clamped(flow: &FlowField, px: f64, py: f64, ch: usize) -> f64 {
    let h = flow.height();
    let w = flow.width();
    let px = px.clamp(0.0, (w - 1) as f64);
    let py = py.clamp(0.0, (h - 1) as f64);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let v00 = flow.data[[y0, x0, ch]];
    let v01 = flow.data[[y0, x1, ch]];
    let v10 = flow.data[[y1, x0, ch]];
    let v11 = flow.data[[y1, x1, ch]];
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Composes a chain of adjacent flows by left fold:
/// `result(x) = A(x) + B(x + A(x))` with `B` sampled clamp-to-border.
///
/// With `chain[i]` mapping frame `i`'s grid into frame `i+1`, the result maps
/// frame 1's grid into the last frame of the chain.
pub fn compose_flows(chain: &[FlowField]) -> Result<FlowField> {
    let first = chain
        .first()
        .ok_or_else(|| CoreError::Config("compose_flows needs a non-empty chain".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut acc = first.clone();
    for next in &chain[1..] {
        if (next.height(), next.width()) != (h, w) {
            return Err(CoreError::Config("flow chain resolution mismatch".into()));
        }
        let mut out = Array3::zeros((h, w, 2));
        for y in 0..h {
            for x in 0..w {
                let ax = acc.data[[y, x, 0]];
                let ay = acc.data[[y, x, 1]];
                let px = x as f64 + ax;
                let py = y as f64 + ay;
                out[[y, x, 0]] = ax + sample_flow_clamped(next, px, py, 0);
                out[[y, x, 1]] = ay + sample_flow_clamped(next, px, py, 1);
            }
        }
        acc = FlowField { data: out };
    }
    Ok(acc)
}

/// Residual target for harmonic completion; iteration stops well below the
/// 1e-4 contract bound.
const COMPLETION_RESIDUAL: f64 = 1e-6;
const COMPLETION_MAX_SWEEPS: usize = 200_000;

/// Fills masked flow cells by harmonic interpolation from the unmasked
/// boundary (Gauss-Seidel until the residual drops below 1e-4). Unmasked
/// cells pass through bit-exact. A fully masked field becomes zero flow.
pub fn complete_flow(flow: &FlowField, mask: &Array2<u8>) -> Result<FlowField> {
    let (h, w) = (flow.height(), flow.width());
    if mask.dim() != (h, w) {
        return Err(CoreError::Config("mask resolution must match flow".into()));
    }
    if mask.iter().all(|&m| m != 0) {
        eprintln!("warning: flow completion on a fully masked field; returning zero flow");
        return Ok(FlowField::zeros(h, w));
    }
    let mut out = flow.clone();
    let masked: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| mask[[y, x]] != 0)
        .collect();
    if masked.is_empty() {
        return Ok(out);
    }
    // Start masked cells from zero; the boundary values pull them into place.
    for &(y, x) in &masked {
        out.data[[y, x, 0]] = 0.0;
        out.data[[y, x, 1]] = 0.0;
    }
    for ch in 0..2 {
        let mut sweeps = 0;
        loop {
            let mut residual = 0.0f64;
            for &(y, x) in &masked {
                let mut acc = 0.0;
                let mut n = 0.0;
                if y > 0 {
                    acc += out.data[[y - 1, x, ch]];
                    n += 1.0;
                }
                if y + 1 < h {
                    acc += out.data[[y + 1, x, ch]];
                    n += 1.0;
                }
                if x > 0 {
                    acc += out.data[[y, x - 1, ch]];
                    n += 1.0;
                }
                if x + 1 < w {
                    acc += out.data[[y, x + 1, ch]];
                    n += 1.0;
                }
                let target = acc / n;
                residual = residual.max((target - out.data[[y, x, ch]]).abs());
                out.data[[y, x, ch]] = target;
            }
            sweeps += 1;
            if residual < COMPLETION_RESIDUAL {
                break;
            }
            if sweeps > COMPLETION_MAX_SWEEPS {
                return Err(CoreError::Numeric("flow completion failed to converge".into()));
            }
        }
    }
    Ok(out)
}

/// Downsamples a flow by factor `f`: area-average per block, then divide the
/// vectors by `f` so they stay in units of the coarse grid.
pub fn downsample_flow(flow: &FlowField, f: usize) -> Result<FlowField> {
    let (h, w) = (flow.height(), flow.width());
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(CoreError::Config(format!("flow {h}x{w} not divisible by factor {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let mut out = Array3::zeros((oh, ow, 2));
    let norm = (f * f) as f64;
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..2 {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += flow.data[[y * f + dy, x * f + dx, ch]];
                    }
                }
                out[[y, x, ch]] = acc / norm / f as f64;
            }
        }
    }
    Ok(FlowField { data: out })
}

/// Downsamples a binary mask by factor `f` with max-pooling: a coarse cell is
/// masked if any pixel inside it is masked.
pub fn downsample_mask(mask: &Array2<u8>, f: usize) -> Result<Array2<u8>> {
    let (h, w) = mask.dim();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(CoreError::Config(format!("mask {h}x{w} not divisible by factor {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut any = 0u8;
            'block: for dy in 0..f {
                for dx in 0..f {
                    if mask[[y * f + dy, x * f + dx]] != 0 {
                        any = 1;
                        break 'block;
                    }
                }
            }
            out[[y, x]] = any;
        }
    }
    Ok(out)
}

const FLO_MAGIC: f32 = 202021.25;

/// Writes Middlebury `.flo`: magic, width, height, interleaved row-major f32 pairs.
pub fn write_flo(path: &std::path::Path, flow: &FlowField) -> Result<()> {
    use std::io::Write;
    let mut out = Vec::new();
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            out.extend_from_slice(&(flow.data[[y, x, 0]] as f32).to_le_bytes());
            out.extend_from_slice(&(flow.data[[y, x, 1]] as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads a `.flo` file written by [`write_flo`] (or any Middlebury flow).
pub fn read_flo(path: &std::path::Path) -> Result<FlowField> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 {
        return Err(CoreError::Data("flo file too small".into()));
    }
    let magic = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != FLO_MAGIC {
        return Err(CoreError::Data(format!("bad flo magic {magic}")));
    }
    let w = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let h = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if w <= 0 || h <= 0 {
        return Err(CoreError::Data("bad flo dimensions".into()));
    }
    let (w, h) = (w as usize, h as usize);
    let want = 12 + w * h * 2 * 4;
    if bytes.len() < want {
        return Err(CoreError::Data("flo payload truncated".into()));
    }
    let mut data = Array3::zeros((h, w, 2));
    let mut pos = 12;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..2 {
                data[[y, x, ch]] = f32::from_le_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]]) as f64;
                pos += 4;
            }
        }
    }
    Ok(FlowField { data })
}
