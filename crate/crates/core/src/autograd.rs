//! Reverse-mode autodiff on a flat tape of f64 arrays.
//!
//! Every operation appends one node holding its value, parent indices and a
//! backward closure. `backward` walks the tape once in reverse creation
//! order, so gradient accumulation order is fixed and runs are bit-identical.
//! Parallel kernels only partition output elements; no reduction ever races.

use std::rc::Rc;

use ndarray::{Array1, Array2, Array4, ArrayD, Ix1, Ix3, Ix4, IxDyn};
use rayon::prelude::*;

use crate::flowlab::WarpPlan;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &[ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
    needs_grad: bool,
}

/// Gradients keyed by tape node.
pub struct Grads {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Growable computation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Constant input: gradients are not tracked through it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, false)
    }

    /// Trainable input: gradients are collected for it.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, true)
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>, force_grad: bool) -> Var {
        let needs_grad = force_grad || parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, parents, backward, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: ArrayD<f64>, back: BackFn) -> Var {
        self.push(value, vec![a.0], Some(back), false)
    }

    fn binary(&mut self, a: Var, b: Var, value: ArrayD<f64>, back: BackFn) -> Var {
        self.push(value, vec![a.0, b.0], Some(back), false)
    }

    /// Runs reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let keep = node.needs_grad;
            if let Some(back) = &node.backward {
                let parent_values: Vec<ArrayD<f64>> =
                    node.parents.iter().map(|&p| self.nodes[p].value.clone()).collect();
                let contribs = back(&gout, &parent_values, &node.value);
                assert_eq!(contribs.len(), node.parents.len(), "backward arity mismatch");
                for (p, contrib) in node.parents.iter().zip(contribs) {
                    if !self.nodes[*p].needs_grad {
                        continue;
                    }
                    match &mut grads[*p] {
                        Some(g) => *g += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
            if keep {
                grads[i] = Some(gout);
            }
        }
        Grads { by_node: grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Box::new(|g, _, _| vec![g.clone(), g.mapv(|v| -v)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = self.value(a) * self.value(b);
        self.binary(
            a,
            b,
            value,
            Box::new(|g, parents, _| vec![g * &parents[1], g * &parents[0]]),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v * c);
        self.unary(a, value, Box::new(move |g, _, _| vec![g.mapv(|v| v * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|v| v + c);
        self.unary(a, value, Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * sigmoid_scalar(x));
        self.unary(
            a,
            value,
            Box::new(|g, parents, _| {
                let dx = parents[0].mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (1.0 + x * (1.0 - s))
                });
                vec![g * &dx]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.unary(a, value, Box::new(|g, _, out| vec![g * &out.mapv(|y| y * (1.0 - y))]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.unary(a, value, Box::new(|g, _, out| vec![g * out]))
    }

    /// Mean over all elements, a `[1]` node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let mean = self.value(a).iter().sum::<f64>() / n;
        let shape = self.value(a).raw_dim();
        let value = ArrayD::from_elem(IxDyn(&[1]), mean);
        self.unary(
            a,
            value,
            Box::new(move |g, _, _| vec![ArrayD::from_elem(shape.clone(), g[[0]] / n)]),
        )
    }

    /// Mean squared error between same-shape tensors, a `[1]` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- shape plumbing ----

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.unary(
            a,
            value,
            Box::new(move |g, _, _| {
                vec![g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned()]
            }),
        )
    }

    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.ndim(), vb.ndim());
        let ca = va.shape()[1];
        let value = ndarray::concatenate(ndarray::Axis(1), &[va.view(), vb.view()])
            .expect("concat shapes")
            .as_standard_layout()
            .to_owned();
        self.binary(
            a,
            b,
            value,
            Box::new(move |g, _, _| {
                let ga = g.slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..ca)).to_owned();
                let gb = g.slice_axis(ndarray::Axis(1), ndarray::Slice::from(ca..)).to_owned();
                vec![ga, gb]
            }),
        )
    }

    pub fn slice_axis1(&mut self, a: Var, start: usize, end: usize) -> Var {
        let full = self.value(a).shape()[1];
        assert!(start < end && end <= full);
        let value = self
            .value(a)
            .slice_axis(ndarray::Axis(1), ndarray::Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        let shape = self.value(a).raw_dim();
        self.unary(
            a,
            value,
            Box::new(move |g, _, _| {
                let mut out = ArrayD::zeros(shape.clone());
                out.slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![out]
            }),
        )
    }

    // ---- neural-net kernels ----

    /// 2D convolution over `[N, Cin, H, W]` with kernel `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let bv = self.value(b).clone().into_dimensionality::<Ix1>().expect("bias 1d");
        let value = conv2d_fwd(&xv, &wv, &bv, stride, pad).into_dyn();
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, parents, _| {
                let g4 = as4(g);
                let x4 = as4(&parents[0]);
                let w4 = as4(&parents[1]);
                let (dx, dw, db) = conv2d_bwd(&g4, &x4, &w4, stride, pad);
                vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
            false,
        )
    }

    /// 3D convolution over `[Cin, S, H, W]` with kernel `[Cout, Cin, kt, kh, kw]`,
    /// stride 1, same padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone().into_dimensionality::<Ix1>().expect("bias 1d");
        let value = conv3d_fwd(&xv, &wv, &bv);
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |g, parents, _| {
                let (dx, dw, db) = conv3d_bwd(g, &parents[0], &parents[1]);
                vec![dx, dw, db.into_dyn()]
            })),
            false,
        )
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = as4(self.value(x));
        let gv = self.value(gamma).clone().into_dimensionality::<Ix1>().expect("gamma 1d");
        let bv = self.value(beta).clone().into_dimensionality::<Ix1>().expect("beta 1d");
        let value = group_norm_fwd(&xv, &gv, &bv, groups).into_dyn();
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |g, parents, _| {
                let g4 = as4(g);
                let x4 = as4(&parents[0]);
                let gam = parents[1].clone().into_dimensionality::<Ix1>().expect("gamma 1d");
                let (dx, dgamma, dbeta) = group_norm_bwd(&g4, &x4, &gam, groups);
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            })),
            false,
        )
    }

    /// Per-channel FiLM: `y = x * (1 + s) + t` with `s`, `t` of shape `[C]`.
    pub fn scale_shift_channels(&mut self, x: Var, s: Var, t: Var) -> Var {
        let xv = as4(self.value(x));
        let sv = self.value(s).clone().into_dimensionality::<Ix1>().expect("scale 1d");
        let tv = self.value(t).clone().into_dimensionality::<Ix1>().expect("shift 1d");
        let (n, c, h, w) = xv.dim();
        assert_eq!(sv.len(), c);
        assert_eq!(tv.len(), c);
        let mut value = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let factor = 1.0 + sv[ci];
            let shift = tv[ci];
            value
                .slice_mut(ndarray::s![.., ci, .., ..])
                .assign(&xv.slice(ndarray::s![.., ci, .., ..]).mapv(|v| v * factor + shift));
        }
        self.push(
            value.into_dyn(),
            vec![x.0, s.0, t.0],
            Some(Box::new(move |g, parents, _| {
                let g4 = as4(g);
                let x4 = as4(&parents[0]);
                let sv = parents[1].clone().into_dimensionality::<Ix1>().expect("scale 1d");
                let (n, c, h, w) = x4.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                let mut ds = Array1::zeros(c);
                let mut dt = Array1::zeros(c);
                for ci in 0..c {
                    let factor = 1.0 + sv[ci];
                    dx.slice_mut(ndarray::s![.., ci, .., ..])
                        .assign(&g4.slice(ndarray::s![.., ci, .., ..]).mapv(|v| v * factor));
                    let gs = g4.slice(ndarray::s![.., ci, .., ..]);
                    let xs = x4.slice(ndarray::s![.., ci, .., ..]);
                    ds[ci] = gs.iter().zip(xs.iter()).map(|(a, b)| a * b).sum();
                    dt[ci] = gs.iter().sum();
                }
                vec![dx.into_dyn(), ds.into_dyn(), dt.into_dyn()]
            })),
            false,
        )
    }

    /// Dense layer on a vector: `y = W x + b` with `W [out, in]`.
    pub fn linear_vec(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = self.value(x).clone().into_dimensionality::<Ix1>().expect("x 1d");
        let wv = self.value(w).clone().into_dimensionality::<ndarray::Ix2>().expect("w 2d");
        let bv = self.value(b).clone().into_dimensionality::<Ix1>().expect("b 1d");
        let value = (wv.dot(&xv) + &bv).into_dyn();
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(|g, parents, _| {
                let g1 = g.clone().into_dimensionality::<Ix1>().expect("g 1d");
                let xv = parents[0].clone().into_dimensionality::<Ix1>().expect("x 1d");
                let wv = parents[1].clone().into_dimensionality::<ndarray::Ix2>().expect("w 2d");
                let dx = wv.t().dot(&g1).into_dyn();
                let dw = g1
                    .view()
                    .insert_axis(ndarray::Axis(1))
                    .dot(&xv.view().insert_axis(ndarray::Axis(0)))
                    .into_dyn();
                vec![dx, dw, g1.into_dyn()]
            })),
            false,
        )
    }

    /// Nearest-neighbor 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = xv.dim();
        let mut value = Array4::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        value[[ni, ci, y, xx]] = xv[[ni, ci, y / 2, xx / 2]];
                    }
                }
            }
        }
        self.unary(
            x,
            value.into_dyn(),
            Box::new(move |g, _, _| {
                let g4 = as4(g);
                let mut dx = Array4::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[[ni, ci, y / 2, xx / 2]] += g4[[ni, ci, y, xx]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Temporal self-attention core over `[S, C, h, w]` tensors: per spatial
    /// position, softmax(q k^T * scale) v along the frame axis. Single head.
    pub fn temporal_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Var {
        let qv = as4(self.value(q));
        let kv = as4(self.value(k));
        let vv = as4(self.value(v));
        assert_eq!(qv.dim(), kv.dim());
        assert_eq!(qv.dim(), vv.dim());
        let value = attention_fwd(&qv, &kv, &vv, scale).into_dyn();
        self.push(
            value,
            vec![q.0, k.0, v.0],
            Some(Box::new(move |g, parents, _| {
                let g4 = as4(g);
                let q4 = as4(&parents[0]);
                let k4 = as4(&parents[1]);
                let v4 = as4(&parents[2]);
                let (dq, dk, dv) = attention_bwd(&g4, &q4, &k4, &v4, scale);
                vec![dq.into_dyn(), dk.into_dyn(), dv.into_dyn()]
            })),
            false,
        )
    }

    /// Warps a `[C, h, w]` frame through a precomputed bilinear plan.
    /// Linear in the input; cells with zero validity output zero.
    /// Extracts the `i`-th subarray along axis 0: `[S, d..] -> [d..]`.
    pub fn index_axis0(&mut self, a: Var, i: usize) -> Var {
        assert!(i < self.value(a).shape()[0]);
        let value = self.value(a).index_axis(ndarray::Axis(0), i).to_owned();
        self.unary(
            a,
            value,
            Box::new(move |g, parents, _| {
                let mut out = ArrayD::zeros(parents[0].raw_dim());
                out.index_axis_mut(ndarray::Axis(0), i).assign(g);
                vec![out]
            }),
        )
    }

    /// Stacks equal-shaped parts along a new leading axis: `S x [d..] -> [S, d..]`.
    pub fn stack0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack0 needs at least one part");
        let views: Vec<ndarray::ArrayViewD<f64>> =
            parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::stack(ndarray::Axis(0), &views).expect("stack shapes must match");
        let parents: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            parents,
            Some(Box::new(|g, parent_values, _| {
                (0..parent_values.len())
                    .map(|i| g.index_axis(ndarray::Axis(0), i).to_owned())
                    .collect()
            })),
            false,
        )
    }

    pub fn warp_frame(&mut self, x: Var, plan: Rc<WarpPlan>) -> Var {
        let xv = self.value(x).clone().into_dimensionality::<Ix3>().expect("frame 3d");
        let (c, h, w) = xv.dim();
        assert_eq!((plan.h, plan.w), (h, w));
        let mut value = ndarray::Array3::zeros((c, h, w));
        for ci in 0..c {
            let src: Vec<f64> = xv.index_axis(ndarray::Axis(0), ci).iter().copied().collect();
            let mut dst = vec![0.0; h * w];
            plan.apply_plane(&src, &mut dst);
            value
                .index_axis_mut(ndarray::Axis(0), ci)
                .assign(&Array2::from_shape_vec((h, w), dst).expect("plane size"));
        }
        let plan_b = plan.clone();
        self.unary(
            x,
            value.into_dyn(),
            Box::new(move |g, _, _| {
                let g3 = g.clone().into_dimensionality::<Ix3>().expect("grad 3d");
                let mut dx = ndarray::Array3::zeros((c, h, w));
                for ci in 0..c {
                    let gplane = g3.index_axis(ndarray::Axis(0), ci);
                    let mut dplane = dx.index_axis_mut(ndarray::Axis(0), ci);
                    let dslice = dplane.as_slice_mut().expect("contiguous");
                    for (cell, taps) in plan_b.taps.iter().enumerate() {
                        if taps.validity == 0.0 {
                            continue;
                        }
                        let gv = gplane.as_slice().expect("contiguous")[cell];
                        for t in 0..taps.n as usize {
                            dslice[taps.idx[t]] += taps.weight[t] * gv;
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Deformable sampling: gathers K*K taps of `feat [C,h,w]` at positions
    /// displaced by learned offsets (clamped to `+-clamp_r`), scales each tap
    /// by its modulation value, and mixes taps with a conv kernel
    /// `w [Cout, C, K, K]`. Offsets pack as `[2*K*K, h, w]` (dx, dy per tap),
    /// modulation as `[K*K, h, w]`.
    pub fn deform_sample(&mut self, feat: Var, off: Var, modu: Var, w: Var, b: Var, clamp_r: f64) -> Var {
        let fv = self.value(feat).clone().into_dimensionality::<Ix3>().expect("feat 3d");
        let ov = self.value(off).clone().into_dimensionality::<Ix3>().expect("off 3d");
        let mv = self.value(modu).clone().into_dimensionality::<Ix3>().expect("mod 3d");
        let wv = as4(self.value(w));
        let bv = self.value(b).clone().into_dimensionality::<Ix1>().expect("bias 1d");
        let value = deform_fwd(&fv, &ov, &mv, &wv, &bv, clamp_r).into_dyn();
        self.push(
            value,
            vec![feat.0, off.0, modu.0, w.0, b.0],
            Some(Box::new(move |g, parents, _| {
                let g3 = g.clone().into_dimensionality::<Ix3>().expect("grad 3d");
                let fv = parents[0].clone().into_dimensionality::<Ix3>().expect("feat 3d");
                let ov = parents[1].clone().into_dimensionality::<Ix3>().expect("off 3d");
                let mv = parents[2].clone().into_dimensionality::<Ix3>().expect("mod 3d");
                let wv = as4(&parents[3]);
                let (df, doff, dmod, dw, db) = deform_bwd(&g3, &fv, &ov, &mv, &wv, clamp_r);
                vec![df.into_dyn(), doff.into_dyn(), dmod.into_dyn(), dw.into_dyn(), db.into_dyn()]
            })),
            false,
        )
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as4(a: &ArrayD<f64>) -> Array4<f64> {
    a.clone().into_dimensionality::<Ix4>().expect("expected 4d tensor")
}

// ---- conv2d kernels ----

fn conv2d_fwd(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let (n, cin, h, ww) = x.dim();
    let (cout, cin2, kh, kw) = w.dim();
    assert_eq!(cin, cin2, "conv2d channel mismatch");
    assert_eq!(b.len(), cout);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (ww + 2 * pad - kw) / stride + 1;
    let mut out = Array4::zeros((n, cout, ho, wo));
    let plane = cout * ho * wo;
    let xs = x.as_slice().expect("contiguous x");
    let wsl = w.as_slice().expect("contiguous w");
    out.as_slice_mut()
        .expect("contiguous out")
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let xrow = ni * cin * h * ww + ci * h * ww + iy * ww;
                                let wrow = co * cin * kh * kw + ci * kh * kw + ky * kw;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= ww {
                                        continue;
                                    }
                                    acc += xs[xrow + ix - pad] * wsl[wrow + kx];
                                }
                            }
                        }
                        chunk[co * ho * wo + oy * wo + ox] = acc;
                    }
                }
            }
        });
    out
}

fn conv2d_bwd(
    g: &Array4<f64>,
    x: &Array4<f64>,
    w: &Array4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, cin, h, ww) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = g.dim();
    let gs = g.as_slice().expect("contiguous g");
    let xs = x.as_slice().expect("contiguous x");
    let wsl = w.as_slice().expect("contiguous w");

    let mut dx = Array4::zeros((n, cin, h, ww));
    let xplane = cin * h * ww;
    dx.as_slice_mut()
        .expect("contiguous dx")
        .par_chunks_mut(xplane)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[ni * cout * ho * wo + co * ho * wo + oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            let wrow0 = co * cin * kh * kw + ci * kh * kw;
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= ww {
                                        continue;
                                    }
                                    chunk[ci * h * ww + iy * ww + (ix - pad)] += gv * wsl[wrow0 + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut dw = Array4::zeros((cout, cin, kh, kw));
    let wplane = cin * kh * kw;
    dw.as_slice_mut()
        .expect("contiguous dw")
        .par_chunks_mut(wplane)
        .enumerate()
        .for_each(|(co, chunk)| {
            for ni in 0..n {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[ni * cout * ho * wo + co * ho * wo + oy * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                let xrow = ni * cin * h * ww + ci * h * ww + iy * ww;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= ww {
                                        continue;
                                    }
                                    chunk[ci * kh * kw + ky * kw + kx] += gv * xs[xrow + ix - pad];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut db = Array1::zeros(cout);
    for ni in 0..n {
        for co in 0..cout {
            db[co] += g.slice(ndarray::s![ni, co, .., ..]).iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

// ---- conv3d kernels (stride 1, same padding) ----

fn conv3d_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, b: &Array1<f64>) -> ArrayD<f64> {
    let xs = x.shape();
    let wsh = w.shape();
    let (cin, s, h, ww) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin2, kt, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3], wsh[4]);
    assert_eq!(cin, cin2, "conv3d channel mismatch");
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let mut out = ArrayD::zeros(IxDyn(&[cout, s, h, ww]));
    let xsl = x.as_slice().expect("contiguous x");
    let wsl = w.as_slice().expect("contiguous w");
    let plane = s * h * ww;
    out.as_slice_mut()
        .expect("contiguous out")
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(co, chunk)| {
            for ti in 0..s {
                for y in 0..h {
                    for xx in 0..ww {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for dt in 0..kt {
                                let t2 = ti + dt;
                                if t2 < pt || t2 - pt >= s {
                                    continue;
                                }
                                let t2 = t2 - pt;
                                for dy in 0..kh {
                                    let y2 = y + dy;
                                    if y2 < ph || y2 - ph >= h {
                                        continue;
                                    }
                                    let y2 = y2 - ph;
                                    let xrow = ci * s * h * ww + t2 * h * ww + y2 * ww;
                                    let wrow = co * cin * kt * kh * kw + ci * kt * kh * kw + dt * kh * kw + dy * kw;
                                    for dxx in 0..kw {
                                        let x2 = xx + dxx;
                                        if x2 < pw || x2 - pw >= ww {
                                            continue;
                                        }
                                        acc += xsl[xrow + x2 - pw] * wsl[wrow + dxx];
                                    }
                                }
                            }
                        }
                        chunk[ti * h * ww + y * ww + xx] = acc;
                    }
                }
            }
        });
    out
}

fn conv3d_bwd(g: &ArrayD<f64>, x: &ArrayD<f64>, w: &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>, Array1<f64>) {
    let xs = x.shape();
    let wsh = w.shape();
    let (cin, s, h, ww) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, _, kt, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3], wsh[4]);
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let gsl = g.as_slice().expect("contiguous g");
    let xsl = x.as_slice().expect("contiguous x");
    let wsl = w.as_slice().expect("contiguous w");

    let mut dx = ArrayD::zeros(IxDyn(&[cin, s, h, ww]));
    {
        // Partition by input channel to keep writes disjoint.
        let plane = s * h * ww;
        dx.as_slice_mut()
            .expect("contiguous dx")
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for co in 0..cout {
                    for ti in 0..s {
                        for y in 0..h {
                            for xx in 0..ww {
                                let gv = gsl[co * s * h * ww + ti * h * ww + y * ww + xx];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dt in 0..kt {
                                    let t2 = ti + dt;
                                    if t2 < pt || t2 - pt >= s {
                                        continue;
                                    }
                                    let t2 = t2 - pt;
                                    for dy in 0..kh {
                                        let y2 = y + dy;
                                        if y2 < ph || y2 - ph >= h {
                                            continue;
                                        }
                                        let y2 = y2 - ph;
                                        let wrow = co * cin * kt * kh * kw + ci * kt * kh * kw + dt * kh * kw + dy * kw;
                                        for dxx in 0..kw {
                                            let x2 = xx + dxx;
                                            if x2 < pw || x2 - pw >= ww {
                                                continue;
                                            }
                                            chunk[t2 * h * ww + y2 * ww + (x2 - pw)] += gv * wsl[wrow + dxx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }

    let mut dw = ArrayD::zeros(IxDyn(&[cout, cin, kt, kh, kw]));
    {
        let plane = cin * kt * kh * kw;
        dw.as_slice_mut()
            .expect("contiguous dw")
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(co, chunk)| {
                for ti in 0..s {
                    for y in 0..h {
                        for xx in 0..ww {
                            let gv = gsl[co * s * h * ww + ti * h * ww + y * ww + xx];
                            if gv == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for dt in 0..kt {
                                    let t2 = ti + dt;
                                    if t2 < pt || t2 - pt >= s {
                                        continue;
                                    }
                                    let t2 = t2 - pt;
                                    for dy in 0..kh {
                                        let y2 = y + dy;
                                        if y2 < ph || y2 - ph >= h {
                                            continue;
                                        }
                                        let y2 = y2 - ph;
                                        let xrow = ci * s * h * ww + t2 * h * ww + y2 * ww;
                                        for dxx in 0..kw {
                                            let x2 = xx + dxx;
                                            if x2 < pw || x2 - pw >= ww {
                                                continue;
                                            }
                                            chunk[ci * kt * kh * kw + dt * kh * kw + dy * kw + dxx] +=
                                                gv * xsl[xrow + x2 - pw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
    }

    let mut db = Array1::zeros(cout);
    for co in 0..cout {
        let start = co * s * h * ww;
        db[co] = gsl[start..start + s * h * ww].iter().sum();
    }
    (dx, dw, db)
}

// ---- group norm kernels ----

const GN_EPS: f64 = 1e-5;

fn group_norm_fwd(x: &Array4<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, groups: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    assert_eq!(c % groups, 0, "channels must divide groups");
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut out = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for gi in 0..groups {
            let sl = x.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
            let mean = sl.iter().sum::<f64>() / m;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (gm, bt) = (gamma[ch], beta[ch]);
                for y in 0..h {
                    for xx in 0..w {
                        out[[ni, ch, y, xx]] = (x[[ni, ch, y, xx]] - mean) * inv * gm + bt;
                    }
                }
            }
        }
    }
    out
}

fn group_norm_bwd(
    g: &Array4<f64>,
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    groups: usize,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let cg = c / groups;
    let m = (cg * h * w) as f64;
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ni in 0..n {
        for gi in 0..groups {
            let xsl = x.slice(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
            let mean = xsl.iter().sum::<f64>() / m;
            let var = xsl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + GN_EPS).sqrt();
            // dxhat plus the two reduction terms of the normalization jacobian.
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ni, ch, y, xx]] - mean) * inv;
                        let gv = g[[ni, ch, y, xx]];
                        dgamma[ch] += gv * xhat;
                        dbeta[ch] += gv;
                        let dxhat = gv * gamma[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                }
            }
            for ci in 0..cg {
                let ch = gi * cg + ci;
                for y in 0..h {
                    for xx in 0..w {
                        let xhat = (x[[ni, ch, y, xx]] - mean) * inv;
                        let dxhat = g[[ni, ch, y, xx]] * gamma[ch];
                        dx[[ni, ch, y, xx]] = inv * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---- attention kernels ----

fn attention_fwd(q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>, scale: f64) -> Array4<f64> {
    let (s, c, h, w) = q.dim();
    let mut out = Array4::zeros((s, c, h, w));
    let qs = q.as_slice().expect("contiguous q");
    let ks = k.as_slice().expect("contiguous k");
    let vs = v.as_slice().expect("contiguous v");
    let cell = |f: usize, ch: usize, idx: usize| f * c * h * w + ch * h * w + idx;
    let hw = h * w;
    let mut planes: Vec<Vec<f64>> = vec![vec![0.0; hw]; s * c];
    planes.par_iter_mut().enumerate().for_each(|(fc, plane)| {
        let fi = fc / c;
        let ch = fc % c;
        for idx in 0..hw {
            // softmax over frames for row fi at this position
            let mut scores = vec![0.0f64; s];
            let mut maxv = f64::NEG_INFINITY;
            for t in 0..s {
                let mut dot = 0.0;
                for cc in 0..c {
                    dot += qs[cell(fi, cc, idx)] * ks[cell(t, cc, idx)];
                }
                let sc = dot * scale;
                scores[t] = sc;
                maxv = maxv.max(sc);
            }
            let mut denom = 0.0;
            for t in 0..s {
                scores[t] = (scores[t] - maxv).exp();
                denom += scores[t];
            }
            let mut acc = 0.0;
            for t in 0..s {
                acc += scores[t] / denom * vs[cell(t, ch, idx)];
            }
            plane[idx] = acc;
        }
    });
    for fi in 0..s {
        for ch in 0..c {
            let plane = &planes[fi * c + ch];
            out.slice_mut(ndarray::s![fi, ch, .., ..])
                .assign(&Array2::from_shape_vec((h, w), plane.clone()).expect("plane"));
        }
    }
    out
}

fn attention_bwd(
    g: &Array4<f64>,
    q: &Array4<f64>,
    k: &Array4<f64>,
    v: &Array4<f64>,
    scale: f64,
) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
    let (s, c, h, w) = q.dim();
    let hw = h * w;
    let qs = q.as_slice().expect("contiguous q");
    let ks = k.as_slice().expect("contiguous k");
    let vs = v.as_slice().expect("contiguous v");
    let gs = g.as_slice().expect("contiguous g");
    let cell = |f: usize, ch: usize, idx: usize| f * c * h * w + ch * h * w + idx;

    // Independent per position: collect per-position gradient blocks, then scatter.
    let blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..hw)
        .into_par_iter()
        .map(|idx| {
            let mut dq = vec![0.0; s * c];
            let mut dk = vec![0.0; s * c];
            let mut dv = vec![0.0; s * c];
            // recompute attention rows
            let mut a = vec![0.0f64; s * s];
            for fi in 0..s {
                let mut maxv = f64::NEG_INFINITY;
                for t in 0..s {
                    let mut dot = 0.0;
                    for cc in 0..c {
                        dot += qs[cell(fi, cc, idx)] * ks[cell(t, cc, idx)];
                    }
                    a[fi * s + t] = dot * scale;
                    maxv = maxv.max(a[fi * s + t]);
                }
                let mut denom = 0.0;
                for t in 0..s {
                    a[fi * s + t] = (a[fi * s + t] - maxv).exp();
                    denom += a[fi * s + t];
                }
                for t in 0..s {
                    a[fi * s + t] /= denom;
                }
            }
            for fi in 0..s {
                // dv and dA
                let mut da = vec![0.0f64; s];
                for t in 0..s {
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let gv = gs[cell(fi, ch, idx)];
                        dv[t * c + ch] += a[fi * s + t] * gv;
                        dot += gv * vs[cell(t, ch, idx)];
                    }
                    da[t] = dot;
                }
                // softmax jacobian
                let dot_aa: f64 = (0..s).map(|t| da[t] * a[fi * s + t]).sum();
                for t in 0..s {
                    let dscore = a[fi * s + t] * (da[t] - dot_aa);
                    for ch in 0..c {
                        dq[fi * c + ch] += scale * dscore * ks[cell(t, ch, idx)];
                        dk[t * c + ch] += scale * dscore * qs[cell(fi, ch, idx)];
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = Array4::zeros((s, c, h, w));
    let mut dk = Array4::zeros((s, c, h, w));
    let mut dv = Array4::zeros((s, c, h, w));
    for (idx, (bq, bk, bv)) in blocks.iter().enumerate() {
        let (y, x) = (idx / w, idx % w);
        for fi in 0..s {
            for ch in 0..c {
                dq[[fi, ch, y, x]] = bq[fi * c + ch];
                dk[[fi, ch, y, x]] = bk[fi * c + ch];
                dv[[fi, ch, y, x]] = bv[fi * c + ch];
            }
        }
    }
    (dq, dk, dv)
}

// ---- deformable sampling kernels ----

struct TapSample {
    value: Vec<f64>,   // per input channel
    corners: [(isize, isize, f64); 4],
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
}

fn sample_tap(feat: &ndarray::Array3<f64>, px: f64, py: f64) -> TapSample {
    let (c, h, w) = feat.dim();
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let corners = [
        (y0 as isize, x0 as isize, (1.0 - fy) * (1.0 - fx)),
        (y0 as isize, x0 as isize + 1, (1.0 - fy) * fx),
        (y0 as isize + 1, x0 as isize, fy * (1.0 - fx)),
        (y0 as isize + 1, x0 as isize + 1, fy * fx),
    ];
    let mut value = vec![0.0; c];
    for &(cy, cx, wt) in &corners {
        if cy < 0 || cx < 0 || cy >= h as isize || cx >= w as isize {
            continue;
        }
        for ci in 0..c {
            value[ci] += wt * feat[[ci, cy as usize, cx as usize]];
        }
    }
    TapSample { value, corners, fx, fy, px, py }
}

fn deform_fwd(
    feat: &ndarray::Array3<f64>,
    off: &ndarray::Array3<f64>,
    modu: &ndarray::Array3<f64>,
    w: &Array4<f64>,
    b: &Array1<f64>,
    clamp_r: f64,
) -> ndarray::Array3<f64> {
    let (c, h, ww) = feat.dim();
    let (cout, cin, kh, kw) = w.dim();
    assert_eq!(c, cin);
    let k2 = kh * kw;
    assert_eq!(off.dim(), (2 * k2, h, ww), "offset channel layout");
    assert_eq!(modu.dim(), (k2, h, ww), "modulation channel layout");
    let mut out = ndarray::Array3::zeros((cout, h, ww));
    for y in 0..h {
        for x in 0..ww {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = ky * kw + kx;
                    let dx = off[[2 * k, y, x]].clamp(-clamp_r, clamp_r);
                    let dy = off[[2 * k + 1, y, x]].clamp(-clamp_r, clamp_r);
                    let px = x as f64 + kx as f64 - (kw / 2) as f64 + dx;
                    let py = y as f64 + ky as f64 - (kh / 2) as f64 + dy;
                    let tap = sample_tap(feat, px, py);
                    let m = modu[[k, y, x]];
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += w[[co, ci, ky, kx]] * tap.value[ci];
                        }
                        out[[co, y, x]] += m * acc;
                    }
                }
            }
        }
    }
    for co in 0..cout {
        out.slice_mut(ndarray::s![co, .., ..]).mapv_inplace(|v| v + b[co]);
    }
    out
}

#[allow(clippy::type_complexity)]
fn deform_bwd(
    g: &ndarray::Array3<f64>,
    feat: &ndarray::Array3<f64>,
    off: &ndarray::Array3<f64>,
    modu: &ndarray::Array3<f64>,
    w: &Array4<f64>,
    clamp_r: f64,
) -> (ndarray::Array3<f64>, ndarray::Array3<f64>, ndarray::Array3<f64>, Array4<f64>, Array1<f64>) {
    let (c, h, ww) = feat.dim();
    let (cout, _, kh, kw) = w.dim();
    let k2 = kh * kw;
    let mut dfeat = ndarray::Array3::zeros((c, h, ww));
    let mut doff = ndarray::Array3::zeros((2 * k2, h, ww));
    let mut dmod = ndarray::Array3::zeros((k2, h, ww));
    let mut dw = Array4::zeros((cout, c, kh, kw));
    let mut db = Array1::zeros(cout);
    for co in 0..cout {
        db[co] = g.slice(ndarray::s![co, .., ..]).iter().sum();
    }
    for y in 0..h {
        for x in 0..ww {
            for ky in 0..kh {
                for kx in 0..kw {
                    let k = ky * kw + kx;
                    let raw_dx = off[[2 * k, y, x]];
                    let raw_dy = off[[2 * k + 1, y, x]];
                    let dx = raw_dx.clamp(-clamp_r, clamp_r);
                    let dy = raw_dy.clamp(-clamp_r, clamp_r);
                    let px = x as f64 + kx as f64 - (kw / 2) as f64 + dx;
                    let py = y as f64 + ky as f64 - (kh / 2) as f64 + dy;
                    let tap = sample_tap(feat, px, py);
                    let m = modu[[k, y, x]];
                    // t[ci] = sum_co g[co] * w[co, ci, ky, kx]
                    let mut tvec = vec![0.0; c];
                    for co in 0..cout {
                        let gv = g[[co, y, x]];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            tvec[ci] += gv * w[[co, ci, ky, kx]];
                            dw[[co, ci, ky, kx]] += gv * m * tap.value[ci];
                        }
                    }
                    let mut dm = 0.0;
                    for ci in 0..c {
                        dm += tvec[ci] * tap.value[ci];
                    }
                    dmod[[k, y, x]] += dm;
                    // scatter into feature corners
                    for &(cy, cx, wt) in &tap.corners {
                        if cy < 0 || cx < 0 || cy >= h as isize || cx >= ww as isize {
                            continue;
                        }
                        for ci in 0..c {
                            dfeat[[ci, cy as usize, cx as usize]] += m * tvec[ci] * wt;
                        }
                    }
                    // position derivatives of bilinear sampling (zero outside)
                    let corner_val = |cy: isize, cx: isize, ci: usize| -> f64 {
                        if cy < 0 || cx < 0 || cy >= h as isize || cx >= ww as isize {
                            0.0
                        } else {
                            feat[[ci, cy as usize, cx as usize]]
                        }
                    };
                    let y0 = tap.py.floor() as isize;
                    let x0 = tap.px.floor() as isize;
                    let mut dpx = 0.0;
                    let mut dpy = 0.0;
                    for ci in 0..c {
                        let v00 = corner_val(y0, x0, ci);
                        let v01 = corner_val(y0, x0 + 1, ci);
                        let v10 = corner_val(y0 + 1, x0, ci);
                        let v11 = corner_val(y0 + 1, x0 + 1, ci);
                        dpx += m * tvec[ci] * ((1.0 - tap.fy) * (v01 - v00) + tap.fy * (v11 - v10));
                        dpy += m * tvec[ci] * ((1.0 - tap.fx) * (v10 - v00) + tap.fx * (v11 - v01));
                    }
                    if raw_dx.abs() < clamp_r {
                        doff[[2 * k, y, x]] += dpx;
                    }
                    if raw_dy.abs() < clamp_r {
                        doff[[2 * k + 1, y, x]] += dpy;
                    }
                }
            }
        }
    }
    (dfeat, doff, dmod, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowlab::FlowField;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d loss / d leaf for a graph builder.
    fn check_grad<F>(shape: &[usize], seed: u64, tol: f64, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = randn(&mut rng, shape);
        let mut tape = Tape::new();
        let x = tape.param(base.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).expect("leaf grad").clone();

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let flat: Vec<usize> = (0..base.len()).collect();
        for &i in flat.iter().step_by((base.len() / 17).max(1)) {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let mut tp = Tape::new();
            let vp = tp.param(plus);
            let lp = build(&mut tp, vp);
            let mut tm = Tape::new();
            let vm = tm.param(minus);
            let lm = build(&mut tm, vm);
            let fd = (tp.value(lp)[[0]] - tm.value(lm)[[0]]) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max((fd - an).abs() / denom);
        }
        assert!(worst < tol, "finite-difference mismatch {worst}");
    }

    #[test]
    fn index_and_stack_grads() {
        check_grad(&[3, 2, 4], 2, 1e-6, |t, x| {
            let a = t.index_axis0(x, 0);
            let b = t.index_axis0(x, 2);
            let ab = t.mul(a, b);
            let c = t.index_axis0(x, 1);
            let restacked = t.stack0(&[ab, c, a]);
            let sq = t.mul(restacked, restacked);
            t.mean_all(sq)
        });
    }

    #[test]
    fn stack_of_indexed_frames_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = randn(&mut rng, &[4, 3, 5]);
        let mut tape = Tape::new();
        let x = tape.constant(base.clone());
        let parts: Vec<Var> = (0..4).map(|i| tape.index_axis0(x, i)).collect();
        let y = tape.stack0(&parts);
        assert_eq!(*tape.value(y), base);
    }

    #[test]
    fn elementwise_grads() {
        check_grad(&[4, 3], 1, 1e-6, |t, x| {
            let y = t.silu(x);
            let z = t.sigmoid(y);
            let e = t.exp(z);
            t.mean_all(e)
        });
    }

    #[test]
    fn mse_grad() {
        check_grad(&[5], 2, 1e-6, |t, x| {
            let target = t.constant(ArrayD::from_elem(IxDyn(&[5]), 0.3));
            t.mse(x, target)
        });
    }

    #[test]
    fn conv2d_grad_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        check_grad(&[2, 2, 5, 5], 4, 1e-6, move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(x, wv, bv, 1, 1);
            t.mean_all(y)
        });
    }

    #[test]
    fn conv2d_grad_w_strided() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[1, 2, 6, 6]);
        let b = randn(&mut rng, &[4]);
        check_grad(&[4, 2, 3, 3], 6, 1e-6, move |t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            let y = t.conv2d(xv, wv, bv, 2, 1);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn conv3d_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = randn(&mut rng, &[2, 3, 3, 3, 3]);
        let b = randn(&mut rng, &[2]);
        check_grad(&[3, 4, 4, 4], 8, 1e-6, move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.conv3d(x, wv, bv);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let x = randn(&mut rng, &[3, 4, 4, 4]);
        let b2 = randn(&mut rng, &[2]);
        check_grad(&[2, 3, 3, 3, 3], 9, 1e-6, move |t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b2.clone());
            let y = t.conv3d(xv, wv, bv);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn group_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gamma = randn(&mut rng, &[6]);
        let beta = randn(&mut rng, &[6]);
        check_grad(&[2, 6, 3, 3], 11, 1e-5, move |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.group_norm(x, g, b, 3);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let x = randn(&mut rng, &[2, 6, 3, 3]);
        let beta2 = randn(&mut rng, &[6]);
        check_grad(&[6], 12, 1e-6, move |t, gv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(beta2.clone());
            let y = t.group_norm(xv, gv, bv, 3);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn attention_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = randn(&mut rng, &[4, 3, 2, 2]);
        let v = randn(&mut rng, &[4, 3, 2, 2]);
        check_grad(&[4, 3, 2, 2], 14, 1e-5, move |t, q| {
            let kv = t.constant(k.clone());
            let vv = t.constant(v.clone());
            let y = t.temporal_attention(q, kv, vv, 1.0 / (3.0f64).sqrt());
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let q = randn(&mut rng, &[4, 3, 2, 2]);
        let v2 = randn(&mut rng, &[4, 3, 2, 2]);
        check_grad(&[4, 3, 2, 2], 15, 1e-5, move |t, kv| {
            let qv = t.constant(q.clone());
            let vv = t.constant(v2.clone());
            let y = t.temporal_attention(qv, kv, vv, 0.5);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn warp_frame_grad_matches_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let flow = FlowField {
            data: ndarray::Array3::from_shape_fn((4, 4, 2), |_| rng.gen_range(-1.5..1.5)),
        };
        let plan = Rc::new(WarpPlan::build(&flow, None));
        check_grad(&[2, 4, 4], 17, 1e-6, move |t, x| {
            let y = t.warp_frame(x, plan.clone());
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn deform_grads_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let feat = randn(&mut rng, &[2, 5, 5]);
        let off = randn(&mut rng, &[18, 5, 5]);
        let modu = randn(&mut rng, &[9, 5, 5]).mapv(f64::abs);
        let w = randn(&mut rng, &[2, 2, 3, 3]);
        let b = randn(&mut rng, &[2]);

        let build_with = |feat: ArrayD<f64>, off: ArrayD<f64>, modu: ArrayD<f64>, w: ArrayD<f64>, b: ArrayD<f64>, which: usize| {
            move |t: &mut Tape, x: Var| {
                let mut vars = [
                    t.constant(feat.clone()),
                    t.constant(off.clone()),
                    t.constant(modu.clone()),
                    t.constant(w.clone()),
                    t.constant(b.clone()),
                ];
                vars[which] = x;
                let y = t.deform_sample(vars[0], vars[1], vars[2], vars[3], vars[4], 4.0);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            }
        };
        check_grad(&[2, 5, 5], 19, 1e-5, build_with(feat.clone(), off.clone(), modu.clone(), w.clone(), b.clone(), 0));
        // Offsets: keep away from integer sampling positions where bilinear
        // interpolation has kinks; fractional random offsets are fine.
        check_grad(&[18, 5, 5], 20, 1e-4, build_with(feat.clone(), off.clone(), modu.clone(), w.clone(), b.clone(), 1));
        check_grad(&[9, 5, 5], 21, 1e-5, build_with(feat.clone(), off.clone(), modu.clone(), w.clone(), b.clone(), 2));
        check_grad(&[2, 2, 3, 3], 22, 1e-5, build_with(feat.clone(), off.clone(), modu.clone(), w.clone(), b.clone(), 3));
        check_grad(&[2], 23, 1e-6, build_with(feat, off, modu, w, b, 4));
    }

    #[test]
    fn shape_plumbing_grads() {
        check_grad(&[2, 3, 4], 24, 1e-6, |t, x| {
            let p = t.permute(x, &[1, 0, 2]);
            let sq = t.mul(p, p);
            t.mean_all(sq)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let other = randn(&mut rng, &[2, 2, 3, 3]);
        check_grad(&[2, 4, 3, 3], 26, 1e-6, move |t, x| {
            let o = t.constant(other.clone());
            let cat = t.concat_axis1(x, o);
            let sl = t.slice_axis1(cat, 1, 5);
            let sq = t.mul(sl, sl);
            t.mean_all(sq)
        });
    }

    #[test]
    fn upsample_grad() {
        check_grad(&[1, 2, 3, 3], 27, 1e-6, |t, x| {
            let y = t.upsample2(x);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn linear_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let w = randn(&mut rng, &[3, 5]);
        let b = randn(&mut rng, &[3]);
        check_grad(&[5], 29, 1e-6, move |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.linear_vec(x, wv, bv);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn scale_shift_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let s = randn(&mut rng, &[3]);
        let sh = randn(&mut rng, &[3]);
        check_grad(&[2, 3, 2, 2], 31, 1e-6, move |t, x| {
            let sv = t.constant(s.clone());
            let tv = t.constant(sh.clone());
            let y = t.scale_shift_channels(x, sv, tv);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let x = randn(&mut rng, &[2, 3, 2, 2]);
        let sh2 = randn(&mut rng, &[3]);
        check_grad(&[3], 32, 1e-6, move |t, sv| {
            let xv = t.constant(x.clone());
            let tv = t.constant(sh2.clone());
            let y = t.scale_shift_channels(xv, sv, tv);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_accumulates_through_shared_node() {
        // y = x + x; d mean(y*y) / dx should be 4x/n * ... check against fd.
        check_grad(&[6], 33, 1e-6, |t, x| {
            let y = t.add(x, x);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn constant_nodes_get_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let x = tape.param(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let y = tape.mul(c, x);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }
}
