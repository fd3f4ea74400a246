//! Parameter storage, optimization and reusable network blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by hierarchical names such as
//! `unet.down0.res.conv1.weight`. A [`Session`] binds store values onto an
//! autodiff tape for one forward/backward pass; trainable parameters become
//! gradient-tracked nodes, frozen ones bind as constants so their values and
//! optimizer moments cannot drift even by one ulp.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};

/// One named tensor with optimizer state.
pub struct ParamSlot {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

/// Ordered, name-indexed collection of parameters.
#[derive(Default)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = self.slots.len();
        let zeros = ArrayD::zeros(value.raw_dim());
        self.slots.push(ParamSlot {
            name: name.to_string(),
            value,
            trainable: true,
            m: zeros.clone(),
            v: zeros,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn slot(&self, id: usize) -> &ParamSlot {
        &self.slots[id]
    }

    pub fn slot_mut(&mut self, id: usize) -> &mut ParamSlot {
        &mut self.slots[id]
    }

    pub fn value(&self, id: usize) -> &ArrayD<f64> {
        &self.slots[id].value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamSlot> {
        self.slots.iter()
    }

    /// Marks each parameter trainable or frozen according to the predicate.
    pub fn set_trainable<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for slot in &mut self.slots {
            slot.trainable = pred(&slot.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.slots.iter().filter(|s| s.trainable).count()
    }

    /// SHA-256 over the selected parameters, iterated in name order, covering
    /// name, shape and little-endian f64 payload. Stable across runs.
    pub fn checksum<F: Fn(&str) -> bool>(&self, pred: F) -> String {
        let mut ordered: Vec<&ParamSlot> = self.slots.iter().filter(|s| pred(&s.name)).collect();
        ordered.sort_by(|a, b| a.name.cmp(&b.name));
        let mut hasher = Sha256::new();
        for slot in ordered {
            hasher.update(slot.name.as_bytes());
            hasher.update([0u8]);
            for d in slot.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in slot.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}

/// Gradients keyed by parameter id.
pub struct ParamGrads {
    by_id: Vec<Option<ArrayD<f64>>>,
}

impl ParamGrads {
    pub fn get(&self, id: usize) -> Option<&ArrayD<f64>> {
        self.by_id.get(id).and_then(|g| g.as_ref())
    }
}

/// One forward/backward pass: a tape plus bindings from store ids to nodes.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Binds a parameter onto the tape, caching the node so repeated uses
    /// share one node and gradient accumulation happens automatically.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let slot = self.store.slot(id);
        let var = if slot.trainable {
            self.tape.param(slot.value.clone())
        } else {
            self.tape.constant(slot.value.clone())
        };
        self.bound[id] = Some(var);
        var
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.tape.constant(value)
    }

    /// Runs backward from a scalar loss and maps node gradients back to
    /// parameter ids. Frozen parameters never appear.
    pub fn grads(&self, loss: Var) -> ParamGrads {
        let node_grads = self.tape.backward(loss);
        let mut by_id = vec![None; self.store.len()];
        for (id, var) in self.bound.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = node_grads.get(*v) {
                    by_id[id] = Some(g.clone());
                }
            }
        }
        ParamGrads { by_id }
    }
}

/// Adam with bias correction. Frozen parameters are skipped outright, so
/// their values and moments stay bit-identical across any number of steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let slot = store.slot_mut(id);
            if !slot.trainable {
                continue;
            }
            assert_eq!(slot.value.shape(), g.shape(), "gradient shape mismatch for {}", slot.name);
            ndarray::Zip::from(&mut slot.m)
                .and(g)
                .for_each(|m, &gv| *m = self.beta1 * *m + (1.0 - self.beta1) * gv);
            ndarray::Zip::from(&mut slot.v)
                .and(g)
                .for_each(|v, &gv| *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv);
            ndarray::Zip::from(&mut slot.value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with He fan-in scaling.
    HeNormal,
    /// All zeros; used for output layers so blocks start as identities.
    Zero,
    /// 1x1 kernel forwarding input channel i to output channel i, zero for
    /// input channels beyond the output count. Bias zero.
    IdentitySlice,
}

fn he_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

/// 2D convolution layer descriptor; parameters live in the store.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, k, k];
        let w = match init {
            Init::HeNormal => he_tensor(rng, &shape, cin * k * k),
            Init::Zero => ArrayD::zeros(IxDyn(&shape)),
            Init::IdentitySlice => {
                assert_eq!(k, 1, "identity init is for 1x1 kernels");
                let mut w = ArrayD::zeros(IxDyn(&shape));
                for co in 0..cout.min(cin) {
                    w[[co, co, 0, 0]] = 1.0;
                }
                w
            }
        };
        let w = store.add(&format!("{name}.weight"), w);
        let b = store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        sess.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 3D convolution layer (stride 1, same padding) over `[Cin, S, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: usize,
    pub b: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kt: usize,
        kh: usize,
        kw: usize,
        rng: &mut ChaCha8Rng,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, kt, kh, kw];
        let w = match init {
            Init::HeNormal => he_tensor(rng, &shape, cin * kt * kh * kw),
            Init::Zero => ArrayD::zeros(IxDyn(&shape)),
            Init::IdentitySlice => panic!("identity init undefined for conv3d"),
        };
        let w = store.add(&format!("{name}.weight"), w);
        let b = store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
        Self { w, b }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        sess.tape.conv3d(x, w, b)
    }
}

/// Group normalization with learned per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide groups");
        let gamma = store.add(&format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), 1.0));
        let beta = store.add(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let g = sess.param(self.gamma);
        let b = sess.param(self.beta);
        sess.tape.group_norm(x, g, b, self.groups)
    }
}

/// Dense layer on vectors.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::HeNormal => he_tensor(rng, &[fan_out, fan_in], fan_in),
            Init::Zero => ArrayD::zeros(IxDyn(&[fan_out, fan_in])),
            Init::IdentitySlice => panic!("identity init undefined for linear"),
        };
        let w = store.add(&format!("{name}.weight"), w);
        let b = store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[fan_out])));
        Self { w, b }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let w = sess.param(self.w);
        let b = sess.param(self.b);
        sess.tape.linear_vec(x, w, b)
    }
}

/// Sinusoidal embedding of a scalar position into `dim` channels
/// (`dim` must be even). Used for both diffusion timesteps and frame indices.
pub fn sinusoidal_embedding(pos: f64, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    out
}

/// Frame-position embeddings for a clip: row `s` embeds position `s`.
/// Length-agnostic: any clip length gets consistent embeddings.
pub fn frame_position_embeddings(frames: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((frames, dim));
    for s in 0..frames {
        out.row_mut(s).assign(&sinusoidal_embedding(s as f64, dim));
    }
    out
}

/// Temporal self-attention block on `[S, C, h, w]`: group norm, frame-position
/// embeddings, single-head attention along the frame axis, zero-initialized
/// output projection so the block starts as an exact identity.
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

impl TemporalAttention {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        let norm = GroupNorm::init(store, &format!("{name}.norm"), channels, groups);
        let q = Conv2d::init(store, &format!("{name}.q"), channels, channels, 1, 1, 0, rng, Init::HeNormal);
        let k = Conv2d::init(store, &format!("{name}.k"), channels, channels, 1, 1, 0, rng, Init::HeNormal);
        let v = Conv2d::init(store, &format!("{name}.v"), channels, channels, 1, 1, 0, rng, Init::HeNormal);
        let proj = Conv2d::init(store, &format!("{name}.proj"), channels, channels, 1, 1, 0, rng, Init::Zero);
        Self { norm, q, k, v, proj, channels }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Var {
        let shape = sess.tape.value(x).shape().to_vec();
        let (s, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels);
        let hn = self.norm.forward(sess, x);
        // Broadcast fixed frame-position embeddings across space.
        let emb = frame_position_embeddings(s, c);
        let mut full = ndarray::Array4::zeros((s, c, h, w));
        for si in 0..s {
            for ci in 0..c {
                full.slice_mut(ndarray::s![si, ci, .., ..]).fill(emb[[si, ci]]);
            }
        }
        let embv = sess.constant(full.into_dyn());
        let hp = sess.tape.add(hn, embv);
        let q = self.q.forward(sess, hp);
        let k = self.k.forward(sess, hp);
        let v = self.v.forward(sess, hp);
        let scale = 1.0 / (c as f64).sqrt();
        let att = sess.tape.temporal_attention(q, k, v, scale);
        let o = self.proj.forward(sess, att);
        sess.tape.add(x, o)
    }
}

/// Residual block with FiLM conditioning from a context vector. The second
/// convolution and both FiLM heads start at zero, so a fresh block computes
/// the identity (through the skip path).
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub film_scale: Linear,
    pub film_shift: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        ctx_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm1 = GroupNorm::init(store, &format!("{name}.norm1"), cin, groups);
        let conv1 = Conv2d::init(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng, Init::HeNormal);
        let film_scale = Linear::init(store, &format!("{name}.film_scale"), ctx_dim, cout, rng, Init::Zero);
        let film_shift = Linear::init(store, &format!("{name}.film_shift"), ctx_dim, cout, rng, Init::Zero);
        let norm2 = GroupNorm::init(store, &format!("{name}.norm2"), cout, groups);
        let conv2 = Conv2d::init(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng, Init::Zero);
        let skip = if cin != cout {
            Some(Conv2d::init(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng, Init::HeNormal))
        } else {
            None
        };
        Self { norm1, conv1, film_scale, film_shift, norm2, conv2, skip }
    }

    pub fn forward(&self, sess: &mut Session, x: Var, ctx: Var) -> Var {
        let mut h = self.norm1.forward(sess, x);
        h = sess.tape.silu(h);
        h = self.conv1.forward(sess, h);
        let s = self.film_scale.forward(sess, ctx);
        let t = self.film_shift.forward(sess, ctx);
        h = sess.tape.scale_shift_channels(h, s, t);
        h = self.norm2.forward(sess, h);
        h = sess.tape.silu(h);
        h = self.conv2.forward(sess, h);
        let base = match &self.skip {
            Some(skip) => skip.forward(sess, x),
            None => x,
        };
        sess.tape.add(base, h)
    }
}

/// Seeds a deterministic generator for model initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws a standard-normal tensor from the given stream.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(rng))
}

/// Uniformly picks a diffusion timestep in `1..=t_max`.
pub fn sample_timestep(rng: &mut ChaCha8Rng, t_max: usize) -> usize {
    rng.gen_range(1..=t_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut adam = Adam::new(0.1);
        for _ in 0..300 {
            let mut sess = Session::new(&store);
            let x = sess.param(id);
            let sq = sess.tape.mul(x, x);
            let loss = sess.tape.mean_all(sq);
            let grads = sess.grads(loss);
            adam.step(&mut store, &grads);
        }
        for v in store.value(id).iter() {
            assert!(v.abs() < 1e-2, "adam failed to shrink parameter: {v}");
        }
    }

    #[test]
    fn frozen_parameter_is_bit_identical_after_steps() {
        let mut store = ParamStore::new();
        let free = store.add("free", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let frozen = store.add("frozen", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        store.set_trainable(|name| name == "free");
        let before = store.value(frozen).clone();
        let before_sum = store.checksum(|n| n == "frozen");
        let mut adam = Adam::new(0.05);
        for _ in 0..50 {
            let mut sess = Session::new(&store);
            let a = sess.param(free);
            let b = sess.param(frozen);
            let y = sess.tape.mul(a, b);
            let loss = sess.tape.mean_all(y);
            let grads = sess.grads(loss);
            assert!(grads.get(frozen).is_none(), "frozen param must not receive gradients");
            adam.step(&mut store, &grads);
        }
        let after = store.value(frozen);
        assert_eq!(before.as_slice().unwrap(), after.as_slice().unwrap());
        assert_eq!(before_sum, store.checksum(|n| n == "frozen"));
        assert!(store.value(free)[[0]] != 1.0, "trainable param should move");
    }

    #[test]
    fn checksum_is_order_independent_and_value_sensitive() {
        let mut a = ParamStore::new();
        a.add("p.one", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        a.add("p.two", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let mut b = ParamStore::new();
        b.add("p.two", ArrayD::from_elem(IxDyn(&[2]), 2.0));
        b.add("p.one", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        assert_eq!(a.checksum(|_| true), b.checksum(|_| true));
        b.slot_mut(0).value[[0]] += 1e-12;
        assert_ne!(a.checksum(|_| true), b.checksum(|_| true));
    }

    #[test]
    fn identity_conv_forwards_first_channels() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let conv = Conv2d::init(&mut store, "merge", 4, 2, 1, 1, 0, &mut rng, Init::IdentitySlice);
        let mut sess = Session::new(&store);
        let x = sess.constant(ArrayD::from_shape_fn(IxDyn(&[1, 4, 2, 2]), |ix| {
            (ix[1] * 10 + ix[2] * 2 + ix[3]) as f64
        }));
        let y = conv.forward(&mut sess, x);
        let yv = sess.tape.value(y);
        for c in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    assert_eq!(yv[[0, c, yy, xx]], (c * 10 + yy * 2 + xx) as f64);
                }
            }
        }
    }

    #[test]
    fn fresh_resblock_is_identity_when_widths_match() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(1);
        let block = ResBlock::init(&mut store, "rb", 8, 8, 4, 4, &mut rng);
        let mut sess = Session::new(&store);
        let x = sess.constant(randn(&mut rng, &[2, 8, 3, 3]));
        let ctx = sess.constant(randn(&mut rng, &[4]));
        let y = block.forward(&mut sess, x, ctx);
        let xv = sess.tape.value(x).clone();
        let yv = sess.tape.value(y).clone();
        assert_eq!(xv.as_slice().unwrap(), yv.as_slice().unwrap());
    }

    #[test]
    fn fresh_attention_block_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(2);
        let block = TemporalAttention::init(&mut store, "att", 8, 4, &mut rng);
        let mut sess = Session::new(&store);
        let x = sess.constant(randn(&mut rng, &[3, 8, 2, 2]));
        let y = block.forward(&mut sess, x);
        let xv = sess.tape.value(x).clone();
        let yv = sess.tape.value(y).clone();
        assert_eq!(xv.as_slice().unwrap(), yv.as_slice().unwrap());
    }

    #[test]
    fn sinusoidal_embedding_basics() {
        let e = sinusoidal_embedding(0.0, 8);
        for i in 0..4 {
            assert_eq!(e[2 * i], 0.0);
            assert_eq!(e[2 * i + 1], 1.0);
        }
        let e1 = sinusoidal_embedding(1.0, 8);
        let e2 = sinusoidal_embedding(2.0, 8);
        assert_ne!(e1, e2);
        let table = frame_position_embeddings(5, 8);
        assert_eq!(table.dim(), (5, 8));
        assert_eq!(table.row(3).to_owned(), sinusoidal_embedding(3.0, 8));
    }

    #[test]
    fn he_init_scale_is_reasonable() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let conv = Conv2d::init(&mut store, "c", 16, 64, 3, 1, 1, &mut rng, Init::HeNormal);
        let w = store.value(conv.w);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / (16.0 * 9.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - expected).abs() < expected * 0.2, "var {var} vs {expected}");
    }

    #[test]
    fn session_reuses_bound_parameter_nodes() {
        let mut store = ParamStore::new();
        let id = store.add("w", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut sess = Session::new(&store);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        // Using the parameter twice doubles its gradient.
        let y = sess.tape.add(a, b);
        let loss = sess.tape.mean_all(y);
        let grads = sess.grads(loss);
        let g = grads.get(id).unwrap();
        assert!((g[[0]] - 1.0).abs() < 1e-12, "expected 2 * 1/2 = 1, got {}", g[[0]]);
    }
}
