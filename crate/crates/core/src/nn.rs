//! Parameter storage and the small layer set the model is assembled from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Frozen entries enter every graph as constants and are never updated.
    pub frozen: bool,
}

/// Ordered, named collection of every weight in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            frozen,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| !self.entries[id.0].frozen)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| !e.frozen)
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over the names and exact bit patterns of all frozen weights.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.frozen) {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
    /// Round every draw to the nearest `f32` so weights survive
    /// checkpointing exactly.
    f32_exact: bool,
}

impl Init {
    pub fn new(rng: ChaCha8Rng, f32_exact: bool) -> Self {
        Self { rng, f32_exact }
    }

    fn draw(&mut self, shape: &[usize], mut f: impl FnMut(&mut ChaCha8Rng) -> f64) -> Tensor {
        let exact = self.f32_exact;
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            let v = f(rng);
            if exact {
                v as f32 as f64
            } else {
                v
            }
        })
    }

    /// He-style uniform bound `sqrt(6 / ((1 + slope²) · fan_in))`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize, slope: f64) -> Tensor {
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        self.draw(shape, |r| r.gen_range(-bound..bound))
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        self.draw(shape, |r| r.gen_range(-bound..bound))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        self.draw(shape, |r| {
            let z: f64 = r.sample(StandardNormal);
            std * z
        })
    }
}

/// One forward pass: a fresh graph plus the mapping from parameters to the
/// leaves that represent them in it.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads: true,
        }
    }

    /// Every parameter enters as a constant; for inference.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            track_grads: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.g.leaf(e.value.clone(), self.track_grads && !e.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    /// Substitutes an existing graph value for a parameter, so gradients can
    /// be taken with respect to it from outside.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    /// `(parameter, gradient)` for each trainable parameter the pass touched.
    pub fn collect_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.store.entries[i].frozen {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            c_in,
            c_out,
            k,
            stride: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Weights drawn fan-in uniform; biases start at zero unless frozen, in
    /// which case they are drawn small so frozen features carry an offset.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        spec: ConvSpec,
        slope: f64,
        frozen: bool,
    ) -> Self {
        let fan_in = spec.c_in * spec.k * spec.k;
        let w = init.fan_in_uniform(&[spec.c_out, spec.c_in, spec.k, spec.k], fan_in, slope);
        let weight = store.add(format!("{name}.weight"), w, frozen);
        let bias = spec.bias.then(|| {
            let b = if frozen {
                init.uniform(&[spec.c_out], 0.1)
            } else {
                Tensor::zeros(&[spec.c_out])
            };
            store.add(format!("{name}.bias"), b, frozen)
        });
        Self {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.k / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        frozen: bool,
    ) -> Self {
        // Linear maps feed softmax logits or identity paths, not rectifiers.
        let w = init.fan_in_uniform(&[d_in, d_out], d_in, 1.0);
        let weight = store.add(format!("{name}.weight"), w, frozen);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), frozen));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g.linear(x, w, b)
    }
}

/// Projected dot-product attention; self-attention passes the same sequence
/// as `queries` and `context`.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d_query: usize,
        d_context: usize,
        dim: usize,
        heads: usize,
        frozen: bool,
    ) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(
                store,
                init,
                &format!("{name}.q"),
                d_query,
                dim,
                true,
                frozen,
            ),
            // A key bias shifts every logit in a row equally, so it would
            // never receive gradient.
            k: Linear::new(
                store,
                init,
                &format!("{name}.k"),
                d_context,
                dim,
                false,
                frozen,
            ),
            v: Linear::new(
                store,
                init,
                &format!("{name}.v"),
                d_context,
                dim,
                true,
                frozen,
            ),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true, frozen),
            heads,
            dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(cx, queries)?;
        let k = self.k.forward(cx, context)?;
        let v = self.v.forward(cx, context)?;
        let mixed = if self.heads == 1 {
            cx.g.attention(q, k, v)?
        } else {
            let hd = self.dim / self.heads;
            let mut outs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = cx.g.slice_cols(q, h * hd, hd)?;
                let kh = cx.g.slice_cols(k, h * hd, hd)?;
                let vh = cx.g.slice_cols(v, h * hd, hd)?;
                outs.push(cx.g.attention(qh, kh, vh)?);
            }
            cx.g.concat_cols(&outs)?
        };
        self.out.forward(cx, mixed)
    }
}

/// Broadcasts a `[1,H,W]` map over `channels` and multiplies it into `x`.
pub fn gate(cx: &mut Ctx, x: Var, mask: Var) -> Result<Var> {
    let xs = cx.g.shape(x).to_vec();
    let ms = cx.g.shape(mask);
    if xs.len() != 3 || ms != [1, xs[1], xs[2]] {
        return shape_err("gate", format!("feature {xs:?} with mask {ms:?}"));
    }
    let m = cx.g.expand(mask, &xs)?;
    cx.g.mul(x, m)
}
