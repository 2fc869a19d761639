//! Reference prompt encoder: mask-pooled target descriptor, support/query
//! feature construction, and the two cross/self-attention stages that turn a
//! learnable query set into prompt tokens.

use crate::error::{shape_err, Result};
use crate::nn::{Attention, Conv2d, ConvSpec, Ctx, Init, Linear, ParamId, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Tensor, Var};

/// Binary region-of-interest mask, `[1,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMask(Tensor);

impl PromptMask {
    /// Accepts `[H,W]` or `[1,H,W]` values in `[0,1]`, binarized at 0.5.
    pub fn new(values: &Tensor) -> Result<Self> {
        let (h, w) = match values.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => {
                return shape_err(
                    "prompt_mask",
                    format!("expected [H,W] or [1,H,W], got {s:?}"),
                )
            }
        };
        let bin = values.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Ok(Self(bin.reshaped(&[1, h, w])?))
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[1, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0)
    }
}

/// `F_t = mean_{x,y}(mask · F_support)` as a `[C,1,1]` descriptor.
pub fn target_pool(cx: &mut Ctx, mask: Var, f_support: Var) -> Result<Var> {
    let fs = cx.g.shape(f_support).to_vec();
    let ms = cx.g.shape(mask);
    if fs.len() != 3 || ms != [1, fs[1], fs[2]] {
        return shape_err("target_pool", format!("mask {ms:?} for features {fs:?}"));
    }
    let m = cx.g.expand(mask, &fs)?;
    let gated = cx.g.mul(m, f_support)?;
    cx.g.global_avg_pool(gated)
}

/// One RPE instance. The infrared and visible branches each own one.
/// Self-attention with a skip path. Without it, stacked attention averages
/// the token rows into a single vector.
fn self_block(cx: &mut Ctx, attn: &Attention, x: Var) -> Result<Var> {
    let a = attn.forward(cx, x, x)?;
    cx.g.add(x, a)
}

#[derive(Clone, Debug)]
pub struct RpeBranch {
    pub queries: ParamId,
    pub supp_conv: Conv2d,
    pub qry_conv: Conv2d,
    pub cross1: Attention,
    pub self1: Attention,
    pub cross2: Attention,
    pub self2: Attention,
    channels: usize,
}

impl RpeBranch {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        num_queries: usize,
        heads: usize,
    ) -> Self {
        let c = channels;
        let queries = store.add(
            format!("{name}.queries"),
            init.normal(&[num_queries, c], 1.0),
            false,
        );
        let attn = |store: &mut ParamStore, init: &mut Init, n: &str| {
            Attention::new(store, init, &format!("{name}.{n}"), c, c, c, heads, false)
        };
        Self {
            queries,
            supp_conv: Conv2d::new(
                store,
                init,
                &format!("{name}.supp_conv"),
                ConvSpec::new(2 * c, c, 3),
                LEAKY_SLOPE,
                false,
            ),
            qry_conv: Conv2d::new(
                store,
                init,
                &format!("{name}.qry_conv"),
                ConvSpec::new(3 * c, c, 3),
                LEAKY_SLOPE,
                false,
            ),
            cross1: attn(store, init, "cross1"),
            self1: attn(store, init, "self1"),
            cross2: attn(store, init, "cross2"),
            self2: attn(store, init, "self2"),
            channels,
        }
    }

    /// `(F_supp, F_qry)` from the modality feature, the reference feature and
    /// the pooled target descriptor.
    pub fn build_support_query(
        &self,
        cx: &mut Ctx,
        f_mod: Var,
        f_ref: Var,
        f_t: Var,
    ) -> Result<(Var, Var)> {
        let fm = cx.g.shape(f_mod).to_vec();
        let fr = cx.g.shape(f_ref).to_vec();
        if fm.len() != 3 || fr.len() != 3 || fm[1..] != fr[1..] || fm[0] != self.channels {
            return shape_err(
                "build_support_query",
                format!("modality {fm:?}, reference {fr:?}"),
            );
        }
        let t = cx.g.expand(f_t, &[self.channels, fm[1], fm[2]])?;
        let s_in = cx.g.concat(&[f_mod, t])?;
        let s = self.supp_conv.forward(cx, s_in)?;
        let f_supp = cx.g.leaky_relu(s, LEAKY_SLOPE);
        let q_in = cx.g.concat(&[f_ref, t])?;
        let q = self.qry_conv.forward(cx, q_in)?;
        let f_qry = cx.g.leaky_relu(q, LEAKY_SLOPE);
        Ok((f_supp, f_qry))
    }

    /// Pre-projection tokens: cross-attend to support, self-attend, cross-attend
    /// to query, self-attend; `[N,C]`. Self-attention keeps a skip path.
    pub fn encode_tokens(&self, cx: &mut Ctx, f_supp: Var, f_qry: Var) -> Result<Var> {
        let q = cx.p(self.queries);
        let supp = cx.g.flatten_spatial(f_supp)?;
        let qry = cx.g.flatten_spatial(f_qry)?;
        let x = self.cross1.forward(cx, q, supp)?;
        let x = self_block(cx, &self.self1, x)?;
        let x = self.cross2.forward(cx, x, qry)?;
        self_block(cx, &self.self2, x)
    }

    /// Full branch: pooled descriptor, support/query maps, tokens, and the
    /// frozen projection into the backend's prompt space.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        cx: &mut Ctx,
        mask: Var,
        f_mod: Var,
        f_ref: Var,
        projection: &Linear,
        exchange: bool,
    ) -> Result<Var> {
        let f_t = target_pool(cx, mask, f_mod)?;
        let (f_supp, f_qry) = self.build_support_query(cx, f_mod, f_ref, f_t)?;
        let (a, b) = if exchange {
            (f_qry, f_supp)
        } else {
            (f_supp, f_qry)
        };
        let tokens = self.encode_tokens(cx, a, b)?;
        projection.forward(cx, tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn setup() -> (ParamStore, RpeBranch, Linear) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(9), false);
        let b = RpeBranch::new(&mut store, &mut init, "rpe", 16, 40, 1);
        let proj = Linear::new(&mut store, &mut init, "proj", 16, 32, false, true);
        (store, b, proj)
    }

    #[test]
    fn target_pool_examples() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let f = random(&[3, 4, 5], 1);
        let fv = cx.g.constant(f.clone());

        let zero = cx.g.constant(Tensor::zeros(&[1, 4, 5]));
        let t = target_pool(&mut cx, zero, fv).unwrap();
        assert!(cx.g.value(t).data().iter().all(|&v| v == 0.0));

        let ones = cx.g.constant(Tensor::ones(&[1, 4, 5]));
        let t = target_pool(&mut cx, ones, fv).unwrap();
        for c in 0..3 {
            let want: f64 = f.data()[c * 20..(c + 1) * 20].iter().sum::<f64>() / 20.0;
            assert!((cx.g.value(t).data()[c] - want).abs() < 1e-12);
        }

        let mut one_px = Tensor::zeros(&[1, 4, 5]);
        one_px.data_mut()[7] = 1.0;
        let m = cx.g.constant(one_px);
        let t = target_pool(&mut cx, m, fv).unwrap();
        assert_eq!(cx.g.shape(t), &[3, 1, 1]);
        for c in 0..3 {
            let want = f.data()[c * 20 + 7] / 20.0;
            assert!((cx.g.value(t).data()[c] - want).abs() < 1e-15);
        }

        let bad = cx.g.constant(Tensor::zeros(&[1, 4, 4]));
        assert!(target_pool(&mut cx, bad, fv).is_err());
    }

    #[test]
    fn prompt_mask_binarizes_at_half() {
        let m = PromptMask::new(&Tensor::new(&[2, 2], vec![0.49, 0.5, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(m.tensor().shape(), &[1, 2, 2]);
        assert_eq!(m.tensor().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert!(PromptMask::empty(3, 3).is_empty());
    }

    #[test]
    fn support_with_zero_descriptor_depends_only_on_modality_channels() {
        let (mut store, b, _) = setup();
        if let Some(bias) = b.supp_conv.bias {
            store.get_mut(bias).data_mut().fill(0.0);
        }
        let f_mod = random(&[16, 6, 6], 2);
        let run = |f_ref: Tensor| {
            let mut cx = Ctx::new(&store);
            let m = cx.g.constant(f_mod.clone());
            let r = cx.g.constant(f_ref);
            let t = cx.g.constant(Tensor::zeros(&[16, 1, 1]));
            let (s, q) = b.build_support_query(&mut cx, m, r, t).unwrap();
            assert_eq!(cx.g.shape(s), &[16, 6, 6]);
            assert_eq!(cx.g.shape(q), &[16, 6, 6]);
            cx.g.value(s).clone()
        };
        // Changing the reference leaves the support map untouched.
        assert_eq!(run(random(&[32, 6, 6], 3)), run(random(&[32, 6, 6], 4)));
    }

    #[test]
    fn constant_support_and_query_give_identical_token_rows() {
        let (store, b, _) = setup();
        let mut cx = Ctx::new(&store);
        let s = cx.g.constant(Tensor::full(&[16, 8, 8], 0.3));
        let q = cx.g.constant(Tensor::full(&[16, 8, 8], 0.3));
        let p = b.encode_tokens(&mut cx, s, q).unwrap();
        let v = cx.g.value(p);
        assert_eq!(v.shape(), &[40, 16]);
        for col in 0..16 {
            let vals: Vec<f64> = (0..40).map(|r| v.data()[r * 16 + col]).collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(var < 1e-10, "column {col} variance {var}");
        }
    }

    #[test]
    fn branch_output_shape_determinism_and_exchange() {
        let (store, b, proj) = setup();
        let f_mod = random(&[16, 8, 8], 5);
        let f_ref = random(&[32, 8, 8], 6);
        let mut mask = Tensor::zeros(&[1, 8, 8]);
        mask.data_mut()[10..30].fill(1.0);
        let run = |mask: &Tensor, exchange: bool| {
            let mut cx = Ctx::new(&store);
            let m = cx.g.constant(mask.clone());
            let fm = cx.g.constant(f_mod.clone());
            let fr = cx.g.constant(f_ref.clone());
            let p = b.forward(&mut cx, m, fm, fr, &proj, exchange).unwrap();
            cx.g.value(p).clone()
        };
        let p = run(&mask, false);
        assert_eq!(p.shape(), &[40, 32]);
        assert_eq!(p, run(&mask, false));
        assert!(p.max_abs_diff(&run(&mask, true)) > 0.0);
        let empty = run(&Tensor::zeros(&[1, 8, 8]), false);
        assert!(empty.all_finite());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (store, b, proj) = setup();
        let mut cx = Ctx::new(&store);
        let mut mask = Tensor::zeros(&[1, 8, 8]);
        mask.data_mut()[20..40].fill(1.0);
        let m = cx.g.constant(mask);
        let fm = cx.g.constant(random(&[16, 8, 8], 7));
        let fr = cx.g.constant(random(&[32, 8, 8], 8));
        let p = b.forward(&mut cx, m, fm, fr, &proj, false).unwrap();
        let w = cx.g.constant(random(&[40, 32], 9));
        let y = cx.g.mul(p, w).unwrap();
        let y = cx.g.tanh(y);
        let loss = cx.g.sum(y);
        let mut grads = cx.g.backward(loss).unwrap();
        let collected = cx.collect_grads(&mut grads);
        assert_eq!(
            collected.len(),
            store.ids().filter(|&i| !store.entry(i).frozen).count()
        );
        for (id, g) in collected {
            let norm: f64 = g.data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{} has zero gradient", store.entry(id).name);
        }
    }
}
