//! Prompt-semantic fusion: every downsampled pixel attends to the prompt
//! tokens, the result is upsampled back and gated by the predicted mask.

use crate::error::{shape_err, Result};
use crate::nn::{gate, Attention, Conv2d, ConvSpec, Ctx, Init, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Debug)]
pub struct Psfm {
    pub attn: Attention,
}

impl Psfm {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        channels: usize,
        d_prompt: usize,
        heads: usize,
    ) -> Self {
        Self {
            attn: Attention::new(
                store,
                init,
                &format!("{name}.attn"),
                channels,
                d_prompt,
                channels,
                heads,
                false,
            ),
        }
    }

    /// Attended map before gating, `[C,H,W]`.
    pub fn attend(&self, cx: &mut Ctx, f: Var, tokens: Var) -> Result<Var> {
        let fs = cx.g.shape(f).to_vec();
        if fs.len() != 3 || fs[1] % 2 != 0 || fs[2] % 2 != 0 {
            return shape_err("psfm", format!("features {fs:?} need even spatial extents"));
        }
        let down = cx.g.downsample_avg(f)?;
        let seq = cx.g.flatten_spatial(down)?;
        let attended = self.attn.forward(cx, seq, tokens)?;
        let map = cx.g.view_spatial(attended, fs[1] / 2, fs[2] / 2)?;
        cx.g.upsample_nearest(map, 2)
    }

    /// `F^p = M · Up(View(CrossAttn(Flatten(Down(f)), P)))`.
    pub fn forward(&self, cx: &mut Ctx, f: Var, tokens: Var, mask: Var) -> Result<Var> {
        let pre = self.attend(cx, f, tokens)?;
        gate(cx, pre, mask)
    }
}

/// Bias-free 1×1 projection of a prompted feature onto the reference width.
/// No bias keeps a zero prompted feature a zero delta.
pub fn prompt_projection(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Conv2d {
    Conv2d::new(
        store,
        init,
        name,
        ConvSpec::new(c_in, c_out, 1).no_bias(),
        1.0,
        false,
    )
}

/// `F_ref + α·delta`; `α = 0` returns `F_ref` itself.
pub fn compose(cx: &mut Ctx, f_ref: Var, delta: Option<Var>, alpha: f64) -> Result<Var> {
    match delta {
        Some(d) if alpha != 0.0 => {
            let scaled = cx.g.scale(d, alpha);
            cx.g.add(f_ref, scaled)
        }
        _ => Ok(f_ref),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    fn setup() -> (ParamStore, Psfm) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(4), false);
        let p = Psfm::new(&mut store, &mut init, "psfm", 16, 32, 1);
        (store, p)
    }

    #[test]
    fn zero_mask_gives_zero_feature() {
        let (store, psfm) = setup();
        let mut cx = Ctx::new(&store);
        let f = cx.g.constant(random(&[16, 8, 8], 1));
        let p = cx.g.constant(random(&[40, 32], 2));
        let m = cx.g.constant(Tensor::zeros(&[1, 8, 8]));
        let out = psfm.forward(&mut cx, f, p, m).unwrap();
        assert!(cx.g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_token_gives_spatially_constant_map() {
        let (store, psfm) = setup();
        let mut cx = Ctx::new(&store);
        let f = cx.g.constant(random(&[16, 8, 8], 3));
        let t = random(&[1, 32], 4);
        let tokens = Tensor::from_fn(&[40, 32], |i| t.data()[i % 32]);
        let p = cx.g.constant(tokens);
        let m = cx.g.constant(Tensor::ones(&[1, 8, 8]));
        let out = psfm.forward(&mut cx, f, p, m).unwrap();
        let v = cx.g.value(out);
        for c in 0..16 {
            let plane = &v.data()[c * 64..(c + 1) * 64];
            let mean = plane.iter().sum::<f64>() / 64.0;
            let var = plane.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(var < 1e-10);
        }
    }

    #[test]
    fn shapes_follow_down_flatten_up() {
        let (store, psfm) = setup();
        let mut cx = Ctx::new(&store);
        let f = cx.g.constant(random(&[16, 64, 64], 5));
        let down = cx.g.downsample_avg(f).unwrap();
        let seq = cx.g.flatten_spatial(down).unwrap();
        assert_eq!(cx.g.shape(seq), &[1024, 16]);
        let p = cx.g.constant(random(&[40, 32], 6));
        let m = cx.g.constant(Tensor::ones(&[1, 64, 64]));
        let out = psfm.forward(&mut cx, f, p, m).unwrap();
        assert_eq!(cx.g.shape(out), &[16, 64, 64]);
    }

    #[test]
    fn gating_is_exact_pixelwise() {
        let (store, psfm) = setup();
        let mut cx = Ctx::new(&store);
        let f = cx.g.constant(random(&[16, 8, 8], 7));
        let p = cx.g.constant(random(&[40, 32], 8));
        let mask = Tensor::from_fn(&[1, 8, 8], |i| if i % 3 == 0 { 0.0 } else { 0.7 });
        let m = cx.g.constant(mask.clone());
        let out = psfm.forward(&mut cx, f, p, m).unwrap();
        let v = cx.g.value(out);
        for c in 0..16 {
            for i in 0..64 {
                if mask.data()[i] == 0.0 {
                    assert_eq!(v.data()[c * 64 + i], 0.0);
                }
            }
        }
    }

    #[test]
    fn compose_scales_delta_linearly() {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let f_ref = cx.g.constant(random(&[32, 4, 4], 9));
        let d = cx.g.constant(random(&[32, 4, 4], 10));
        assert_eq!(compose(&mut cx, f_ref, Some(d), 0.0).unwrap(), f_ref);
        let l1 = |cx: &mut Ctx, a: f64| {
            let f = compose(cx, f_ref, Some(d), a).unwrap();
            cx.g.value(f)
                .data()
                .iter()
                .zip(cx.g.value(f_ref).data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
        };
        let base = l1(&mut cx, 1.0);
        for a in [0.5, 2.0, 5.0, 10.0] {
            let got = l1(&mut cx, a);
            assert!((got - a * base).abs() / (a * base) < 1e-9);
        }
    }
}
