//! Fusion and segmentation objectives. Every term is a graph function of
//! `[1,H,W]` images or masks and returns a scalar.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, Init, ParamStore, LEAKY_SLOPE, SOBEL_X, SOBEL_Y};
use crate::tensor::Var;

pub const BCE_CLIP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-12;
pub const GRAD_EPS: f64 = 1e-12;

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub grad: f64,
    pub int: f64,
    pub percep: f64,
    pub bce: f64,
    pub dice: f64,
    pub fusion_total: f64,
    pub seg_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Field-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.pixel += b.pixel;
            m.grad += b.grad;
            m.int += b.int;
            m.percep += b.percep;
            m.bce += b.bce;
            m.dice += b.dice;
            m.fusion_total += b.fusion_total;
            m.seg_total += b.seg_total;
            m.total += b.total;
        }
        m.pixel /= n;
        m.grad /= n;
        m.int /= n;
        m.percep /= n;
        m.bce /= n;
        m.dice /= n;
        m.fusion_total /= n;
        m.seg_total /= n;
        m.total /= n;
        m
    }

    /// Largest relative mismatch between the totals and their parts.
    pub fn reconciliation_error(&self) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
        let fusion = self.pixel + self.grad + self.int + self.percep;
        let seg = self.bce + self.dice;
        rel(self.fusion_total, fusion)
            .max(rel(self.seg_total, seg))
            .max(rel(self.total, self.fusion_total + self.seg_total))
    }
}

/// Stand-in for a pretrained feature extractor: four seeded 3×3 conv stages
/// with ×2 pooling ahead of stages two to four. Never trained.
#[derive(Clone, Debug)]
pub struct FrozenPerceptualNet {
    pub stages: Vec<Conv2d>,
}

pub const PERCEPTUAL_CHANNELS: [usize; 5] = [1, 8, 16, 32, 32];

impl FrozenPerceptualNet {
    pub fn new(store: &mut ParamStore, init: &mut Init) -> Self {
        let stages = PERCEPTUAL_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, p)| {
                Conv2d::new(
                    store,
                    init,
                    &format!("percep.stage{i}"),
                    ConvSpec::new(p[0], p[1], 3),
                    LEAKY_SLOPE,
                    true,
                )
            })
            .collect();
        Self { stages }
    }

    /// Feature map after each stage.
    pub fn features(&self, cx: &mut Ctx, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                x = cx.g.avg_pool2d(x, 2)?;
            }
            let y = conv.forward(cx, x)?;
            x = cx.g.leaky_relu(y, LEAKY_SLOPE);
            out.push(x);
        }
        Ok(out)
    }
}

fn same_shape(cx: &Ctx, op: &'static str, vars: &[Var]) -> Result<()> {
    let first = cx.g.shape(vars[0]);
    for &v in &vars[1..] {
        if cx.g.shape(v) != first {
            return shape_err(op, format!("{:?} vs {:?}", first, cx.g.shape(v)));
        }
    }
    Ok(())
}

fn l1_mean(cx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
    let d = cx.g.sub(a, b)?;
    let d = cx.g.abs(d);
    Ok(cx.g.mean(d))
}

/// Object regions chase the brighter source, background chases their mean.
pub fn pixel_loss(cx: &mut Ctx, i_f: Var, i_ir: Var, i_vis: Var, i_seg: Var) -> Result<Var> {
    same_shape(cx, "pixel_loss", &[i_f, i_ir, i_vis, i_seg])?;
    let mx = cx.g.max2(i_vis, i_ir)?;
    let sum = cx.g.add(i_vis, i_ir)?;
    let avg = cx.g.scale(sum, 0.5);
    let d_obj = cx.g.sub(i_f, mx)?;
    let d_obj = cx.g.mul(i_seg, d_obj)?;
    let d_obj = cx.g.abs(d_obj);
    let obj = cx.g.mean(d_obj);
    let neg = cx.g.neg(i_seg);
    let bg_w = cx.g.add_scalar(neg, 1.0);
    let d_bg = cx.g.sub(i_f, avg)?;
    let d_bg = cx.g.mul(bg_w, d_bg)?;
    let d_bg = cx.g.abs(d_bg);
    let bg = cx.g.mean(d_bg);
    cx.g.add(obj, bg)
}

/// `sqrt(gx² + gy² + ε)` with Sobel responses and replicated borders.
pub fn sobel_magnitude(cx: &mut Ctx, x: Var) -> Result<Var> {
    let gx = cx.g.filter3x3(x, SOBEL_X)?;
    let gy = cx.g.filter3x3(x, SOBEL_Y)?;
    let gx2 = cx.g.square(gx);
    let gy2 = cx.g.square(gy);
    let s = cx.g.add(gx2, gy2)?;
    let s = cx.g.add_scalar(s, GRAD_EPS);
    Ok(cx.g.sqrt(s))
}

pub fn grad_loss(cx: &mut Ctx, i_f: Var, i_ir: Var, i_vis: Var) -> Result<Var> {
    same_shape(cx, "grad_loss", &[i_f, i_ir, i_vis])?;
    let gf = sobel_magnitude(cx, i_f)?;
    let gi = sobel_magnitude(cx, i_ir)?;
    let gv = sobel_magnitude(cx, i_vis)?;
    let target = cx.g.max2(gv, gi)?;
    l1_mean(cx, gf, target)
}

pub fn int_loss(cx: &mut Ctx, i_f: Var, i_ir: Var, i_vis: Var) -> Result<Var> {
    same_shape(cx, "int_loss", &[i_f, i_ir, i_vis])?;
    let mx = cx.g.max2(i_ir, i_vis)?;
    l1_mean(cx, i_f, mx)
}

/// Sum over stages of mean squared feature distance to each source.
pub fn perceptual_loss(
    cx: &mut Ctx,
    net: &FrozenPerceptualNet,
    i_f: Var,
    i_ir: Var,
    i_vis: Var,
) -> Result<Var> {
    same_shape(cx, "perceptual_loss", &[i_f, i_ir, i_vis])?;
    let ff = net.features(cx, i_f)?;
    let mut acc: Option<Var> = None;
    for src in [i_ir, i_vis] {
        let fs = net.features(cx, src)?;
        for (a, b) in ff.iter().zip(&fs) {
            let d = cx.g.sub(*a, *b)?;
            let d = cx.g.square(d);
            let term = cx.g.mean(d);
            acc = Some(match acc {
                Some(s) => cx.g.add(s, term)?,
                None => term,
            });
        }
    }
    Ok(acc.expect("perceptual net has stages"))
}

pub fn bce_loss(cx: &mut Ctx, pred: Var, target: Var) -> Result<Var> {
    same_shape(cx, "bce_loss", &[pred, target])?;
    let p = cx.g.clamp(pred, BCE_CLIP, 1.0 - BCE_CLIP);
    let lp = cx.g.log(p);
    let np = cx.g.neg(p);
    let q = cx.g.add_scalar(np, 1.0);
    let lq = cx.g.log(q);
    let pos = cx.g.mul(target, lp)?;
    let ny = cx.g.neg(target);
    let omy = cx.g.add_scalar(ny, 1.0);
    let negt = cx.g.mul(omy, lq)?;
    let s = cx.g.add(pos, negt)?;
    let m = cx.g.mean(s);
    Ok(cx.g.neg(m))
}

/// `1 − 2Σ(ŷy) / (Σŷ² + Σy² + ε)`.
pub fn dice_loss(cx: &mut Ctx, pred: Var, target: Var) -> Result<Var> {
    same_shape(cx, "dice_loss", &[pred, target])?;
    let py = cx.g.mul(pred, target)?;
    let inter = cx.g.sum(py);
    let num = cx.g.scale(inter, 2.0);
    let p2 = cx.g.square(pred);
    let p2 = cx.g.sum(p2);
    let y2 = cx.g.square(target);
    let y2 = cx.g.sum(y2);
    let den = cx.g.add(p2, y2)?;
    let den = cx.g.add_scalar(den, DICE_EPS);
    let ratio = cx.g.div(num, den)?;
    let neg = cx.g.neg(ratio);
    Ok(cx.g.add_scalar(neg, 1.0))
}

/// Graph nodes of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pixel: Var,
    pub grad: Var,
    pub int: Var,
    pub percep: Var,
    pub bce: Option<Var>,
    pub dice: Option<Var>,
    pub fusion: Var,
    pub seg: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, cx: &Ctx) -> LossBreakdown {
        let v = |x: Var| cx.g.value(x).item();
        let o = |x: Option<Var>| x.map_or(0.0, v);
        LossBreakdown {
            pixel: v(self.pixel),
            grad: v(self.grad),
            int: v(self.int),
            percep: v(self.percep),
            bce: o(self.bce),
            dice: o(self.dice),
            fusion_total: v(self.fusion),
            seg_total: o(self.seg),
            total: v(self.total),
        }
    }
}

pub struct LossInputs<'a> {
    pub i_f: Var,
    pub i_ir: Var,
    pub i_vis_y: Var,
    pub i_seg: Var,
    /// Branch masks that are supervised; empty when segmentation is off.
    pub seg_preds: &'a [Var],
    pub seg_target: Var,
}

/// Unit-weight sum `((pixel + grad) + int) + percep`, plus `bce + dice`
/// averaged over the supervised branches.
pub fn total_loss(cx: &mut Ctx, net: &FrozenPerceptualNet, inp: &LossInputs) -> Result<LossTerms> {
    let pixel = pixel_loss(cx, inp.i_f, inp.i_ir, inp.i_vis_y, inp.i_seg)?;
    let grad = grad_loss(cx, inp.i_f, inp.i_ir, inp.i_vis_y)?;
    let int = int_loss(cx, inp.i_f, inp.i_ir, inp.i_vis_y)?;
    let percep = perceptual_loss(cx, net, inp.i_f, inp.i_ir, inp.i_vis_y)?;
    let f = cx.g.add(pixel, grad)?;
    let f = cx.g.add(f, int)?;
    let fusion = cx.g.add(f, percep)?;

    if inp.seg_preds.is_empty() {
        return Ok(LossTerms {
            pixel,
            grad,
            int,
            percep,
            bce: None,
            dice: None,
            fusion,
            seg: None,
            total: fusion,
        });
    }
    let mut bces = Vec::new();
    let mut dices = Vec::new();
    for &m in inp.seg_preds {
        bces.push(bce_loss(cx, m, inp.seg_target)?);
        dices.push(dice_loss(cx, m, inp.seg_target)?);
    }
    let bce = mean_of(cx, &bces)?;
    let dice = mean_of(cx, &dices)?;
    let seg = cx.g.add(bce, dice)?;
    let total = cx.g.add(fusion, seg)?;
    Ok(LossTerms {
        pixel,
        grad,
        int,
        percep,
        bce: Some(bce),
        dice: Some(dice),
        fusion,
        seg: Some(seg),
        total,
    })
}

fn mean_of(cx: &mut Ctx, xs: &[Var]) -> Result<Var> {
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let mut s = xs[0];
    for &x in &xs[1..] {
        s = cx.g.add(s, x)?;
    }
    Ok(cx.g.scale(s, 1.0 / xs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    fn eval(f: impl FnOnce(&mut Ctx, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> f64 {
        let store = ParamStore::new();
        let mut cx = Ctx::new(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| cx.g.constant(t.clone())).collect();
        let out = f(&mut cx, &vars).unwrap();
        cx.g.value(out).item()
    }

    fn net() -> (ParamStore, FrozenPerceptualNet) {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(2), true);
        let n = FrozenPerceptualNet::new(&mut store, &mut init);
        (store, n)
    }

    const S: [usize; 3] = [1, 8, 8];

    #[test]
    fn pixel_examples() {
        let ir = random(&S, 1);
        let vis = random(&S, 2);
        let mut seg = Tensor::zeros(&S);
        seg.data_mut()[..20].fill(1.0);
        let target = Tensor::from_fn(&S, |i| {
            if seg.data()[i] == 1.0 {
                ir.data()[i].max(vis.data()[i])
            } else {
                0.5 * (ir.data()[i] + vis.data()[i])
            }
        });
        let v = eval(
            |cx, v| pixel_loss(cx, v[0], v[1], v[2], v[3]),
            &[target, ir.clone(), vis, seg],
        );
        assert!(v.abs() < 1e-15);

        let same = eval(
            |cx, v| pixel_loss(cx, v[0], v[0], v[0], v[1]),
            &[ir, Tensor::ones(&S)],
        );
        assert_eq!(same, 0.0);

        let v = eval(
            |cx, v| pixel_loss(cx, v[0], v[1], v[0], v[1]),
            &[Tensor::ones(&S), Tensor::zeros(&S)],
        );
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn grad_examples() {
        let c = |x: f64| Tensor::full(&S, x);
        let v = eval(
            |cx, v| grad_loss(cx, v[0], v[1], v[2]),
            &[c(0.1), c(0.5), c(0.9)],
        );
        assert_eq!(v, 0.0);
        let ir = random(&S, 3);
        let v = eval(|cx, v| grad_loss(cx, v[0], v[0], v[1]), &[ir, c(0.4)]);
        assert_eq!(v, 0.0);

        // Vertical step in ir only against a flat fused image.
        let step = Tensor::from_fn(&S, |i| if i % 8 >= 4 { 1.0 } else { 0.0 });
        let v = eval(
            |cx, v| grad_loss(cx, v[0], v[1], v[0]),
            &[c(0.3), step.clone()],
        );
        // Independent oracle: replicate-padded Sobel magnitude of the step.
        let px = |r: isize, col: isize| step.data()[(r.clamp(0, 7) * 8 + col.clamp(0, 7)) as usize];
        let mut want = 0.0;
        for r in 0..8isize {
            for col in 0..8isize {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for dr in -1..=1isize {
                    for dc in -1..=1isize {
                        let k = ((dr + 1) * 3 + dc + 1) as usize;
                        gx += SOBEL_X[k] * px(r + dr, col + dc);
                        gy += SOBEL_Y[k] * px(r + dr, col + dc);
                    }
                }
                let mag = (gx * gx + gy * gy + GRAD_EPS).sqrt();
                want += (GRAD_EPS.sqrt() - mag).abs();
            }
        }
        want /= 64.0;
        assert!(v > 0.0);
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn int_examples() {
        let ir = random(&S, 4);
        let vis = random(&S, 5);
        let mx = Tensor::from_fn(&S, |i| ir.data()[i].max(vis.data()[i]));
        assert_eq!(
            eval(
                |cx, v| int_loss(cx, v[0], v[1], v[2]),
                &[mx, ir.clone(), vis.clone()]
            ),
            0.0
        );
        let v = eval(
            |cx, v| int_loss(cx, v[0], v[1], v[0]),
            &[Tensor::zeros(&S), Tensor::ones(&S)],
        );
        assert_eq!(v, 1.0);
        let f = random(&S, 6);
        let want: f64 = (0..64)
            .map(|i| (f.data()[i] - ir.data()[i].max(vis.data()[i])).abs())
            .sum::<f64>()
            / 64.0;
        let got = eval(|cx, v| int_loss(cx, v[0], v[1], v[2]), &[f, ir, vis]);
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn perceptual_examples() {
        let (store, net) = net();
        let run = |f: &Tensor, a: &Tensor, b: &Tensor| {
            let mut cx = Ctx::new(&store);
            let (f, a, b) = (
                cx.g.constant(f.clone()),
                cx.g.constant(a.clone()),
                cx.g.constant(b.clone()),
            );
            let l = perceptual_loss(&mut cx, &net, f, a, b).unwrap();
            cx.g.value(l).item()
        };
        let x = random(&S, 7);
        assert_eq!(run(&x, &x, &x), 0.0);
        let (f, a, b) = (random(&S, 8), random(&S, 9), random(&S, 10));
        let v = run(&f, &a, &b);
        assert!(v > 0.0);
        assert!((v - run(&f, &b, &a)).abs() < 1e-14);

        // Term-by-term: each stage's mean squared difference, composed by hand.
        let mut cx = Ctx::new(&store);
        let (fv, av, bv) = (cx.g.constant(f), cx.g.constant(a), cx.g.constant(b));
        let ff = net.features(&mut cx, fv).unwrap();
        let fa = net.features(&mut cx, av).unwrap();
        let fb = net.features(&mut cx, bv).unwrap();
        let mut want = 0.0;
        for other in [&fa, &fb] {
            for (x, y) in ff.iter().zip(other.iter()) {
                let (x, y) = (cx.g.value(*x).data(), cx.g.value(*y).data());
                want += x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
            }
        }
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let y = Tensor::from_fn(&S, |i| (i % 3 == 0) as u8 as f64);
        let v = eval(|cx, v| bce_loss(cx, v[0], v[0]), &[y.clone()]);
        assert!(v <= 1e-6);
        let v = eval(
            |cx, v| bce_loss(cx, v[0], v[1]),
            &[Tensor::full(&S, 0.5), y.clone()],
        );
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let p = random(&[1, 16, 16], 11);
        let t = Tensor::from_fn(&[1, 16, 16], |i| (i % 5 < 2) as u8 as f64);
        let mut want = 0.0;
        for i in 0..256 {
            let q = p.data()[i].clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            let yi = t.data()[i];
            want -= yi * q.ln() + (1.0 - yi) * (1.0 - q).ln();
        }
        want /= 256.0;
        let got = eval(|cx, v| bce_loss(cx, v[0], v[1]), &[p, t]);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let y = Tensor::from_fn(&S, |i| (i % 3 == 0) as u8 as f64);
        let v = eval(|cx, v| dice_loss(cx, v[0], v[0]), &[y.clone()]);
        assert!(v.abs() < 1e-12);
        let other = y.map(|v| 1.0 - v);
        assert_eq!(eval(|cx, v| dice_loss(cx, v[0], v[1]), &[y, other]), 1.0);
        let v = eval(
            |cx, v| dice_loss(cx, v[0], v[1]),
            &[Tensor::full(&S, 0.5), Tensor::ones(&S)],
        );
        assert!((v - 0.2).abs() < 1e-12);
    }

    #[test]
    fn breakdown_reconciles_and_seg_drop_is_exact() {
        let (store, net) = net();
        let mut cx = Ctx::new(&store);
        let vars: Vec<Var> = (0..5).map(|s| cx.g.constant(random(&S, 20 + s))).collect();
        let target =
            cx.g.constant(Tensor::from_fn(&S, |i| (i < 30) as u8 as f64));
        let preds = [vars[3], vars[4]];
        let with = total_loss(
            &mut cx,
            &net,
            &LossInputs {
                i_f: vars[0],
                i_ir: vars[1],
                i_vis_y: vars[2],
                i_seg: vars[3],
                seg_preds: &preds,
                seg_target: target,
            },
        )
        .unwrap();
        let b = with.breakdown(&cx);
        assert_eq!(b.reconciliation_error(), 0.0);
        for t in [b.pixel, b.grad, b.int, b.percep, b.bce, b.dice] {
            assert!(t >= 0.0);
        }
        let without = total_loss(
            &mut cx,
            &net,
            &LossInputs {
                seg_preds: &[],
                i_f: vars[0],
                i_ir: vars[1],
                i_vis_y: vars[2],
                i_seg: vars[3],
                seg_target: target,
            },
        )
        .unwrap()
        .breakdown(&cx);
        assert_eq!(without.bce, 0.0);
        assert_eq!(without.dice, 0.0);
        assert_eq!(without.total, b.fusion_total);
    }

    #[test]
    fn all_zero_components_total_zero() {
        let (store, net) = net();
        let mut cx = Ctx::new(&store);
        let z = cx.g.constant(Tensor::zeros(&S));
        let t = total_loss(
            &mut cx,
            &net,
            &LossInputs {
                i_f: z,
                i_ir: z,
                i_vis_y: z,
                i_seg: z,
                seg_preds: &[],
                seg_target: z,
            },
        )
        .unwrap();
        assert_eq!(t.breakdown(&cx).total, 0.0);
    }
}
