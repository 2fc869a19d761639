//! Registry of finite-difference gradient checks: every graph primitive, the
//! full prompt pipeline and each loss term.
//!
//! Non-scalar outputs are reduced with a fixed random weighting so that
//! permuted or transposed gradients cannot cancel out. Inputs to kinked
//! functions are drawn away from their kinks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{
    bce_loss, dice_loss, grad_loss, int_loss, perceptual_loss, pixel_loss, total_loss, LossInputs,
};
use crate::model::{Ablation, CtrlFuse, ModelConfig};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::{
    finite_difference_at, grad_check, grad_check_at, GradCheckReport, Graph, Tensor, Var,
};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// For L1 terms whose kinks may sit within `EPS` of a sample.
pub const TOL_KINKED: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 10;
/// Step for parameters whose influence on the output is weak enough that
/// `EPS` sits at the f64 rounding floor.
pub const EPS_WEAK: f64 = 1e-3;
/// Between the two, where `EPS_WEAK` already straddles activation kinks.
pub const EPS_MID: f64 = 1e-4;

const MAX_JITTERS: usize = 8;
const JITTER: f64 = 1e-3;

/// Coordinates sampled per composite check.
const COMPOSITE_COORDS: usize = 12;
const SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Primitive,
    Composite,
    Loss,
}

#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
    pub tol: f64,
    run: fn(u64) -> Result<GradCheckReport>,
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub kind: CaseKind,
    pub tol: f64,
    pub seeds: u64,
    pub worst_rel_err: f64,
    pub worst_seed: u64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tol
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Magnitudes in `[min_abs, 1)` with random sign.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(min_abs..1.0);
        if r.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Σ w ⊙ out with fixed weights in `[-1, 1)`.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xA5A5);
    let w = uniform(&mut r, g.shape(out), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn full(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(f, x, EPS)
}

/// Finite differences only measure a derivative where the function is smooth
/// across the stencil. When halving the step moves the estimate, a kink lies
/// within `eps` of the point, so the point is nudged and the check retried.
fn smooth_check<F>(
    f: F,
    x: &Tensor,
    eps: f64,
    coords: &[usize],
    tol: f64,
    r: &mut ChaCha8Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut point = x.clone();
    for _ in 0..MAX_JITTERS {
        let coarse = finite_difference_at(&f, &point, eps, coords)?;
        let fine = finite_difference_at(&f, &point, eps / 2.0, coords)?;
        let smooth = coarse
            .iter()
            .zip(&fine)
            .all(|(a, b)| (a - b).abs() <= 0.1 * tol * a.abs().max(b.abs()) + 1e-9);
        if smooth {
            break;
        }
        let base = point.clone();
        point = Tensor::from_fn(base.shape(), |i| {
            base.data()[i] + r.gen_range(-JITTER..JITTER)
        });
    }
    grad_check_at(f, &point, eps, coords)
}

fn all_coords(x: &Tensor) -> Vec<usize> {
    (0..x.numel()).collect()
}

fn sample_coords(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(r, n, k.min(n)).into_vec()
}

macro_rules! unary {
    ($name:literal, $gen:expr, |$g:ident, $x:ident| $body:expr) => {
        Case {
            name: $name,
            kind: CaseKind::Primitive,
            tol: TOL,
            run: |seed| {
                let mut r = rng(seed);
                #[allow(clippy::redundant_closure_call)]
                let x: Tensor = ($gen)(&mut r);
                full(&x, |$g, $x| {
                    let out = $body;
                    weighted_sum($g, out, seed)
                })
            },
        }
    };
}

fn primitives() -> Vec<Case> {
    vec![
        unary!("add", |r: &mut ChaCha8Rng| uniform(r, &[3, 4], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
            g.add(c, x)?
        }),
        unary!("add.broadcast_trailing", |r: &mut ChaCha8Rng| uniform(r, &[3, 1], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
            g.add(c, x)?
        }),
        unary!("sub", |r: &mut ChaCha8Rng| uniform(r, &[3, 4], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
            g.sub(c, x)?
        }),
        unary!("sub.broadcast_scalar", |r: &mut ChaCha8Rng| uniform(r, &[1], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.2));
            g.sub(c, x)?
        }),
        unary!("mul", |r: &mut ChaCha8Rng| uniform(r, &[3, 4], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 4], |i| 0.5 - i as f64 * 0.1));
            let a = g.mul(x, c)?;
            g.mul(a, x)?
        }),
        unary!("mul.broadcast_trailing", |r: &mut ChaCha8Rng| uniform(r, &[3, 1, 1], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 2, 4], |i| 0.5 - i as f64 * 0.05));
            g.mul(c, x)?
        }),
        unary!("div.numerator", |r: &mut ChaCha8Rng| uniform(r, &[5], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[5], |i| 0.7 + i as f64 * 0.3));
            g.div(x, c)?
        }),
        unary!("div.denominator", |r: &mut ChaCha8Rng| uniform(r, &[5], 0.5, 1.5), |g, x| {
            let c = g.constant(Tensor::from_fn(&[5], |i| i as f64 * 0.3 - 0.6));
            g.div(c, x)?
        }),
        unary!("max2", |r: &mut ChaCha8Rng| away_from_zero(r, &[6], 0.05), |g, x| {
            let c = g.constant(Tensor::zeros(&[6]));
            g.max2(x, c)?
        }),
        unary!("scale", |r: &mut ChaCha8Rng| uniform(r, &[4], -1.0, 1.0), |g, x| g.scale(x, -1.7)),
        unary!("add_scalar", |r: &mut ChaCha8Rng| uniform(r, &[4], -1.0, 1.0), |g, x| {
            let y = g.add_scalar(x, 0.3);
            g.square(y)
        }),
        unary!("neg", |r: &mut ChaCha8Rng| uniform(r, &[4], -1.0, 1.0), |g, x| g.neg(x)),
        unary!("leaky_relu", |r: &mut ChaCha8Rng| away_from_zero(r, &[8], 0.01), |g, x| {
            g.leaky_relu(x, 0.2)
        }),
        unary!("sigmoid", |r: &mut ChaCha8Rng| uniform(r, &[6], -4.0, 4.0), |g, x| g.sigmoid(x)),
        unary!("tanh", |r: &mut ChaCha8Rng| uniform(r, &[6], -3.0, 3.0), |g, x| g.tanh(x)),
        unary!("abs", |r: &mut ChaCha8Rng| away_from_zero(r, &[8], 0.01), |g, x| g.abs(x)),
        unary!("sqrt", |r: &mut ChaCha8Rng| uniform(r, &[6], 0.1, 2.0), |g, x| g.sqrt(x)),
        unary!("log", |r: &mut ChaCha8Rng| uniform(r, &[6], 0.1, 2.0), |g, x| g.log(x)),
        unary!("square", |r: &mut ChaCha8Rng| uniform(r, &[6], -2.0, 2.0), |g, x| g.square(x)),
        unary!(
            "clamp",
            |r: &mut ChaCha8Rng| Tensor::from_fn(&[8], |i| {
                let m: f64 = r.gen_range(0.05..0.4);
                [-0.5 - m, -0.5 + m, 0.5 - m, 0.5 + m][i % 4]
            }),
            |g, x| g.clamp(x, -0.5, 0.5)
        ),
        unary!("sum", |r: &mut ChaCha8Rng| uniform(r, &[3, 2], -1.0, 1.0), |g, x| {
            let s = g.sum(x);
            g.square(s)
        }),
        unary!("mean", |r: &mut ChaCha8Rng| uniform(r, &[3, 2], -1.0, 1.0), |g, x| {
            let s = g.mean(x);
            g.square(s)
        }),
        unary!("reshape", |r: &mut ChaCha8Rng| uniform(r, &[2, 6], -1.0, 1.0), |g, x| {
            g.reshape(x, &[3, 4])?
        }),
        unary!("expand", |r: &mut ChaCha8Rng| uniform(r, &[1, 3, 1], -1.0, 1.0), |g, x| {
            g.expand(x, &[2, 3, 4])?
        }),
        unary!("matmul.left", |r: &mut ChaCha8Rng| uniform(r, &[5, 4], -1.0, 1.0), |g, x| {
            let b = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin()));
            g.matmul(x, b)?
        }),
        unary!("matmul.right", |r: &mut ChaCha8Rng| uniform(r, &[4, 3], -1.0, 1.0), |g, x| {
            let a = g.constant(Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.53).cos()));
            g.matmul(a, x)?
        }),
        unary!("transpose", |r: &mut ChaCha8Rng| uniform(r, &[3, 5], -1.0, 1.0), |g, x| {
            g.transpose(x)?
        }),
        unary!("linear.input", |r: &mut ChaCha8Rng| uniform(r, &[4, 3], -1.0, 1.0), |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.7).sin()));
            let b = g.constant(Tensor::from_fn(&[2], |i| i as f64 * 0.5));
            g.linear(x, w, Some(b))?
        }),
        unary!("linear.weight", |r: &mut ChaCha8Rng| uniform(r, &[3, 2], -1.0, 1.0), |g, x| {
            let a = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos()));
            g.linear(a, x, None)?
        }),
        unary!("linear.bias", |r: &mut ChaCha8Rng| uniform(r, &[2], -1.0, 1.0), |g, x| {
            let a = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos()));
            let w = g.constant(Tensor::from_fn(&[3, 2], |i| (i as f64 * 0.7).sin()));
            let y = g.linear(a, w, Some(x))?;
            g.square(y)
        }),
        unary!("conv2d.input", |r: &mut ChaCha8Rng| uniform(r, &[4, 8, 8], -1.0, 1.0), |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 4, 3, 3], |i| (i as f64 * 0.11).sin()));
            let b = g.constant(Tensor::from_fn(&[3], |i| i as f64 * 0.1));
            g.conv2d(x, w, Some(b), 1, 1)?
        }),
        unary!("conv2d.weight", |r: &mut ChaCha8Rng| uniform(r, &[3, 4, 3, 3], -1.0, 1.0), |g, x| {
            let input = g.constant(Tensor::from_fn(&[4, 8, 8], |i| (i as f64 * 0.07).cos()));
            g.conv2d(input, x, None, 1, 1)?
        }),
        unary!("conv2d.bias", |r: &mut ChaCha8Rng| uniform(r, &[3], -1.0, 1.0), |g, x| {
            let input = g.constant(Tensor::from_fn(&[2, 5, 5], |i| (i as f64 * 0.07).cos()));
            let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.11).sin()));
            let y = g.conv2d(input, w, Some(x), 1, 1)?;
            g.square(y)
        }),
        unary!("conv2d.stride2", |r: &mut ChaCha8Rng| uniform(r, &[2, 9, 7], -1.0, 1.0), |g, x| {
            let w = g.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| (i as f64 * 0.13).sin()));
            g.conv2d(x, w, None, 2, 1)?
        }),
        unary!("conv2d.pointwise", |r: &mut ChaCha8Rng| uniform(r, &[3, 4, 4], -1.0, 1.0), |g, x| {
            let w = g.constant(Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 * 0.3 - 0.4));
            g.conv2d(x, w, None, 1, 0)?
        }),
        unary!("filter3x3", |r: &mut ChaCha8Rng| uniform(r, &[2, 6, 5], -1.0, 1.0), |g, x| {
            g.filter3x3(x, crate::nn::SOBEL_X)?
        }),
        unary!("avg_pool2d.ragged", |r: &mut ChaCha8Rng| uniform(r, &[2, 5, 7], -1.0, 1.0), |g, x| {
            g.avg_pool2d(x, 2)?
        }),
        unary!("global_avg_pool", |r: &mut ChaCha8Rng| uniform(r, &[3, 4, 5], -1.0, 1.0), |g, x| {
            g.global_avg_pool(x)?
        }),
        unary!("downsample_avg", |r: &mut ChaCha8Rng| uniform(r, &[2, 4, 6], -1.0, 1.0), |g, x| {
            g.downsample_avg(x)?
        }),
        unary!("upsample_nearest", |r: &mut ChaCha8Rng| uniform(r, &[2, 3, 2], -1.0, 1.0), |g, x| {
            g.upsample_nearest(x, 3)?
        }),
        unary!("flatten_spatial", |r: &mut ChaCha8Rng| uniform(r, &[3, 2, 4], -1.0, 1.0), |g, x| {
            g.flatten_spatial(x)?
        }),
        unary!("view_spatial", |r: &mut ChaCha8Rng| uniform(r, &[8, 3], -1.0, 1.0), |g, x| {
            g.view_spatial(x, 2, 4)?
        }),
        unary!("concat", |r: &mut ChaCha8Rng| uniform(r, &[2, 3, 3], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[1, 3, 3], |i| i as f64));
            let y = g.concat(&[c, x, c])?;
            g.square(y)
        }),
        unary!("slice", |r: &mut ChaCha8Rng| uniform(r, &[5, 2], -1.0, 1.0), |g, x| g.slice(x, 1, 3)?),
        unary!("concat_cols", |r: &mut ChaCha8Rng| uniform(r, &[3, 2], -1.0, 1.0), |g, x| {
            let c = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
            let y = g.concat_cols(&[c, x])?;
            g.square(y)
        }),
        unary!("slice_cols", |r: &mut ChaCha8Rng| uniform(r, &[3, 6], -1.0, 1.0), |g, x| {
            g.slice_cols(x, 2, 3)?
        }),
        unary!("attention.query", |r: &mut ChaCha8Rng| uniform(r, &[4, 6], -1.0, 1.0), |g, x| {
            let k = g.constant(Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.3).sin()));
            let v = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.2).cos()));
            g.attention(x, k, v)?
        }),
        unary!("attention.key", |r: &mut ChaCha8Rng| uniform(r, &[5, 6], -1.0, 1.0), |g, x| {
            let q = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.3).sin()));
            let v = g.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.2).cos()));
            g.attention(q, x, v)?
        }),
        unary!("attention.value", |r: &mut ChaCha8Rng| uniform(r, &[5, 3], -1.0, 1.0), |g, x| {
            let q = g.constant(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.3).sin()));
            let k = g.constant(Tensor::from_fn(&[5, 6], |i| (i as f64 * 0.2).cos()));
            g.attention(q, k, x)?
        }),
    ]
}

/// Runs `body` on a [`Ctx`] whose graph is `g`, returning the graph after.
fn with_ctx<T>(
    g: &mut Graph,
    store: &ParamStore,
    bind: Option<(ParamId, Var)>,
    body: impl FnOnce(&mut Ctx) -> Result<T>,
) -> Result<T> {
    let mut cx = Ctx::new(store);
    cx.g = std::mem::take(g);
    if let Some((id, v)) = bind {
        cx.bind(id, v);
    }
    let out = body(&mut cx);
    *g = std::mem::take(&mut cx.g);
    out
}

struct Scene {
    ir: Tensor,
    vis: Tensor,
    mask: Tensor,
}

/// Smooth random scene with a rectangular prompt.
fn scene(r: &mut ChaCha8Rng) -> Scene {
    let n = SIDE;
    let (fx, fy, ph): (f64, f64, f64) = (r.gen_range(0.2..0.6), r.gen_range(0.2..0.6), r.gen());
    let ir = Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        0.5 + 0.3 * (fx * x + ph).sin() * (fy * y).cos()
    });
    let vis = Tensor::from_fn(&[3, n, n], |i| {
        let c = (i / (n * n)) as f64;
        let p = i % (n * n);
        let (y, x) = ((p / n) as f64, (p % n) as f64);
        0.5 + 0.25 * (fy * x - 0.3 * c).cos() * (fx * y + ph).sin()
    });
    let (r0, c0) = (r.gen_range(2..6), r.gen_range(2..6));
    let (h, w) = (r.gen_range(4..8), r.gen_range(4..8));
    let mask = Tensor::from_fn(&[1, n, n], |i| {
        let (y, x) = (i / n, i % n);
        ((r0..r0 + h).contains(&y) && (c0..c0 + w).contains(&x)) as u8 as f64
    });
    Scene { ir, vis, mask }
}

fn model(seed: u64) -> Result<CtrlFuse> {
    CtrlFuse::new(ModelConfig::desk(seed))
}

fn first_trainable(store: &ParamStore, prefix: &str) -> Result<ParamId> {
    store
        .trainable_ids()
        .find(|&id| store.entry(id).name.starts_with(prefix))
        .ok_or_else(|| Error::Contract(format!("no trainable parameter under {prefix}")))
}

/// Weighted sum of the fused image with the input under test bound to
/// either an image (`param = None`) or a named parameter.
fn pipeline_case(seed: u64, wrt: Option<&str>, eps: f64) -> Result<GradCheckReport> {
    pipeline_case_on(seed, wrt, eps, Pick::Random)
}

/// Which coordinates of the input a composite case checks.
#[derive(Clone, Copy, PartialEq)]
enum Pick {
    Random,
    /// The largest analytic gradients. For parameters whose typical
    /// derivative lies below the finite-difference noise floor.
    Strongest,
}

fn strongest_coords<F>(f: &F, x: &Tensor, k: usize) -> Result<Vec<usize>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let grad = grads
        .get(xv)
        .ok_or_else(|| Error::Contract("input does not reach the output".into()))?;
    let mut idx: Vec<usize> = (0..x.numel()).collect();
    idx.sort_by(|&a, &b| grad.data()[b].abs().total_cmp(&grad.data()[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn pipeline_case_on(seed: u64, wrt: Option<&str>, eps: f64, pick: Pick) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = model(seed)?;
    let s = scene(&mut r);
    let param = wrt.map(|p| first_trainable(&m.store, p)).transpose()?;
    let x = match param {
        Some(id) => m.store.get(id).clone(),
        None => s.ir.clone(),
    };
    let f = |g: &mut Graph, xv: Var| {
        with_ctx(g, &m.store, param.map(|id| (id, xv)), |cx| {
            let ir = match param {
                Some(_) => cx.g.constant(s.ir.clone()),
                None => xv,
            };
            let vis = cx.g.constant(s.vis.clone());
            let mask = cx.g.constant(s.mask.clone());
            let out = m.forward(cx, ir, vis, mask, 1.0, Ablation::None)?;
            weighted_sum(&mut cx.g, out.i_f, seed)
        })
    };
    let coords = match pick {
        Pick::Random => sample_coords(&mut r, x.numel(), COMPOSITE_COORDS),
        Pick::Strongest => strongest_coords(&f, &x, COMPOSITE_COORDS)?,
    };
    smooth_check(f, &x, eps, &coords, TOL, &mut r)
}

fn mask_decode_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = model(seed)?;
    let s = scene(&mut r);
    let n = m.config.num_queries;
    let tokens = uniform(&mut r, &[n, m.backend.dim()], -1.0, 1.0);
    let coords = sample_coords(&mut r, tokens.numel(), COMPOSITE_COORDS * 2);
    let f = |g: &mut Graph, t: Var| {
        with_ctx(g, &m.store, None, |cx| {
            let img = cx.g.constant(s.ir.clone());
            let grid = m.backend.encode(cx, img)?;
            let pred = m.backend.mask_decode(cx, grid, t)?;
            weighted_sum(&mut cx.g, pred, seed)
        })
    };
    smooth_check(f, &tokens, EPS, &coords, TOL, &mut r)
}

/// Values at least `gap` away from every entry of `kinks`.
fn jittered(r: &mut ChaCha8Rng, kinks: &[&Tensor], gap: f64) -> Tensor {
    let n = kinks[0].numel();
    Tensor::from_fn(kinks[0].shape(), |i| loop {
        let v: f64 = r.gen_range(0.0..1.0);
        if kinks.iter().all(|k| (v - k.data()[i]).abs() > gap) {
            break v;
        }
        debug_assert!(i < n);
    })
}

struct LossScene {
    ir: Tensor,
    vis_y: Tensor,
    seg: Tensor,
    target: Tensor,
}

fn loss_scene(r: &mut ChaCha8Rng) -> LossScene {
    let shape = [1, SIDE, SIDE];
    let target = Tensor::from_fn(&shape, |_| (r.gen::<f64>() < 0.3) as u8 as f64);
    LossScene {
        ir: uniform(r, &shape, 0.0, 1.0),
        vis_y: uniform(r, &shape, 0.0, 1.0),
        seg: uniform(r, &shape, 0.0, 1.0),
        target,
    }
}

fn max_avg(s: &LossScene) -> (Tensor, Tensor) {
    let d = |f: fn(f64, f64) -> f64| {
        Tensor::from_fn(s.ir.shape(), |i| f(s.ir.data()[i], s.vis_y.data()[i]))
    };
    (d(f64::max), d(|a, b| 0.5 * (a + b)))
}

type LossFn = fn(&mut Ctx, &CtrlFuse, Var, &LossScene) -> Result<Var>;

fn loss_case(seed: u64, jitter: bool, tol: f64, loss: LossFn) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = model(seed)?;
    let s = loss_scene(&mut r);
    let x = if jitter {
        let (mx, avg) = max_avg(&s);
        jittered(&mut r, &[&mx, &avg], 1e-3)
    } else {
        uniform(&mut r, s.ir.shape(), 0.0, 1.0)
    };
    let f = |g: &mut Graph, xv: Var| with_ctx(g, &m.store, None, |cx| loss(cx, &m, xv, &s));
    smooth_check(f, &x, EPS, &all_coords(&x), tol, &mut r)
}

fn pred_case(seed: u64, loss: LossFn) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let m = model(seed)?;
    let s = loss_scene(&mut r);
    let x = uniform(&mut r, s.ir.shape(), 0.05, 0.95);
    let f = |g: &mut Graph, xv: Var| with_ctx(g, &m.store, None, |cx| loss(cx, &m, xv, &s));
    smooth_check(f, &x, EPS, &all_coords(&x), TOL, &mut r)
}

fn consts(cx: &mut Ctx, s: &LossScene) -> (Var, Var, Var, Var) {
    (
        cx.g.constant(s.ir.clone()),
        cx.g.constant(s.vis_y.clone()),
        cx.g.constant(s.seg.clone()),
        cx.g.constant(s.target.clone()),
    )
}

fn composites() -> Vec<Case> {
    let c = |name, kind, tol, run| Case {
        name,
        kind,
        tol,
        run,
    };
    use CaseKind::{Composite, Loss};
    vec![
        c("pipeline.ir_image", Composite, TOL, |s| pipeline_case(s, None, EPS)),
        c("pipeline.ir_queries", Composite, TOL, |s| {
            pipeline_case(s, Some("rpe_ir.queries"), EPS_WEAK)
        }),
        c("pipeline.vis_prompt_encoder", Composite, TOL, |s| {
            pipeline_case(s, Some("rpe_vis.supp"), EPS_MID)
        }),
        c("pipeline.psfm_attention", Composite, TOL, |s| {
            pipeline_case_on(s, Some("psfm_ir.attn"), EPS_WEAK, Pick::Strongest)
        }),
        c("pipeline.ir_encoder", Composite, TOL, |s| pipeline_case(s, Some("enc_ir"), EPS)),
        c("pipeline.decoder", Composite, TOL, |s| pipeline_case(s, Some("dec"), EPS)),
        c("backend.mask_decode", Composite, TOL, mask_decode_case),
        c("loss.pixel", Loss, TOL_KINKED, |s| {
            loss_case(s, true, TOL_KINKED, |cx, _, x, sc| {
                let (ir, vis, seg, _) = consts(cx, sc);
                pixel_loss(cx, x, ir, vis, seg)
            })
        }),
        c("loss.grad", Loss, TOL_KINKED, |s| {
            loss_case(s, false, TOL_KINKED, |cx, _, x, sc| {
                let (ir, vis, _, _) = consts(cx, sc);
                grad_loss(cx, x, ir, vis)
            })
        }),
        c("loss.int", Loss, TOL_KINKED, |s| {
            loss_case(s, true, TOL_KINKED, |cx, _, x, sc| {
                let (ir, vis, _, _) = consts(cx, sc);
                int_loss(cx, x, ir, vis)
            })
        }),
        c("loss.percep", Loss, TOL, |s| {
            loss_case(s, false, TOL, |cx, m, x, sc| {
                let (ir, vis, _, _) = consts(cx, sc);
                perceptual_loss(cx, &m.perceptual, x, ir, vis)
            })
        }),
        c("loss.bce", Loss, TOL, |s| {
            pred_case(s, |cx, _, x, sc| {
                let (_, _, _, t) = consts(cx, sc);
                bce_loss(cx, x, t)
            })
        }),
        c("loss.dice", Loss, TOL, |s| {
            pred_case(s, |cx, _, x, sc| {
                let (_, _, _, t) = consts(cx, sc);
                dice_loss(cx, x, t)
            })
        }),
        c("loss.total", Loss, TOL_KINKED, |s| {
            loss_case(s, true, TOL_KINKED, |cx, m, x, sc| {
                let (ir, vis, seg, t) = consts(cx, sc);
                let pred = cx.g.constant(sc.seg.map(|v| v.clamp(0.05, 0.95)));
                let terms = total_loss(
                    cx,
                    &m.perceptual,
                    &LossInputs {
                        i_f: x,
                        i_ir: ir,
                        i_vis_y: vis,
                        i_seg: seg,
                        seg_preds: &[pred],
                        seg_target: t,
                    },
                )?;
                Ok(terms.total)
            })
        }),
    ]
}

pub fn registry() -> Vec<Case> {
    let mut all = primitives();
    all.extend(composites());
    all
}

/// Runs every case over seeds `0..seeds`, keeping the worst error per case.
pub fn run_suite(cases: &[Case], seeds: u64) -> Result<Vec<CaseResult>> {
    cases
        .iter()
        .map(|case| {
            let mut worst = 0.0;
            let mut worst_seed = 0;
            for seed in 0..seeds {
                let rep = case.run(seed)?;
                if !(rep.max_rel_err <= worst) {
                    worst = rep.max_rel_err;
                    worst_seed = seed;
                }
            }
            Ok(CaseResult {
                name: case.name,
                kind: case.kind,
                tol: case.tol,
                seeds,
                worst_rel_err: worst,
                worst_seed,
            })
        })
        .collect()
}

/// Fixed-width table, one line per case.
pub fn format_table(results: &[CaseResult]) -> String {
    let mut out = format!(
        "{:<30} {:<9} {:>6} {:>12} {:>8}  result\n",
        "case", "kind", "seeds", "max rel err", "tol"
    );
    for r in results {
        let kind = match r.kind {
            CaseKind::Primitive => "primitive",
            CaseKind::Composite => "composite",
            CaseKind::Loss => "loss",
        };
        out.push_str(&format!(
            "{:<30} {:<9} {:>6} {:>12.3e} {:>8.0e}  {}\n",
            r.name,
            kind,
            r.seeds,
            r.worst_rel_err,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
