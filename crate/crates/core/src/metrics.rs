//! Fusion quality metrics and pixel-wise IoU.
//!
//! Images are single-channel planes in `[0, 1]`. Block statistics use a
//! non-overlapping 8×8 tiling that keeps partial edge blocks and weights
//! every block uniformly. Variances and covariances are population moments.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;
pub const PSNR_CAP_DB: f64 = 100.0;
pub const NABF_C: f64 = 1e-6;

const QG_T: f64 = 0.9994;
const QG_K: f64 = -15.0;
const QG_D: f64 = 0.5;
const QA_T: f64 = 0.9879;
const QA_K: f64 = -22.0;
const QA_D: f64 = 0.8;

/// Borrowed row-major single-channel image.
#[derive(Clone, Copy, Debug)]
pub struct Plane<'a> {
    pub h: usize,
    pub w: usize,
    pub data: &'a [f64],
}

impl<'a> Plane<'a> {
    pub fn new(h: usize, w: usize, data: &'a [f64]) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w {
            return shape_err("plane", format!("{} values for {h}x{w}", data.len()));
        }
        Ok(Self { h, w, data })
    }

    /// Accepts `[H,W]` or `[1,H,W]`.
    pub fn of(t: &'a Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, h, w] => Self::new(h, w, t.data()),
            ref s => shape_err("plane", format!("expected [H,W] or [1,H,W], got {s:?}")),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }
}

fn same_size(op: &'static str, planes: &[Plane]) -> Result<()> {
    let (h, w) = (planes[0].h, planes[0].w);
    for p in &planes[1..] {
        if (p.h, p.w) != (h, w) {
            return shape_err(op, format!("{}x{} vs {h}x{w}", p.h, p.w));
        }
    }
    Ok(())
}

/// Half-open `(r0, r1, c0, c1)` tiles, row-major.
pub fn blocks(h: usize, w: usize, k: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::with_capacity(h.div_ceil(k) * w.div_ceil(k));
    for r0 in (0..h).step_by(k) {
        for c0 in (0..w).step_by(k) {
            out.push((r0, (r0 + k).min(h), c0, (c0 + k).min(w)));
        }
    }
    out
}

/// Two-pass joint moments of two planes over a rectangle.
#[derive(Clone, Copy, Debug)]
struct Moments {
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn moments(x: &Plane, y: &Plane, (r0, r1, c0, c1): (usize, usize, usize, usize)) -> Moments {
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            sx += x.at(r, c);
            sy += y.at(r, c);
        }
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            let dx = x.at(r, c) - mx;
            let dy = y.at(r, c) - my;
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    }
    Moments {
        mx,
        my,
        vx: vx / n,
        vy: vy / n,
        cxy: cxy / n,
    }
}

fn whole(p: &Plane) -> (usize, usize, usize, usize) {
    (0, p.h, 0, p.w)
}

fn ssim_from(m: &Moments, max_val: f64) -> f64 {
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    ((2.0 * m.mx * m.my + c1) * (2.0 * m.cxy + c2))
        / ((m.mx * m.mx + m.my * m.my + c1) * (m.vx + m.vy + c2))
}

/// Pearson correlation; zero variance on either side gives 0.
fn pearson_from(m: &Moments) -> f64 {
    if m.vx <= 0.0 || m.vy <= 0.0 {
        return 0.0;
    }
    (m.cxy / (m.vx.sqrt() * m.vy.sqrt())).clamp(-1.0, 1.0)
}

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    same_size("mse", &[*a, *b])?;
    let s: f64 = a.data.iter().zip(b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Plane, b: &Plane, max_val: f64) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / e).log10()).min(PSNR_CAP_DB))
}

/// SSIM from whole-image statistics.
pub fn ssim(x: &Plane, y: &Plane, max_val: f64) -> Result<f64> {
    same_size("ssim", &[*x, *y])?;
    Ok(ssim_from(&moments(x, y, whole(x)), max_val))
}

/// Mean of per-block SSIM over the 8×8 tiling.
pub fn ssim_block(x: &Plane, y: &Plane, max_val: f64) -> Result<f64> {
    same_size("ssim_block", &[*x, *y])?;
    let tiles = blocks(x.h, x.w, BLOCK);
    let s: f64 = tiles.iter().map(|&b| ssim_from(&moments(x, y, b), max_val)).sum();
    Ok(s / tiles.len() as f64)
}

/// Sobel responses with replicate padding, so flat regions give exactly 0.
fn sobel(p: &Plane) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (p.h as isize, p.w as isize);
    let px = |r: isize, c: isize| p.at(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize);
    let mut gx = vec![0.0; p.data.len()];
    let mut gy = vec![0.0; p.data.len()];
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) as usize;
            gx[i] = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
            gy[i] = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
        }
    }
    (gx, gy)
}

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edge_map(p: &Plane) -> EdgeMap {
    let (gx, gy) = sobel(p);
    let strength = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let angle = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    EdgeMap { strength, angle }
}

/// Per-pixel edge preservation of `src` in `fused`.
fn edge_preservation(src: &EdgeMap, fused: &EdgeMap, i: usize) -> f64 {
    let (ga, gf) = (src.strength[i], fused.strength[i]);
    let g = if ga > gf {
        gf / ga
    } else if gf > 0.0 {
        ga / gf
    } else {
        0.0
    };
    let a = 1.0 - (src.angle[i] - fused.angle[i]).abs() / FRAC_PI_2;
    let qg = QG_T / (1.0 + (QG_K * (g - QG_D)).exp());
    let qa = QA_T / (1.0 + (QA_K * (a - QA_D)).exp());
    qg * qa
}

/// Gradient-based edge transfer from both sources into the fused image,
/// weighted by source edge strength. Returns 0 when neither source has edges.
pub fn qabf(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_size("qabf", &[*fused, *ir, *vis])?;
    let ef = edge_map(fused);
    let ea = edge_map(ir);
    let eb = edge_map(vis);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..fused.data.len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        num += edge_preservation(&ea, &ef, i) * wa + edge_preservation(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Block form: uniform-weighted mean of the SSIM-like factor between the
/// fused block and each source block, averaged over the two sources.
pub fn qabf_block(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_size("qabf_block", &[*fused, *ir, *vis])?;
    let tiles = blocks(fused.h, fused.w, BLOCK);
    let wi = 1.0 / tiles.len() as f64;
    let s: f64 = tiles
        .iter()
        .map(|&b| {
            let qa = ssim_from(&moments(fused, ir, b), 1.0);
            let qb = ssim_from(&moments(fused, vis, b), 1.0);
            wi * 0.5 * (qa + qb)
        })
        .sum();
    Ok(s)
}

/// Residual of the fused image after a replicate-padded 3×3 box filter.
/// Written as a mean of neighbour differences so flat regions are exactly 0.
fn noise_residual(p: &Plane) -> Vec<f64> {
    let (h, w) = (p.h as isize, p.w as isize);
    let mut out = vec![0.0; p.data.len()];
    for r in 0..h {
        for c in 0..w {
            let centre = p.at(r as usize, c as usize);
            let mut s = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let rr = (r + dr).clamp(0, h - 1) as usize;
                    let cc = (c + dc).clamp(0, w - 1) as usize;
                    s += p.at(rr, cc) - centre;
                }
            }
            out[(r * w + c) as usize] = -s / 9.0;
        }
    }
    out
}

/// Block noise-to-source-covariance ratio; lower is better.
pub fn nabf(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_size("nabf", &[*fused, *ir, *vis])?;
    let resid = noise_residual(fused);
    let rp = Plane::new(fused.h, fused.w, &resid)?;
    let tiles = blocks(fused.h, fused.w, BLOCK);
    let wi = 1.0 / tiles.len() as f64;
    let s: f64 = tiles
        .iter()
        .map(|&b| {
            let sigma_n = moments(&rp, &rp, b).vx.sqrt();
            let sigma_ab = moments(ir, vis, b).cxy;
            wi * sigma_n / (sigma_ab.abs() + NABF_C)
        })
        .sum();
    Ok(s)
}

/// Sum of correlations of differences:
/// `r(F − VIS, IR) + r(F − IR, VIS)` over the whole image.
pub fn scd(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_size("scd", &[*fused, *ir, *vis])?;
    let d_vis: Vec<f64> = fused.data.iter().zip(vis.data).map(|(f, v)| f - v).collect();
    let d_ir: Vec<f64> = fused.data.iter().zip(ir.data).map(|(f, a)| f - a).collect();
    let pv = Plane::new(fused.h, fused.w, &d_vis)?;
    let pi = Plane::new(fused.h, fused.w, &d_ir)?;
    Ok(pearson_from(&moments(&pv, ir, whole(ir))) + pearson_from(&moments(&pi, vis, whole(vis))))
}

/// Block form `Σ w_i |ρ(ir_i, f_i) + ρ(vis_i, f_i) − 2|` with the fused
/// self-correlation taken as 1.
pub fn scd_block(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<f64> {
    same_size("scd_block", &[*fused, *ir, *vis])?;
    let tiles = blocks(fused.h, fused.w, BLOCK);
    let wi = 1.0 / tiles.len() as f64;
    let s: f64 = tiles
        .iter()
        .map(|&b| {
            let ra = pearson_from(&moments(ir, fused, b));
            let rb = pearson_from(&moments(vis, fused, b));
            wi * (ra + rb - 2.0).abs()
        })
        .sum();
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` when the class is absent from both maps.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub miou: f64,
}

pub fn iou_miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<IouReport> {
    if pred.len() != gt.len() || gt.is_empty() {
        return shape_err("iou", format!("{} predicted vs {} labels", pred.len(), gt.len()));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    let mut in_gt = vec![false; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return shape_err("iou", format!("label {} outside {num_classes} classes", p.max(g)));
        }
        in_gt[g] = true;
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| (union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| in_gt[c])
        .filter_map(|c| per_class[c])
        .collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Six headline metrics for one fused image. Two-image metrics are the mean
/// over both sources. `qabf` is the gradient form and `scd` the
/// correlation-of-differences form; block forms are reported alongside.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub psnr: f64,
    pub qabf: f64,
    pub nabf: f64,
    pub ssim: f64,
    pub scd: f64,
    pub qabf_block: f64,
    pub scd_block: f64,
    pub ssim_block: f64,
}

impl MetricReport {
    pub fn evaluate(fused: &Plane, ir: &Plane, vis: &Plane) -> Result<Self> {
        same_size("metrics", &[*fused, *ir, *vis])?;
        let pair = |f: fn(&Plane, &Plane, f64) -> Result<f64>| -> Result<f64> {
            Ok(0.5 * (f(fused, ir, 1.0)? + f(fused, vis, 1.0)?))
        };
        Ok(Self {
            mse: 0.5 * (mse(fused, ir)? + mse(fused, vis)?),
            psnr: pair(psnr)?,
            qabf: qabf(fused, ir, vis)?,
            nabf: nabf(fused, ir, vis)?,
            ssim: pair(ssim)?,
            scd: scd(fused, ir, vis)?,
            qabf_block: qabf_block(fused, ir, vis)?,
            scd_block: scd_block(fused, ir, vis)?,
            ssim_block: pair(ssim_block)?,
        })
    }

    fn fields(&self) -> [f64; 9] {
        [
            self.mse,
            self.psnr,
            self.qabf,
            self.nabf,
            self.ssim,
            self.scd,
            self.qabf_block,
            self.scd_block,
            self.ssim_block,
        ]
    }

    fn from_fields(v: [f64; 9]) -> Self {
        Self {
            mse: v[0],
            psnr: v[1],
            qabf: v[2],
            nabf: v[3],
            ssim: v[4],
            scd: v[5],
            qabf_block: v[6],
            scd_block: v[7],
            ssim_block: v[8],
        }
    }

    /// Field-wise arithmetic mean; all zeros for an empty slice.
    pub fn mean<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Self {
        let mut acc = [0.0; 9];
        let mut n = 0usize;
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.fields()) {
                *a += v;
            }
            n += 1;
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        Self::from_fields(acc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub image_id: String,
    pub report: MetricReport,
}

pub const CSV_HEADER: [&str; 7] = ["image_id", "mse", "psnr", "qabf", "nabf", "ssim", "scd"];

pub fn write_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        let r = &row.report;
        let mut rec = vec![row.image_id.clone()];
        rec.extend([r.mse, r.psnr, r.qabf, r.nabf, r.ssim, r.scd].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub mean: MetricReport,
    pub qabf_variant: String,
    pub scd_variant: String,
    pub block_size: usize,
}

impl Aggregate {
    pub fn of(rows: &[MetricRow]) -> Self {
        Self {
            images: rows.len(),
            mean: MetricReport::mean(rows.iter().map(|r| &r.report)),
            qabf_variant: "gradient".into(),
            scd_variant: "correlation_of_differences".into(),
            block_size: BLOCK,
        }
    }
}
