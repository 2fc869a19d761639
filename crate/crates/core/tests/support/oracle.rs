//! Brute-force twins of every metric, written independently from the
//! library: 2-D arrays, explicitly padded borders, one-pass sums.
#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

use ctrlfuse_core::metrics::{self, Plane};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Img = Vec<Vec<f64>>;

pub fn random_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Img {
    (0..h)
        .map(|_| (0..w).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

/// Smooth field plus noise, so block correlations are far from 0 and ±1.
pub fn textured_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Img {
    let (a, b, p) = (rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.0..6.0));
    (0..h)
        .map(|r| {
            (0..w)
                .map(|c| {
                    let s = 0.5 + 0.3 * (a * r as f64 + b * c as f64 + p).sin();
                    (s + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect()
}

pub fn flat(img: &Img) -> Vec<f64> {
    img.iter().flatten().copied().collect()
}

pub fn plane(buf: &[f64], h: usize, w: usize) -> Plane<'_> {
    Plane::new(h, w, buf).unwrap()
}

/// Rectangle `[r0, r1) × [c0, c1)`.
pub type Rect = (usize, usize, usize, usize);

pub fn tiles(h: usize, w: usize) -> Vec<Rect> {
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 < h {
        let mut c0 = 0;
        while c0 < w {
            out.push((r0, usize::min(r0 + 8, h), c0, usize::min(c0 + 8, w)));
            c0 += 8;
        }
        r0 += 8;
    }
    out
}

pub struct Stats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov: f64,
}

pub fn stats(x: &Img, y: &Img, (r0, r1, c0, c1): Rect) -> Stats {
    let n = ((r1 - r0) * (c1 - c0)) as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in r0..r1 {
        for c in c0..c1 {
            let (a, b) = (x[r][c], y[r][c]);
            sx += a;
            sy += b;
            sxx += a * a;
            syy += b * b;
            sxy += a * b;
        }
    }
    let (mx, my) = (sx / n, sy / n);
    Stats {
        mean_x: mx,
        mean_y: my,
        var_x: (sxx / n - mx * mx).max(0.0),
        var_y: (syy / n - my * my).max(0.0),
        cov: sxy / n - mx * my,
    }
}

pub fn full(x: &Img) -> Rect {
    (0, x.len(), 0, x[0].len())
}

pub fn o_mse(a: &Img, b: &Img) -> f64 {
    let mut s = 0.0;
    let mut n = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (p, q) in ra.iter().zip(rb) {
            s += (p - q).powi(2);
            n += 1.0;
        }
    }
    s / n
}

pub fn o_psnr(a: &Img, b: &Img) -> f64 {
    let m = o_mse(a, b);
    if m == 0.0 {
        100.0
    } else {
        f64::min(100.0, 10.0 * (1.0 / m).log10())
    }
}

pub fn o_ssim_stats(s: &Stats) -> f64 {
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let lum = (2.0 * s.mean_x * s.mean_y + c1) / (s.mean_x.powi(2) + s.mean_y.powi(2) + c1);
    let cs = (2.0 * s.cov + c2) / (s.var_x + s.var_y + c2);
    lum * cs
}

pub fn o_ssim(x: &Img, y: &Img) -> f64 {
    o_ssim_stats(&stats(x, y, full(x)))
}

pub fn o_ssim_block(x: &Img, y: &Img) -> f64 {
    let t = tiles(x.len(), x[0].len());
    t.iter().map(|&b| o_ssim_stats(&stats(x, y, b))).sum::<f64>() / t.len() as f64
}

pub fn pad1(x: &Img) -> Img {
    let (h, w) = (x.len(), x[0].len());
    let mut out = vec![vec![0.0; w + 2]; h + 2];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let rr = r.saturating_sub(1).min(h - 1);
            let cc = c.saturating_sub(1).min(w - 1);
            *v = x[rr][cc];
        }
    }
    out
}

pub fn o_sobel(x: &Img) -> (Img, Img) {
    let p = pad1(x);
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = (x.len(), x[0].len());
    let mut gx = vec![vec![0.0; w]; h];
    let mut gy = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            for i in 0..3 {
                for j in 0..3 {
                    gx[r][c] += kx[i][j] * p[r + i][c + j];
                    gy[r][c] += ky[i][j] * p[r + i][c + j];
                }
            }
        }
    }
    (gx, gy)
}

pub fn o_qabf(f: &Img, a: &Img, b: &Img) -> f64 {
    let edges = |x: &Img| {
        let (gx, gy) = o_sobel(x);
        let h = x.len();
        let w = x[0].len();
        let mut g = vec![vec![0.0; w]; h];
        let mut ang = vec![vec![0.0; w]; h];
        for r in 0..h {
            for c in 0..w {
                g[r][c] = (gx[r][c].powi(2) + gy[r][c].powi(2)).sqrt();
                ang[r][c] = if gx[r][c] == 0.0 {
                    FRAC_PI_2
                } else {
                    (gy[r][c] / gx[r][c]).atan()
                };
            }
        }
        (g, ang)
    };
    let (gf, af) = edges(f);
    let q = |gs: f64, as_: f64, gfv: f64, afv: f64| {
        let g = if gs == 0.0 && gfv == 0.0 {
            0.0
        } else {
            f64::min(gs, gfv) / f64::max(gs, gfv)
        };
        let alpha = 1.0 - (as_ - afv).abs() / FRAC_PI_2;
        let qg = 0.9994 / (1.0 + (-15.0 * (g - 0.5)).exp());
        let qa = 0.9879 / (1.0 + (-22.0 * (alpha - 0.8)).exp());
        qg * qa
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for src in [a, b] {
        let (gs, as_) = edges(src);
        for r in 0..f.len() {
            for c in 0..f[0].len() {
                num += q(gs[r][c], as_[r][c], gf[r][c], af[r][c]) * gs[r][c];
                den += gs[r][c];
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn o_qabf_block(f: &Img, a: &Img, b: &Img) -> f64 {
    let t = tiles(f.len(), f[0].len());
    let n = t.len() as f64;
    t.iter()
        .map(|&r| (o_ssim_stats(&stats(f, a, r)) + o_ssim_stats(&stats(f, b, r))) / (2.0 * n))
        .sum()
}

pub fn o_nabf(f: &Img, a: &Img, b: &Img) -> f64 {
    let p = pad1(f);
    let (h, w) = (f.len(), f[0].len());
    let mut resid = vec![vec![0.0; w]; h];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += p[r + i][c + j];
                }
            }
            resid[r][c] = f[r][c] - s / 9.0;
        }
    }
    let t = tiles(h, w);
    let n = t.len() as f64;
    t.iter()
        .map(|&r| {
            let sn = stats(&resid, &resid, r).var_x.sqrt();
            let cab = stats(a, b, r).cov;
            sn / (cab.abs() + 1e-6) / n
        })
        .sum()
}

pub fn o_pearson(x: &Img, y: &Img, r: Rect) -> f64 {
    let s = stats(x, y, r);
    if s.var_x <= 1e-300 || s.var_y <= 1e-300 {
        0.0
    } else {
        s.cov / (s.var_x * s.var_y).sqrt()
    }
}

pub fn sub(x: &Img, y: &Img) -> Img {
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect())
        .collect()
}

pub fn o_scd(f: &Img, a: &Img, b: &Img) -> f64 {
    o_pearson(&sub(f, b), a, full(a)) + o_pearson(&sub(f, a), b, full(b))
}

pub fn o_scd_block(f: &Img, a: &Img, b: &Img) -> f64 {
    let t = tiles(f.len(), f[0].len());
    let n = t.len() as f64;
    t.iter()
        .map(|&r| (o_pearson(a, f, r) + o_pearson(b, f, r) - 2.0).abs() / n)
        .sum()
}

pub fn o_iou(pred: &[u8], gt: &[u8], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut per = Vec::new();
    let mut present = Vec::new();
    for c in 0..k as u8 {
        let inter = pred.iter().zip(gt).filter(|(p, g)| **p == c && **g == c).count();
        let union = pred.iter().zip(gt).filter(|(p, g)| **p == c || **g == c).count();
        let iou = (union > 0).then(|| inter as f64 / union as f64);
        if gt.contains(&c) {
            present.push(iou.unwrap());
        }
        per.push(iou);
    }
    (per, present.iter().sum::<f64>() / present.len() as f64)
}


pub fn triple(seed: u64, side: usize, textured: bool) -> (Img, Img, Img) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen = if textured { textured_img } else { random_img };
    (
        gen(&mut rng, side, side),
        gen(&mut rng, side, side),
        gen(&mut rng, side, side),
    )
}

/// `(metric, library value, oracle value)` for every metric on one random
/// `side × side` triple; odd seeds use textured images.
pub fn compare_all(seed: u64, side: usize) -> Vec<(&'static str, f64, f64)> {
    let (fi, ai, bi) = triple(seed, side, seed % 2 == 1);
    let (fb, ab, bb) = (flat(&fi), flat(&ai), flat(&bi));
    let (f, a, b) = (plane(&fb, side, side), plane(&ab, side, side), plane(&bb, side, side));
    let mut out = vec![
        ("mse", metrics::mse(&f, &a).unwrap(), o_mse(&fi, &ai)),
        ("psnr", metrics::psnr(&f, &a, 1.0).unwrap(), o_psnr(&fi, &ai)),
        ("ssim", metrics::ssim(&f, &a, 1.0).unwrap(), o_ssim(&fi, &ai)),
        ("ssim_block", metrics::ssim_block(&f, &b, 1.0).unwrap(), o_ssim_block(&fi, &bi)),
        ("qabf", metrics::qabf(&f, &a, &b).unwrap(), o_qabf(&fi, &ai, &bi)),
        ("qabf_block", metrics::qabf_block(&f, &a, &b).unwrap(), o_qabf_block(&fi, &ai, &bi)),
        ("nabf", metrics::nabf(&f, &a, &b).unwrap(), o_nabf(&fi, &ai, &bi)),
        ("scd", metrics::scd(&f, &a, &b).unwrap(), o_scd(&fi, &ai, &bi)),
        ("scd_block", metrics::scd_block(&f, &a, &b).unwrap(), o_scd_block(&fi, &ai, &bi)),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let gt: Vec<u8> = (0..side * side).map(|_| rng.gen_range(0..3)).collect();
    let pred: Vec<u8> = gt
        .iter()
        .map(|&g| if rng.gen_bool(0.3) { rng.gen_range(0..4) } else { g })
        .collect();
    let lib = metrics::iou_miou(&pred, &gt, 4).unwrap();
    let (per, miou) = o_iou(&pred, &gt, 4);
    for (l, o) in lib.per_class.iter().zip(&per) {
        // absent on one side only is a definite mismatch
        let (l, o) = match (l, o) {
            (Some(l), Some(o)) => (*l, *o),
            (None, None) => (0.0, 0.0),
            _ => (0.0, f64::INFINITY),
        };
        out.push(("iou", l, o));
    }
    out.push(("miou", lib.miou, miou));
    out
}
