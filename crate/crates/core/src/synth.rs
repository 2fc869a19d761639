//! Deterministic synthetic infrared/visible scenes with label maps.
//!
//! Each scene has a smooth background and at least one object: hot blobs
//! ("person", bright in infrared, low-contrast in visible) and boxes ("car",
//! mid-intensity in infrared, striped in visible).

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io;
use crate::model::ImagePair;
use crate::tensor::Tensor;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_PERSON: u8 = 1;
pub const CLASS_CAR: u8 = 2;
pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub id: String,
    pub pair: ImagePair,
    pub seed: u64,
}

impl SynthScene {
    pub fn labels(&self) -> &[u8] {
        self.pair
            .labels
            .as_deref()
            .expect("synthetic scenes carry labels")
    }

    /// `[1,H,W]` binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Tensor {
        let (h, w) = (self.pair.height(), self.pair.width());
        let l = self.labels();
        Tensor::from_fn(&[1, h, w], |i| (l[i] == class) as u8 as f64)
    }

    /// Object classes present, ascending.
    pub fn object_classes(&self) -> Vec<u8> {
        let l = self.labels();
        [CLASS_PERSON, CLASS_CAR]
            .into_iter()
            .filter(|c| l.contains(c))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub size: usize,
    pub seed: u64,
    pub classes: Vec<String>,
    pub scenes: Vec<String>,
}

pub fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 4 != 0 {
        return Err(Error::Config(format!(
            "scene size must be ≥ 16 and divisible by 4, got {size}"
        )));
    }
    Ok(())
}

/// `n` scenes of `size×size` pixels, fully determined by `seed`.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<SynthScene>> {
    check_size(size)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let s: u64 = master.gen();
            Ok(generate_scene(format!("{i:05}"), size, s))
        })
        .collect()
}

struct Rect {
    r0: usize,
    c0: usize,
    r1: usize,
    c1: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        self.r0 < o.r1 + margin
            && o.r0 < self.r1 + margin
            && self.c0 < o.c1 + margin
            && o.c0 < self.c1 + margin
    }
}

fn generate_scene(id: String, size: usize, seed: u64) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let scale = size as f64 / 32.0;

    let mut ir = vec![0.0; n];
    let mut vis = vec![0.0; 3 * n];
    let mut labels = vec![CLASS_BACKGROUND; n];

    // Background: gentle infrared ramp, textured visible ground.
    let ir_base = rng.gen_range(0.1..0.25);
    let ramp = rng.gen_range(-0.05..0.05);
    let tint: [f64; 3] = [
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
        rng.gen_range(0.3..0.6),
    ];
    let (fr, fc, phase) = (
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.1..0.4),
        rng.gen_range(0.0..6.28),
    );
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            ir[i] = ir_base + ramp * r as f64 / size as f64 + rng.gen_range(-0.02..0.02);
            let tex = 0.08 * ((fr * r as f64 + fc * c as f64 + phase).sin());
            for (ch, t) in tint.iter().enumerate() {
                vis[ch * n + i] = t + tex + rng.gen_range(-0.03..0.03);
            }
        }
    }

    let n_person = rng.gen_range(0..=2usize);
    let n_car = rng.gen_range(if n_person == 0 { 1 } else { 0 }..=2usize);
    let mut placed: Vec<Rect> = Vec::new();
    let mut kinds = vec![CLASS_PERSON; n_person];
    kinds.extend(vec![CLASS_CAR; n_car]);

    for kind in kinds {
        let (hh, ww) = match kind {
            CLASS_PERSON => (
                ((rng.gen_range(8.0..12.0) * scale) as usize).max(4),
                ((rng.gen_range(5.0..8.0) * scale) as usize).max(3),
            ),
            _ => (
                ((rng.gen_range(5.0..8.0) * scale) as usize).max(3),
                ((rng.gen_range(8.0..13.0) * scale) as usize).max(4),
            ),
        };
        let mut spot = None;
        for _ in 0..50 {
            let r0 = rng.gen_range(1..size - hh);
            let c0 = rng.gen_range(1..size - ww);
            let rect = Rect {
                r0,
                c0,
                r1: r0 + hh,
                c1: c0 + ww,
            };
            if placed.iter().all(|p| !rect.overlaps(p, 1)) {
                spot = Some(rect);
                break;
            }
        }
        let Some(rect) = spot else { continue };
        match kind {
            CLASS_PERSON => paint_person(&rect, size, &mut rng, &mut ir, &mut vis, &mut labels),
            _ => paint_car(&rect, size, &mut rng, &mut ir, &mut vis, &mut labels),
        }
        placed.push(rect);
    }
    if placed.is_empty() {
        // Unreachable in practice: the first object always fits an empty frame.
        let rect = Rect {
            r0: 2,
            c0: 2,
            r1: size / 2,
            c1: size / 2,
        };
        paint_person(&rect, size, &mut rng, &mut ir, &mut vis, &mut labels);
    }

    let clamp = |v: &mut f64| *v = v.clamp(0.0, 1.0);
    ir.iter_mut().for_each(clamp);
    vis.iter_mut().for_each(clamp);
    let pair = ImagePair::new(
        Tensor::new(&[1, size, size], ir).expect("sized"),
        Tensor::new(&[3, size, size], vis).expect("sized"),
        Some(labels),
    )
    .expect("generator emits valid pairs");
    SynthScene { id, pair, seed }
}

fn paint_person(
    rect: &Rect,
    size: usize,
    rng: &mut ChaCha8Rng,
    ir: &mut [f64],
    vis: &mut [f64],
    labels: &mut [u8],
) {
    let n = size * size;
    let heat = rng.gen_range(0.8..0.95);
    let cr = (rect.r0 + rect.r1) as f64 / 2.0 - 0.5;
    let cc = (rect.c0 + rect.c1) as f64 / 2.0 - 0.5;
    let ry = (rect.r1 - rect.r0) as f64 / 2.0;
    let rx = (rect.c1 - rect.c0) as f64 / 2.0;
    let shade = rng.gen_range(-0.12..-0.04);
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            let d = ((r as f64 - cr) / ry).powi(2) + ((c as f64 - cc) / rx).powi(2);
            if d > 1.0 {
                continue;
            }
            let i = r * size + c;
            labels[i] = CLASS_PERSON;
            ir[i] = heat + 0.05 * (1.0 - d) + rng.gen_range(-0.02..0.02);
            // Camouflaged in visible: a slight darkening of the background.
            for ch in 0..3 {
                vis[ch * n + i] += shade;
            }
        }
    }
}

fn paint_car(
    rect: &Rect,
    size: usize,
    rng: &mut ChaCha8Rng,
    ir: &mut [f64],
    vis: &mut [f64],
    labels: &mut [u8],
) {
    let n = size * size;
    let warmth = rng.gen_range(0.45..0.6);
    let color: [f64; 3] = [
        rng.gen_range(0.2..0.9),
        rng.gen_range(0.2..0.9),
        rng.gen_range(0.2..0.9),
    ];
    let period = rng.gen_range(2..=3usize);
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            let i = r * size + c;
            labels[i] = CLASS_CAR;
            ir[i] = warmth + rng.gen_range(-0.02..0.02);
            let stripe = if (r - rect.r0) % period == 0 {
                0.25
            } else {
                -0.15
            };
            for (ch, col) in color.iter().enumerate() {
                vis[ch * n + i] = col + stripe;
            }
        }
    }
}

/// Writes `ir/`, `vis/`, `labels/` PNGs and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, scenes: &[SynthScene], size: usize, seed: u64) -> Result<()> {
    for sub in ["ir", "vis", "labels"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for s in scenes {
        let file = format!("{}.png", s.id);
        image_io::write_png(&dir.join("ir").join(&file), &s.pair.ir)?;
        image_io::write_png(&dir.join("vis").join(&file), &s.pair.vis)?;
        let labels = image_io::encode_labels(s.labels(), s.pair.height(), s.pair.width())?;
        fs::write(dir.join("labels").join(&file), labels)?;
    }
    let manifest = Manifest {
        size,
        seed,
        classes: vec!["background".into(), "person".into(), "car".into()],
        scenes: scenes.iter().map(|s| s.id.clone()).collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]. Pixel values come back on
/// the 8-bit grid.
pub fn read_dataset(dir: &Path) -> Result<Vec<SynthScene>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    manifest
        .scenes
        .iter()
        .map(|id| {
            let file = format!("{id}.png");
            let ir = image_io::decode_png_channels(&fs::read(dir.join("ir").join(&file))?, 1)?;
            let vis = image_io::decode_png_channels(&fs::read(dir.join("vis").join(&file))?, 3)?;
            let (labels, h, w) =
                image_io::decode_labels(&fs::read(dir.join("labels").join(&file))?)?;
            if (h, w) != (ir.shape()[1], ir.shape()[2]) {
                return Err(Error::Image(format!("label map size mismatch for {id}")));
            }
            Ok(SynthScene {
                id: id.clone(),
                pair: ImagePair::new(ir, vis, Some(labels))?,
                seed: manifest.seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        assert_eq!(
            synth_generate(5, 32, 7).unwrap(),
            synth_generate(5, 32, 7).unwrap()
        );
        assert_ne!(
            synth_generate(2, 32, 7).unwrap(),
            synth_generate(2, 32, 8).unwrap()
        );
    }

    #[test]
    fn size_contract() {
        assert!(matches!(synth_generate(1, 12, 0), Err(Error::Config(_))));
        assert!(matches!(synth_generate(1, 30, 0), Err(Error::Config(_))));
        assert!(synth_generate(1, 64, 0).is_ok());
    }

    #[test]
    fn every_scene_has_an_object_and_labels_in_range() {
        for s in synth_generate(60, 32, 3).unwrap() {
            assert!(!s.object_classes().is_empty());
            assert!(s.labels().iter().all(|&l| (l as usize) < NUM_CLASSES));
            // Class masks partition the frame.
            let total: f64 = (0..NUM_CLASSES as u8)
                .map(|c| s.class_mask(c).data().iter().sum::<f64>())
                .sum();
            assert_eq!(total, 32.0 * 32.0);
        }
    }

    #[test]
    fn hot_blobs_are_bright_in_infrared() {
        for s in synth_generate(60, 32, 4).unwrap() {
            if !s.object_classes().contains(&CLASS_PERSON) {
                continue;
            }
            let m = s.class_mask(CLASS_PERSON);
            let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0.0, 0.0, 0.0);
            for (v, k) in s.pair.ir.data().iter().zip(m.data()) {
                if *k == 1.0 {
                    inside += v;
                    n_in += 1.0;
                } else {
                    outside += v;
                    n_out += 1.0;
                }
            }
            assert!(inside / n_in - outside / n_out >= 0.3);
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = synth_generate(3, 16, 1).unwrap();
        write_dataset(dir.path(), &scenes, 16, 1).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.labels(), b.labels());
            assert!(a.pair.ir.max_abs_diff(&b.pair.ir) <= 0.5 / 255.0 + 1e-12);
            assert!(a.pair.vis.max_abs_diff(&b.pair.vis) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
