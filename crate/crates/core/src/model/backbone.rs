//! Modality encoders built from gradient residual dense blocks, and the
//! image decoder.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, Init, ParamStore, LEAKY_SLOPE, SOBEL_X, SOBEL_Y};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ir,
    Vis,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Ir => 1,
            Modality::Vis => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ir => "ir",
            Modality::Vis => "vis",
        }
    }
}

/// Registered infrared/visible pair with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    /// `[1,H,W]` in `[0,1]`.
    pub ir: Tensor,
    /// `[3,H,W]` in `[0,1]`.
    pub vis: Tensor,
    /// Row-major class ids, `H·W` entries.
    pub labels: Option<Vec<u8>>,
}

impl ImagePair {
    pub fn new(ir: Tensor, vis: Tensor, labels: Option<Vec<u8>>) -> Result<Self> {
        if ir.ndim() != 3 || ir.shape()[0] != 1 {
            return shape_err(
                "image_pair",
                format!("ir must be [1,H,W], got {:?}", ir.shape()),
            );
        }
        if vis.ndim() != 3 || vis.shape()[0] != 3 || vis.shape()[1..] != ir.shape()[1..] {
            return shape_err(
                "image_pair",
                format!("vis {:?} does not match ir {:?}", vis.shape(), ir.shape()),
            );
        }
        let in_range = |t: &Tensor| t.data().iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&ir) || !in_range(&vis) {
            return Err(Error::Image("pixel values must lie in [0,1]".into()));
        }
        if let Some(l) = &labels {
            if l.len() != ir.numel() {
                return shape_err(
                    "image_pair",
                    format!("{} labels for {} pixels", l.len(), ir.numel()),
                );
            }
        }
        Ok(Self { ir, vis, labels })
    }

    pub fn height(&self) -> usize {
        self.ir.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.ir.shape()[2]
    }

    /// Luminance `0.299R + 0.587G + 0.114B` of the visible image, `[1,H,W]`.
    pub fn vis_luma(&self) -> Tensor {
        luma(&self.vis)
    }
}

pub fn luma(rgb: &Tensor) -> Tensor {
    let (_, h, w) = rgb.chw();
    let n = h * w;
    let d = rgb.data();
    Tensor::from_fn(&[1, h, w], |i| {
        0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Channels per modality encoder; the reference feature has twice this.
    pub enc_channels: usize,
    pub grdb_blocks: usize,
    pub decoder_schedule: Vec<usize>,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.decoder_schedule;
        if self.enc_channels < 2 || self.enc_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "enc_channels must be even and ≥ 2, got {}",
                self.enc_channels
            )));
        }
        if s.len() < 2 || s[0] != 2 * self.enc_channels || *s.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "decoder schedule {s:?} must start at {} and end at 1",
                2 * self.enc_channels
            )));
        }
        if s[..s.len() - 1].windows(2).any(|p| p[1] * 2 != p[0]) {
            return Err(Error::Config(format!(
                "decoder schedule {s:?} must halve at every step but the last"
            )));
        }
        Ok(())
    }
}

/// Gradient residual dense block: a two-layer dense chain plus a fixed
/// Sobel branch, fused by a 1×1 conv and added back onto the input.
#[derive(Clone, Debug)]
pub struct Grdb {
    pub dense1: Conv2d,
    pub dense2: Conv2d,
    pub fuse: Conv2d,
}

impl Grdb {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, c: usize) -> Self {
        let g = c / 2;
        Self {
            dense1: Conv2d::new(
                store,
                init,
                &format!("{name}.dense1"),
                ConvSpec::new(c, g, 3),
                LEAKY_SLOPE,
                false,
            ),
            dense2: Conv2d::new(
                store,
                init,
                &format!("{name}.dense2"),
                ConvSpec::new(c + g, g, 3),
                LEAKY_SLOPE,
                false,
            ),
            fuse: Conv2d::new(
                store,
                init,
                &format!("{name}.fuse"),
                ConvSpec::new(2 * c, c, 1),
                1.0,
                false,
            ),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let d1 = self.dense1.forward(cx, x)?;
        let d1 = cx.g.leaky_relu(d1, LEAKY_SLOPE);
        let cat = cx.g.concat(&[x, d1])?;
        let d2 = self.dense2.forward(cx, cat)?;
        let d2 = cx.g.leaky_relu(d2, LEAKY_SLOPE);
        let edges = sobel_l1(cx, x)?;
        let cat = cx.g.concat(&[d1, d2, edges])?;
        let fused = self.fuse.forward(cx, cat)?;
        cx.g.add(x, fused)
    }
}

/// Depthwise `|∂x| + |∂y|` Sobel response with replicated borders.
pub fn sobel_l1(cx: &mut Ctx, x: Var) -> Result<Var> {
    let gx = cx.g.filter3x3(x, SOBEL_X)?;
    let gy = cx.g.filter3x3(x, SOBEL_Y)?;
    let ax = cx.g.abs(gx);
    let ay = cx.g.abs(gy);
    cx.g.add(ax, ay)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub modality: Modality,
    pub conv_in: Conv2d,
    pub blocks: Vec<Grdb>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        modality: Modality,
        cfg: &BackboneConfig,
    ) -> Self {
        let name = format!("enc_{}", modality.name());
        let c = cfg.enc_channels;
        let conv_in = Conv2d::new(
            store,
            init,
            &format!("{name}.conv_in"),
            ConvSpec::new(modality.channels(), c, 3),
            LEAKY_SLOPE,
            false,
        );
        let blocks = (0..cfg.grdb_blocks)
            .map(|i| Grdb::new(store, init, &format!("{name}.grdb{i}"), c))
            .collect();
        Self {
            modality,
            conv_in,
            blocks,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<Var> {
        let shape = cx.g.shape(image);
        if shape.len() != 3 || shape[0] != self.modality.channels() {
            return shape_err(
                "encode",
                format!("{} encoder got {:?}", self.modality.name(), shape),
            );
        }
        let x = self.conv_in.forward(cx, image)?;
        let mut x = cx.g.leaky_relu(x, LEAKY_SLOPE);
        for b in &self.blocks {
            x = b.forward(cx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<Conv2d>,
    in_channels: usize,
}

impl Decoder {
    fn new(store: &mut ParamStore, init: &mut Init, schedule: &[usize]) -> Self {
        let last = schedule.len() - 2;
        let layers = schedule
            .windows(2)
            .enumerate()
            .map(|(i, p)| {
                let gain = if i == last { 1.0 } else { LEAKY_SLOPE };
                Conv2d::new(
                    store,
                    init,
                    &format!("dec.conv{i}"),
                    ConvSpec::new(p[0], p[1], 3),
                    gain,
                    false,
                )
            })
            .collect();
        Self {
            layers,
            in_channels: schedule[0],
        }
    }

    /// Single-channel image in `[0,1]` via `(tanh + 1) / 2`.
    pub fn forward(&self, cx: &mut Ctx, f: Var) -> Result<Var> {
        let c = cx.g.shape(f)[0];
        if c != self.in_channels {
            return shape_err(
                "decode",
                format!("{c} channels, decoder expects {}", self.in_channels),
            );
        }
        let mut x = f;
        for (i, conv) in self.layers.iter().enumerate() {
            x = conv.forward(cx, x)?;
            if i + 1 < self.layers.len() {
                x = cx.g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        let t = cx.g.tanh(x);
        let t = cx.g.add_scalar(t, 1.0);
        Ok(cx.g.scale(t, 0.5))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub ir: Encoder,
    pub vis: Encoder,
    pub decoder: Decoder,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            ir: Encoder::new(store, init, Modality::Ir, cfg),
            vis: Encoder::new(store, init, Modality::Vis, cfg),
            decoder: Decoder::new(store, init, &cfg.decoder_schedule),
        })
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        match m {
            Modality::Ir => &self.ir,
            Modality::Vis => &self.vis,
        }
    }
}

/// Channel concatenation in (ir, vis) order.
pub fn reference_features(cx: &mut Ctx, f_ir: Var, f_vis: Var) -> Result<Var> {
    let (a, b) = (cx.g.shape(f_ir), cx.g.shape(f_vis));
    if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
        return shape_err("reference_features", format!("{a:?} vs {b:?}"));
    }
    cx.g.concat(&[f_ir, f_vis])
}
