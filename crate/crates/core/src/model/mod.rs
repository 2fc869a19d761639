//! The controllable fusion network: encoders, reference prompt encoders,
//! frozen segmentation backend, prompt-semantic fusion and decoder.

pub mod backbone;
pub mod backend;
pub mod psfm;
pub mod rpe;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::losses::{total_loss, FrozenPerceptualNet, LossInputs, LossTerms};
use crate::nn::{Conv2d, Ctx, Init, ParamStore};
use crate::tensor::{Tensor, Var};

pub use backbone::{luma, reference_features, Backbone, BackboneConfig, ImagePair, Modality};
pub use backend::{combine_masks, SegBackend};
pub use psfm::{compose, Psfm};
pub use rpe::{target_pool, PromptMask, RpeBranch};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Learnable prompt queries per branch.
    pub num_queries: usize,
    /// Token width of the segmentation backend.
    pub d_sam: usize,
    pub heads: usize,
    /// Seed for every frozen component (backend, prompt projection,
    /// perceptual net).
    pub frozen_seed: u64,
}

pub const DEFAULT_FROZEN_SEED: u64 = 0x5EED_F00D;

impl ModelConfig {
    /// CPU-sized default: 16 channels per modality, decoder 32→16→8→4→2→1.
    pub fn desk(seed: u64) -> Self {
        Self {
            backbone: BackboneConfig {
                enc_channels: 16,
                grdb_blocks: 1,
                decoder_schedule: vec![32, 16, 8, 4, 2, 1],
                seed,
            },
            num_queries: 40,
            d_sam: 32,
            heads: 1,
            frozen_seed: DEFAULT_FROZEN_SEED,
        }
    }

    /// Full-width variant with the 256→128→64→32→16→1 decoder.
    pub fn full(seed: u64) -> Self {
        Self {
            backbone: BackboneConfig {
                enc_channels: 128,
                grdb_blocks: 1,
                decoder_schedule: vec![256, 128, 64, 32, 16, 1],
                seed,
            },
            num_queries: 40,
            d_sam: 256,
            heads: 1,
            frozen_seed: DEFAULT_FROZEN_SEED,
        }
    }

    pub fn seed(&self) -> u64 {
        self.backbone.seed
    }

    pub fn channels(&self) -> usize {
        self.backbone.enc_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let c = self.channels();
        if self.num_queries == 0 || self.d_sam == 0 {
            return Err(Error::Config(
                "num_queries and d_sam must be positive".into(),
            ));
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads do not divide {c} channels",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Structural switches for the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// No prompt path at all: fused image is the reference decode, no
    /// segmentation loss.
    NoPrompt,
    /// Masks still gate the fusion but are not supervised.
    NoSeg,
    NoVis,
    NoIr,
    /// Support and query features swap roles inside the prompt encoder.
    ExchangeSq,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoPrompt,
        Ablation::NoSeg,
        Ablation::NoVis,
        Ablation::NoIr,
        Ablation::ExchangeSq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPrompt => "no_prompt",
            Ablation::NoSeg => "no_seg",
            Ablation::NoVis => "no_vis",
            Ablation::NoIr => "no_ir",
            Ablation::ExchangeSq => "exchange_sq",
        }
    }

    fn uses(self, m: Modality) -> bool {
        match self {
            Ablation::NoPrompt => false,
            Ablation::NoVis => m == Modality::Ir,
            Ablation::NoIr => m == Modality::Vis,
            _ => true,
        }
    }

    pub fn supervises_masks(self) -> bool {
        !matches!(self, Ablation::NoPrompt | Ablation::NoSeg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub f_ir: Var,
    pub f_vis: Var,
    pub f_ref: Var,
    /// `proj(F_ir^p) + proj(F_vis^p)` over the active branches.
    pub delta: Option<Var>,
    pub f_final: Var,
    pub i_ref: Var,
    pub i_f: Var,
    pub m_ir: Option<Var>,
    pub m_vis: Option<Var>,
    pub i_seg: Var,
}

/// Plain-tensor results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub fused: Tensor,
    pub reference: Tensor,
    pub m_ir: Tensor,
    pub m_vis: Tensor,
    pub seg: Tensor,
}

#[derive(Clone, Debug)]
pub struct CtrlFuse {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub rpe_ir: RpeBranch,
    pub rpe_vis: RpeBranch,
    pub psfm_ir: Psfm,
    pub psfm_vis: Psfm,
    pub proj_ir: Conv2d,
    pub proj_vis: Conv2d,
    pub backend: SegBackend,
    pub perceptual: FrozenPerceptualNet,
}

impl CtrlFuse {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(config.seed()), true);
        let mut frozen = Init::new(ChaCha8Rng::seed_from_u64(config.frozen_seed), true);
        let c = config.channels();
        let (n, d, heads) = (config.num_queries, config.d_sam, config.heads);

        let backbone = Backbone::new(&mut store, &mut init, &config.backbone)?;
        let rpe_ir = RpeBranch::new(&mut store, &mut init, "rpe_ir", c, n, heads);
        let rpe_vis = RpeBranch::new(&mut store, &mut init, "rpe_vis", c, n, heads);
        let psfm_ir = Psfm::new(&mut store, &mut init, "psfm_ir", c, d, heads);
        let psfm_vis = Psfm::new(&mut store, &mut init, "psfm_vis", c, d, heads);
        let proj_ir = psfm::prompt_projection(&mut store, &mut init, "proj_ir", c, 2 * c);
        let proj_vis = psfm::prompt_projection(&mut store, &mut init, "proj_vis", c, 2 * c);
        let backend = SegBackend::new(&mut store, &mut frozen, c, d);
        let perceptual = FrozenPerceptualNet::new(&mut store, &mut frozen);
        Ok(Self {
            config,
            store,
            backbone,
            rpe_ir,
            rpe_vis,
            psfm_ir,
            psfm_vis,
            proj_ir,
            proj_vis,
            backend,
            perceptual,
        })
    }

    fn branch(&self, m: Modality) -> (&RpeBranch, &Psfm, &Conv2d) {
        match m {
            Modality::Ir => (&self.rpe_ir, &self.psfm_ir, &self.proj_ir),
            Modality::Vis => (&self.rpe_vis, &self.psfm_vis, &self.proj_vis),
        }
    }

    /// Full forward pass. `mask` is the `[1,H,W]` prompt; `alpha` scales the
    /// prompt-feature delta added onto the reference features.
    pub fn forward(
        &self,
        cx: &mut Ctx,
        ir: Var,
        vis: Var,
        mask: Var,
        alpha: f64,
        ablation: Ablation,
    ) -> Result<ForwardOutputs> {
        let is = cx.g.shape(ir).to_vec();
        if cx.g.shape(mask) != is.as_slice() {
            return shape_err(
                "forward",
                format!("mask {:?} for image {is:?}", cx.g.shape(mask)),
            );
        }
        let f_ir = self.backbone.ir.forward(cx, ir)?;
        let f_vis = self.backbone.vis.forward(cx, vis)?;
        let f_ref = reference_features(cx, f_ir, f_vis)?;
        let i_ref = self.backbone.decoder.forward(cx, f_ref)?;

        let mut out = ForwardOutputs {
            f_ir,
            f_vis,
            f_ref,
            delta: None,
            f_final: f_ref,
            i_ref,
            i_f: i_ref,
            m_ir: None,
            m_vis: None,
            i_seg: i_ref,
        };
        if ablation == Ablation::NoPrompt {
            out.i_seg = cx.g.constant(Tensor::zeros(&is));
            return Ok(out);
        }

        let grid = self.backend.encode(cx, i_ref)?;
        let exchange = ablation == Ablation::ExchangeSq;
        let mut delta: Option<Var> = None;
        for m in [Modality::Ir, Modality::Vis] {
            if !ablation.uses(m) {
                continue;
            }
            let (rpe, psfm, proj) = self.branch(m);
            let f_mod = if m == Modality::Ir { f_ir } else { f_vis };
            let tokens = rpe.forward(
                cx,
                mask,
                f_mod,
                f_ref,
                &self.backend.prompt_projection,
                exchange,
            )?;
            let pred = self.backend.mask_decode(cx, grid, tokens)?;
            let fp = psfm.forward(cx, f_mod, tokens, pred)?;
            let d = proj.forward(cx, fp)?;
            delta = Some(match delta {
                Some(acc) => cx.g.add(acc, d)?,
                None => d,
            });
            match m {
                Modality::Ir => out.m_ir = Some(pred),
                Modality::Vis => out.m_vis = Some(pred),
            }
        }
        out.i_seg = match (out.m_ir, out.m_vis) {
            (Some(a), Some(b)) => combine_masks(cx, a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => unreachable!("at least one branch is active"),
        };
        out.delta = delta;
        out.f_final = compose(cx, f_ref, delta, alpha)?;
        if out.f_final != f_ref {
            out.i_f = self.backbone.decoder.forward(cx, out.f_final)?;
        }
        Ok(out)
    }

    /// Training objective for one scene: forward at `α = 1` with `prompt`
    /// serving as both the prompt and the segmentation target.
    pub fn objective(
        &self,
        cx: &mut Ctx,
        pair: &ImagePair,
        prompt: &Tensor,
        ablation: Ablation,
    ) -> Result<(ForwardOutputs, LossTerms)> {
        let ir = cx.g.constant(pair.ir.clone());
        let vis = cx.g.constant(pair.vis.clone());
        let vis_y = cx.g.constant(pair.vis_luma());
        let mask = cx.g.constant(prompt.clone());
        let out = self.forward(cx, ir, vis, mask, 1.0, ablation)?;
        let preds: Vec<Var> = if ablation.supervises_masks() {
            out.m_ir.into_iter().chain(out.m_vis).collect()
        } else {
            Vec::new()
        };
        let terms = total_loss(
            cx,
            &self.perceptual,
            &LossInputs {
                i_f: out.i_f,
                i_ir: ir,
                i_vis_y: vis_y,
                i_seg: out.i_seg,
                seg_preds: &preds,
                seg_target: mask,
            },
        )?;
        Ok((out, terms))
    }

    /// Inference on plain tensors. A missing mask means an empty prompt with
    /// `α = 0`, which reproduces the reference fusion.
    pub fn infer(
        &self,
        ir: &Tensor,
        vis: &Tensor,
        mask: Option<&PromptMask>,
        alpha: f64,
    ) -> Result<Inference> {
        self.infer_with(ir, vis, mask, alpha, Ablation::None)
    }

    pub fn infer_with(
        &self,
        ir: &Tensor,
        vis: &Tensor,
        mask: Option<&PromptMask>,
        alpha: f64,
        ablation: Ablation,
    ) -> Result<Inference> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and ≥ 0, got {alpha}"
            )));
        }
        let pair = ImagePair::new(ir.clone(), vis.clone(), None)?;
        let (h, w) = (pair.height(), pair.width());
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return shape_err(
                "infer",
                format!("image size {h}x{w} must be divisible by 4"),
            );
        }
        let (mask, alpha) = match mask {
            Some(m) => (m.clone(), alpha),
            None => (PromptMask::empty(h, w), 0.0),
        };
        if mask.tensor().shape() != [1, h, w] {
            return shape_err(
                "infer",
                format!("mask {:?} for {h}x{w} images", mask.tensor().shape()),
            );
        }
        let mut cx = Ctx::inference(&self.store);
        let irv = cx.g.constant(pair.ir);
        let visv = cx.g.constant(pair.vis);
        let mv = cx.g.constant(mask.tensor().clone());
        let out = self.forward(&mut cx, irv, visv, mv, alpha, ablation)?;
        let get =
            |v: Option<Var>| v.map_or_else(|| Tensor::zeros(&[1, h, w]), |v| cx.g.value(v).clone());
        Ok(Inference {
            fused: cx.g.value(out.i_f).clone(),
            reference: cx.g.value(out.i_ref).clone(),
            m_ir: get(out.m_ir),
            m_vis: get(out.m_vis),
            seg: cx.g.value(out.i_seg).clone(),
        })
    }
}
