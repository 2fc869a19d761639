//! Frozen segmentation backend: a strided conv image encoder, a prompt
//! projection, and a two-round token/grid cross-attention mask decoder.
//! Weights are seeded once and never trained; gradients still pass through.

use crate::error::{shape_err, Result};
use crate::nn::{Attention, Conv2d, ConvSpec, Ctx, Init, Linear, ParamStore, LEAKY_SLOPE};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct SegBackend {
    pub encoder: [Conv2d; 3],
    pub prompt_projection: Linear,
    pub token_attn: Attention,
    pub grid_attn: Attention,
    pub hyper: Linear,
    dim: usize,
}

impl SegBackend {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prompt_channels: usize,
        dim: usize,
    ) -> Self {
        let conv = |store: &mut ParamStore, init: &mut Init, i: usize, spec: ConvSpec| {
            Conv2d::new(
                store,
                init,
                &format!("backend.enc{i}"),
                spec,
                LEAKY_SLOPE,
                true,
            )
        };
        Self {
            encoder: [
                conv(store, init, 0, ConvSpec::new(1, 8, 3).stride(2)),
                conv(store, init, 1, ConvSpec::new(8, 16, 3).stride(2)),
                conv(store, init, 2, ConvSpec::new(16, dim, 3)),
            ],
            prompt_projection: Linear::new(
                store,
                init,
                "backend.prompt_proj",
                prompt_channels,
                dim,
                false,
                true,
            ),
            token_attn: Attention::new(store, init, "backend.token_attn", dim, dim, dim, 1, true),
            grid_attn: Attention::new(store, init, "backend.grid_attn", dim, dim, dim, 1, true),
            hyper: Linear::new(store, init, "backend.hyper", dim, dim, false, true),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[1,H,W]` image to a `[D, H/4, W/4]` embedding grid.
    pub fn encode(&self, cx: &mut Ctx, image: Var) -> Result<Var> {
        let s = cx.g.shape(image);
        if s.len() != 3 || s[0] != 1 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return shape_err(
                "backend_encode",
                format!("need [1,H,W] with H,W divisible by 4, got {s:?}"),
            );
        }
        let mut x = image;
        for conv in &self.encoder {
            let y = conv.forward(cx, x)?;
            x = cx.g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(x)
    }

    /// Soft mask `[1, 4h, 4w]` from a `[D,h,w]` grid and `[N,D]` prompt tokens.
    pub fn mask_decode(&self, cx: &mut Ctx, grid: Var, tokens: Var) -> Result<Var> {
        let gs = cx.g.shape(grid).to_vec();
        let ts = cx.g.shape(tokens).to_vec();
        if gs.len() != 3 || gs[0] != self.dim || ts.len() != 2 || ts[1] != self.dim || ts[0] == 0 {
            return shape_err("mask_decode", format!("grid {gs:?}, tokens {ts:?}"));
        }
        let (h, w) = (gs[1], gs[2]);
        let g = cx.g.flatten_spatial(grid)?;
        let a = self.token_attn.forward(cx, tokens, g)?;
        let t1 = cx.g.add(tokens, a)?;
        let b = self.grid_attn.forward(cx, g, t1)?;
        let g1 = cx.g.add(g, b)?;

        let n = ts[0];
        let avg = cx.g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let pooled = cx.g.matmul(avg, t1)?;
        let m = self.hyper.forward(cx, pooled)?;
        let mt = cx.g.transpose(m)?;
        let logits = cx.g.matmul(g1, mt)?;
        let logits = cx.g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let map = cx.g.view_spatial(logits, h, w)?;
        let up = cx.g.upsample_nearest(map, 4)?;
        Ok(cx.g.sigmoid(up))
    }
}

/// Pixelwise maximum of the two branch masks.
pub fn combine_masks(cx: &mut Ctx, m_ir: Var, m_vis: Var) -> Result<Var> {
    cx.g.max2(m_ir, m_vis)
}
