//! Flow-matching transformer head with dual-pathway conditioning.
//!
//! Per frame, the sequence carries three blocks: projected text embeddings,
//! connected visual latents, and image-latent tokens. Attention runs under
//! the block-causal mask from [`super::layout`], with one structural rule
//! on top: cross-frame attention reads the layer-0 embeddings of the source
//! tokens, not their evolving states. History frames therefore contribute
//! exactly their embedded latents as context, and nothing a history frame
//! attends to internally (in particular its own conditioning) can leak
//! forward. Perturbing a previous frame's visual latents moves current
//! targets by exactly zero.

use crate::codec::Connector;
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::params::{ParamSet, SharedTensor};
use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};

use super::layout::{build_mask_with, BlockKind, LayoutBlock, MaskOptions, SequenceLayout};

const SALT_DIT: u64 = 0x6469_7431; // "dit1"
const NORM_EPS: f64 = 1e-6;

/// Independent per-pathway conditioning dropout with a linear anneal from
/// the start rates to the end rates over `anneal_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutPolicy {
    pub p_text: f64,
    pub p_vis: f64,
    pub p_text_end: f64,
    pub p_vis_end: f64,
    pub anneal_steps: u64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            p_text: 0.5,
            p_vis: 0.1,
            p_text_end: 0.1,
            p_vis_end: 0.1,
            anneal_steps: 300,
        }
    }
}

impl DropoutPolicy {
    pub fn disabled() -> Self {
        Self {
            p_text: 0.0,
            p_vis: 0.0,
            p_text_end: 0.0,
            p_vis_end: 0.0,
            anneal_steps: 0,
        }
    }

    pub fn constant(p_text: f64, p_vis: f64) -> Self {
        Self {
            p_text,
            p_vis,
            p_text_end: p_text,
            p_vis_end: p_vis,
            anneal_steps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_text, self.p_vis, self.p_text_end, self.p_vis_end] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn rates_at(&self, step: u64) -> (f64, f64) {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            if self.anneal_steps == 0 {
                return (self.p_text, self.p_vis);
            }
            return (self.p_text_end, self.p_vis_end);
        }
        let a = step as f64 / self.anneal_steps as f64;
        (
            self.p_text + a * (self.p_text_end - self.p_text),
            self.p_vis + a * (self.p_vis_end - self.p_vis),
        )
    }

    /// One per-sequence decision per pathway, sampled independently.
    pub fn sample(&self, step: u64, rng: &mut DetRng) -> PathwayDrop {
        let (pt, pv) = self.rates_at(step);
        PathwayDrop {
            drop_text: rng.uniform() < pt,
            drop_vis: rng.uniform() < pv,
        }
    }
}

/// Outcome of conditioning dropout for one sequence. A dropped pathway is
/// replaced wholesale by the head's learned null embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PathwayDrop {
    pub drop_text: bool,
    pub drop_vis: bool,
}

impl PathwayDrop {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn unconditional() -> Self {
        Self {
            drop_text: true,
            drop_vis: true,
        }
    }
}

/// Frozen conditioning inputs for one frame, produced by the backbone.
#[derive(Debug, Clone)]
pub struct FrameConditioning {
    /// [len x text_dim] final-layer text states of the frame's text block.
    pub text_emb: Tensor,
    /// [N x visual_dim] distilled visual latents for the frame.
    pub visual_latents: Tensor,
}

/// Everything the head needs about one sequence: per-frame conditioning,
/// per-frame clean image latents, and the oracle classes for evaluation.
#[derive(Debug, Clone)]
pub struct SequenceConditioning {
    pub frames: Vec<FrameConditioning>,
    /// [Z x latent_dim] clean latents per frame.
    pub image_latents: Vec<Tensor>,
    pub classes: Vec<u32>,
}

impl SequenceConditioning {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Per-frame image-token input for one forward pass.
#[derive(Debug, Clone)]
pub struct FrameInput {
    /// [Z x latent_dim] token values entering the stream: the clean
    /// latents for context frames, the noised interpolant for targets.
    pub tokens: Tensor,
    /// Interpolation time of those tokens: 1 for clean context.
    pub t: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone)]
pub struct DiffusionHeadConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Codec latent channels per image token.
    pub latent_dim: usize,
    /// Backbone hidden size feeding the text pathway.
    pub text_dim: usize,
    pub max_frames: usize,
    /// Image-latent tokens per frame.
    pub img_tokens: usize,
    /// Visual-latent tokens per frame (query budget).
    pub vl_tokens: usize,
    /// Sinusoidal time feature pairs.
    pub time_feats: usize,
    pub mlp_mult: usize,
    pub mask_options: MaskOptions,
}

impl Default for DiffusionHeadConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 4,
            latent_dim: 16,
            text_dim: 64,
            max_frames: 8,
            img_tokens: 16,
            vl_tokens: 16,
            time_feats: 8,
            mlp_mult: 4,
            mask_options: MaskOptions::default(),
        }
    }
}

impl DiffusionHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("need at least one layer".into()));
        }
        Ok(())
    }
}

struct LayerWeights {
    wq: SharedTensor,
    wk: SharedTensor,
    wv: SharedTensor,
    wo: SharedTensor,
    w1: SharedTensor,
    w2: SharedTensor,
}

/// The trainable generator.
pub struct DiffusionHead {
    cfg: DiffusionHeadConfig,
    text_proj: SharedTensor,
    img_proj: SharedTensor,
    time_proj: SharedTensor,
    img_pos: SharedTensor,
    vl_pos: SharedTensor,
    frame_emb: SharedTensor,
    null_text: SharedTensor,
    null_vl: SharedTensor,
    layers: Vec<LayerWeights>,
    out_proj: SharedTensor,
    set: ParamSet,
}

impl DiffusionHead {
    pub fn new(cfg: DiffusionHeadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = DetRng::derive(seed, SALT_DIT);
        let w = cfg.width;
        let mut set = ParamSet::new();
        let mat = |set: &mut ParamSet, name: String, r: usize, c: usize, rng: &mut DetRng| {
            set.register(&name, Tensor::randn(vec![r, c], 1.0 / (r as f64).sqrt(), rng))
        };

        let text_proj = mat(&mut set, "dit.text_proj".into(), cfg.text_dim, w, &mut rng);
        let img_proj = mat(&mut set, "dit.img_proj".into(), cfg.latent_dim, w, &mut rng);
        let time_proj = mat(&mut set, "dit.time_proj".into(), 2 * cfg.time_feats, w, &mut rng);
        let img_pos = set.register(
            "dit.img_pos",
            Tensor::randn(vec![cfg.img_tokens, w], 0.02, &mut rng),
        );
        let vl_pos = set.register(
            "dit.vl_pos",
            Tensor::randn(vec![cfg.vl_tokens, w], 0.02, &mut rng),
        );
        let frame_emb = set.register(
            "dit.frame_emb",
            Tensor::randn(vec![cfg.max_frames, w], 0.02, &mut rng),
        );
        let null_text = set.register("dit.null_text", Tensor::randn(vec![1, w], 0.02, &mut rng));
        let null_vl = set.register("dit.null_vl", Tensor::randn(vec![1, w], 0.02, &mut rng));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerWeights {
                wq: mat(&mut set, format!("dit.layer{l}.wq"), w, w, &mut rng),
                wk: mat(&mut set, format!("dit.layer{l}.wk"), w, w, &mut rng),
                wv: mat(&mut set, format!("dit.layer{l}.wv"), w, w, &mut rng),
                wo: mat(&mut set, format!("dit.layer{l}.wo"), w, w, &mut rng),
                w1: mat(&mut set, format!("dit.layer{l}.w1"), w, w * cfg.mlp_mult, &mut rng),
                w2: mat(&mut set, format!("dit.layer{l}.w2"), w * cfg.mlp_mult, w, &mut rng),
            });
        }
        let out_proj = mat(&mut set, "dit.out".into(), w, cfg.latent_dim, &mut rng);

        Ok(Self {
            cfg,
            text_proj,
            img_proj,
            time_proj,
            img_pos,
            vl_pos,
            frame_emb,
            null_text,
            null_vl,
            layers,
            out_proj,
            set,
        })
    }

    pub fn config(&self) -> &DiffusionHeadConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    fn time_features(&self, t: f64) -> Vec<f64> {
        let f = self.cfg.time_feats;
        let mut out = Vec::with_capacity(2 * f);
        for k in 0..f {
            let w = std::f64::consts::PI * (1 << k) as f64;
            out.push((w * t).sin());
            out.push((w * t).cos());
        }
        out
    }

    /// Run the head over a full interleaved item. `frame_inputs[f]` carries
    /// the image-token values and time for frame f+1. Returns the predicted
    /// velocities at every target frame, in frame order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        connector: &Connector,
        cond: &SequenceConditioning,
        frame_inputs: &[FrameInput],
        drop: PathwayDrop,
    ) -> Result<Vec<(usize, Var)>> {
        let m = cond.n_frames();
        if m == 0 || frame_inputs.len() != m {
            return Err(Error::Contract(format!(
                "conditioning has {m} frames, inputs have {}",
                frame_inputs.len()
            )));
        }
        if m > self.cfg.max_frames {
            return Err(Error::Capacity {
                required: m,
                limit: self.cfg.max_frames,
            });
        }
        if connector.out_dim() != self.cfg.width {
            return Err(Error::Dimension {
                op: "head_forward",
                left: vec![connector.out_dim()],
                right: vec![self.cfg.width],
            });
        }

        let text_proj = tape.leaf(&self.text_proj);
        let img_proj = tape.leaf(&self.img_proj);
        let time_proj = tape.leaf(&self.time_proj);
        let img_pos = tape.leaf(&self.img_pos);
        let vl_pos = tape.leaf(&self.vl_pos);
        let frame_emb = tape.leaf(&self.frame_emb);
        let null_text = tape.leaf(&self.null_text);
        let null_vl = tape.leaf(&self.null_vl);

        // Layer-0 embeddings and the layout, frame by frame.
        let mut blocks = Vec::with_capacity(3 * m);
        let mut parts: Vec<Var> = Vec::with_capacity(3 * m);
        for (fi, (fc, inp)) in cond.frames.iter().zip(frame_inputs).enumerate() {
            let frame = fi + 1;
            let t_len = fc.text_emb.rows();
            let frame_row = tape.slice_rows(frame_emb, fi, 1)?;

            // Text pathway.
            let text = if drop.drop_text {
                tape.repeat_rows(null_text, t_len)?
            } else {
                let emb = tape.constant(&fc.text_emb);
                let proj = tape.matmul(emb, text_proj)?;
                let fr = tape.repeat_rows(frame_row, t_len)?;
                tape.add(proj, fr)?
            };
            parts.push(text);
            blocks.push(LayoutBlock {
                kind: BlockKind::Text,
                frame,
                len: t_len,
                is_target: false,
            });

            // Visual-latent pathway through the connector.
            let n_vl = fc.visual_latents.rows();
            let vis = if drop.drop_vis {
                tape.repeat_rows(null_vl, n_vl)?
            } else {
                let vl = tape.constant(&fc.visual_latents);
                let connected = connector.apply(tape, vl)?;
                let pos = tape.slice_rows(vl_pos, 0, n_vl)?;
                let with_pos = tape.add(connected, pos)?;
                let fr = tape.repeat_rows(frame_row, n_vl)?;
                tape.add(with_pos, fr)?
            };
            parts.push(vis);
            blocks.push(LayoutBlock {
                kind: BlockKind::VisualLatent,
                frame,
                len: n_vl,
                is_target: false,
            });

            // Image-latent tokens with time conditioning.
            let z = inp.tokens.rows();
            let toks = tape.constant(&inp.tokens);
            let projected = tape.matmul(toks, img_proj)?;
            let pos = tape.slice_rows(img_pos, 0, z)?;
            let with_pos = tape.add(projected, pos)?;
            let tf = tape.constant_from(vec![1, 2 * self.cfg.time_feats], self.time_features(inp.t))?;
            let time_row = tape.matmul(tf, time_proj)?;
            let time_rows = tape.repeat_rows(time_row, z)?;
            let with_time = tape.add(with_pos, time_rows)?;
            let fr = tape.repeat_rows(frame_row, z)?;
            parts.push(tape.add(with_time, fr)?);
            blocks.push(LayoutBlock {
                kind: BlockKind::ImageLatent,
                frame,
                len: z,
                is_target: inp.is_target,
            });
        }
        let layout = SequenceLayout::new(blocks)?;
        let mask = build_mask_with(&layout, self.cfg.mask_options)?;
        let s0 = tape.concat_rows(&parts)?;

        // Same-frame indicator over token pairs.
        let info = layout.token_info();
        let total = info.len();
        let mut same = vec![0.0; total * total];
        for i in 0..total {
            for j in 0..total {
                if info[i].1 == info[j].1 {
                    same[i * total + j] = 1.0;
                }
            }
        }
        let same_f = tape.constant_from(vec![total, total], same.clone())?;
        let cross_f = tape.constant_from(
            vec![total, total],
            same.iter().map(|v| 1.0 - v).collect(),
        )?;

        // History context is read through the layer-0 embeddings at every
        // layer, so nothing computed inside another frame can leak across.
        let n0 = tape.rms_norm_rows(s0, NORM_EPS)?;
        let mut x = s0;
        for layer in &self.layers {
            let normed = tape.rms_norm_rows(x, NORM_EPS)?;
            let attn = self.dual_attention(tape, normed, n0, &mask, same_f, cross_f, layer)?;
            x = tape.add(x, attn)?;
            let normed2 = tape.rms_norm_rows(x, NORM_EPS)?;
            let w1 = tape.leaf(&layer.w1);
            let w2 = tape.leaf(&layer.w2);
            let h = tape.matmul(normed2, w1)?;
            let h = tape.tanh(h)?;
            let mlp = tape.matmul(h, w2)?;
            x = tape.add(x, mlp)?;
        }
        let final_norm = tape.rms_norm_rows(x, NORM_EPS)?;

        let out_proj = tape.leaf(&self.out_proj);
        let ranges = layout.block_ranges();
        let mut velocities = Vec::new();
        for (block, &(start, len)) in layout.blocks.iter().zip(&ranges) {
            if block.kind == BlockKind::ImageLatent && block.is_target {
                let rows = tape.slice_rows(final_norm, start, len)?;
                velocities.push((block.frame, tape.matmul(rows, out_proj)?));
            }
        }
        Ok(velocities)
    }

    #[allow(clippy::too_many_arguments)]
    fn dual_attention(
        &self,
        tape: &mut Tape,
        normed: Var,
        normed0: Var,
        mask: &MaskMatrix,
        same_f: Var,
        cross_f: Var,
        layer: &LayerWeights,
    ) -> Result<Var> {
        let w = self.cfg.width;
        let heads = self.cfg.heads;
        let dh = w / heads;
        let wq = tape.leaf(&layer.wq);
        let wk = tape.leaf(&layer.wk);
        let wv = tape.leaf(&layer.wv);
        let q = tape.matmul(normed, wq)?;
        let k_same = tape.matmul(normed, wk)?;
        let v_same = tape.matmul(normed, wv)?;
        let k_hist = tape.matmul(normed0, wk)?;
        let v_hist = tape.matmul(normed0, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let ks = tape.slice_cols(k_same, h * dh, dh)?;
            let vs = tape.slice_cols(v_same, h * dh, dh)?;
            let kh = tape.slice_cols(k_hist, h * dh, dh)?;
            let vh = tape.slice_cols(v_hist, h * dh, dh)?;

            let kst = tape.transpose(ks)?;
            let kht = tape.transpose(kh)?;
            let s_same = tape.matmul(qh, kst)?;
            let s_hist = tape.matmul(qh, kht)?;
            let sel_same = tape.mul(s_same, same_f)?;
            let sel_hist = tape.mul(s_hist, cross_f)?;
            let combined = tape.add(sel_same, sel_hist)?;
            let scaled = tape.scale(combined, 1.0 / (dh as f64).sqrt())?;
            let probs = tape.softmax_rows(scaled, Some(mask))?;

            let p_same = tape.mul(probs, same_f)?;
            let p_hist = tape.mul(probs, cross_f)?;
            let o_same = tape.matmul(p_same, vs)?;
            let o_hist = tape.matmul(p_hist, vh)?;
            outs.push(tape.add(o_same, o_hist)?);
        }
        let merged = tape.concat_cols(&outs)?;
        let wo = tape.leaf(&layer.wo);
        tape.matmul(merged, wo)
    }
}
