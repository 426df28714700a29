//! Block layouts and the block-causal diffusion-forcing attention mask.
//!
//! Image-latent tokens of frame f may attend: image-latent tokens of
//! earlier frames (dense history context), the text and visual-latent
//! tokens of their own frame (dual-pathway conditioning), and each other
//! bidirectionally. They may not see conditioning of any other frame, and
//! in particular the visual-latent tokens of earlier frames stay outside
//! the attention context. Conditioning tokens only see their own frame's
//! conditioning block.

use crate::data::InterleavedSequence;
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Text,
    VisualLatent,
    ImageLatent,
}

/// One contiguous run of same-kind tokens. `frame` is the 1-based image
/// ordinal the block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutBlock {
    pub kind: BlockKind,
    pub frame: usize,
    pub len: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub blocks: Vec<LayoutBlock>,
}

impl SequenceLayout {
    pub fn new(blocks: Vec<LayoutBlock>) -> Result<Self> {
        let layout = Self { blocks };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Topology("empty layout".into()));
        }
        let mut prev_frame = 0usize;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.len == 0 {
                return Err(Error::Topology(format!("block {i} has zero tokens")));
            }
            if b.frame == 0 {
                return Err(Error::Topology(format!("block {i} has frame index 0")));
            }
            if b.frame < prev_frame {
                return Err(Error::Topology(format!(
                    "frame index decreases at block {i}"
                )));
            }
            if b.is_target && b.kind != BlockKind::ImageLatent {
                return Err(Error::Topology(format!(
                    "conditioning block {i} marked as generation target"
                )));
            }
            prev_frame = b.frame;
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }

    /// (kind, frame, is_target) of every token position.
    pub fn token_info(&self) -> Vec<(BlockKind, usize, bool)> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for b in &self.blocks {
            for _ in 0..b.len {
                out.push((b.kind, b.frame, b.is_target));
            }
        }
        out
    }

    /// Token range (start, len) of each block, in order.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut cursor = 0;
        for b in &self.blocks {
            out.push((cursor, b.len));
            cursor += b.len;
        }
        out
    }

    /// Fraction of image-latent tokens that are generation targets.
    pub fn supervised_fraction(&self) -> f64 {
        let mut supervised = 0usize;
        let mut total = 0usize;
        for b in &self.blocks {
            if b.kind == BlockKind::ImageLatent {
                total += b.len;
                if b.is_target {
                    supervised += b.len;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            supervised as f64 / total as f64
        }
    }
}

/// Mask-building options. The defaults realize the strict topology; the
/// flag widens conditioning rows to see history image latents, which stays
/// off because the frame-local reading is the one the mask oracle encodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaskOptions {
    pub cond_attends_history: bool,
}

pub fn build_mask(layout: &SequenceLayout) -> Result<MaskMatrix> {
    build_mask_with(layout, MaskOptions::default())
}

pub fn build_mask_with(layout: &SequenceLayout, opts: MaskOptions) -> Result<MaskMatrix> {
    layout.validate()?;
    let info = layout.token_info();
    let t = info.len();
    let mut mask = MaskMatrix::forbid_all(t, t);
    for (i, &(ki, fi, _)) in info.iter().enumerate() {
        for (j, &(kj, fj, _)) in info.iter().enumerate() {
            let ok = match ki {
                BlockKind::ImageLatent => match kj {
                    BlockKind::ImageLatent => fj <= fi,
                    BlockKind::Text | BlockKind::VisualLatent => fj == fi,
                },
                BlockKind::Text | BlockKind::VisualLatent => match kj {
                    BlockKind::Text | BlockKind::VisualLatent => fj == fi,
                    BlockKind::ImageLatent => opts.cond_attends_history && fj < fi,
                },
            };
            if ok {
                mask.set(i, j, true);
            }
        }
    }
    Ok(mask)
}

/// Which images to supervise as diffusion targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Every image except the leading one (the whole sequence when it has
    /// a single image).
    Forcing,
    /// Only the final image; everything earlier is pure context.
    LastOnly,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forcing" => Ok(TargetMode::Forcing),
            "last-only" | "last_only" => Ok(TargetMode::LastOnly),
            other => Err(Error::Config(format!("unknown target mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetMode::Forcing => write!(f, "forcing"),
            TargetMode::LastOnly => write!(f, "last-only"),
        }
    }
}

/// 1-based frame ordinals of the supervised images.
pub fn select_targets(seq: &InterleavedSequence, mode: TargetMode) -> Vec<usize> {
    let m = seq.image_count();
    if m == 0 {
        return Vec::new();
    }
    match mode {
        TargetMode::Forcing => {
            if m == 1 {
                vec![1]
            } else {
                (2..=m).collect()
            }
        }
        TargetMode::LastOnly => vec![m],
    }
}

/// Supervised share of image-latent tokens under the given mode, assuming
/// the per-image latent token count is uniform: (M-1)/M for forcing with
/// M >= 2 images, 1/M for last-only.
pub fn supervised_token_fraction(seq: &InterleavedSequence, mode: TargetMode) -> f64 {
    let m = seq.image_count();
    if m == 0 {
        return 0.0;
    }
    let supervised = select_targets(seq, mode).len();
    supervised as f64 / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_sequence_with_images, GenConfig};

    pub(super) fn frame(f: usize, text: usize, vl: usize, img: usize, target: bool) -> Vec<LayoutBlock> {
        vec![
            LayoutBlock { kind: BlockKind::Text, frame: f, len: text, is_target: false },
            LayoutBlock { kind: BlockKind::VisualLatent, frame: f, len: vl, is_target: false },
            LayoutBlock { kind: BlockKind::ImageLatent, frame: f, len: img, is_target: target },
        ]
    }

    #[test]
    fn single_frame_image_rows_see_own_frame_only() {
        let layout = SequenceLayout::new(frame(1, 2, 2, 3, true)).unwrap();
        let mask = build_mask(&layout).unwrap();
        let info = layout.token_info();
        for (i, &(ki, _, _)) in info.iter().enumerate() {
            if ki != BlockKind::ImageLatent {
                continue;
            }
            for j in 0..info.len() {
                assert!(mask.permit(i, j), "image row {i} must reach {j}");
            }
        }
    }

    #[test]
    fn two_frames_history_rules() {
        let mut blocks = frame(1, 2, 2, 2, false);
        blocks.extend(frame(2, 2, 2, 2, true));
        let layout = SequenceLayout::new(blocks).unwrap();
        let mask = build_mask(&layout).unwrap();
        let info = layout.token_info();
        let f2_img: Vec<usize> = info
            .iter()
            .enumerate()
            .filter(|(_, &(k, f, _))| k == BlockKind::ImageLatent && f == 2)
            .map(|(i, _)| i)
            .collect();
        for &i in &f2_img {
            for (j, &(kj, fj, _)) in info.iter().enumerate() {
                let expected = match (kj, fj) {
                    (BlockKind::ImageLatent, 1) => true,
                    (BlockKind::ImageLatent, 2) => true,
                    (BlockKind::Text, 2) | (BlockKind::VisualLatent, 2) => true,
                    // frame-1 text and VL are excluded
                    _ => false,
                };
                assert_eq!(mask.permit(i, j), expected, "row {i} col {j}");
            }
        }
    }

    #[test]
    fn leading_frame_matches_single_frame_mask() {
        let single = SequenceLayout::new(frame(1, 3, 2, 4, true)).unwrap();
        let mut blocks = frame(1, 3, 2, 4, true);
        blocks.extend(frame(2, 1, 2, 4, true));
        let double = SequenceLayout::new(blocks).unwrap();
        let m1 = build_mask(&single).unwrap();
        let m2 = build_mask(&double).unwrap();
        let t1 = single.total_tokens();
        for i in 0..t1 {
            for j in 0..t1 {
                assert_eq!(m1.permit(i, j), m2.permit(i, j));
            }
        }
    }

    #[test]
    fn malformed_layouts_rejected() {
        // decreasing frame
        let mut blocks = frame(2, 1, 1, 1, false);
        blocks.extend(frame(1, 1, 1, 1, false));
        assert!(SequenceLayout::new(blocks).is_err());
        // zero-length block
        assert!(SequenceLayout::new(vec![LayoutBlock {
            kind: BlockKind::Text,
            frame: 1,
            len: 0,
            is_target: false
        }])
        .is_err());
        // target on conditioning
        assert!(SequenceLayout::new(vec![LayoutBlock {
            kind: BlockKind::Text,
            frame: 1,
            len: 1,
            is_target: true
        }])
        .is_err());
    }

    #[test]
    fn select_targets_quoted_rules() {
        let cfg = GenConfig { max_blocks: 16, ..GenConfig::default() };
        let four = generate_sequence_with_images(0, &cfg, 4).unwrap();
        assert_eq!(select_targets(&four, TargetMode::Forcing), vec![2, 3, 4]);
        assert_eq!(select_targets(&four, TargetMode::LastOnly), vec![4]);
        let one = generate_sequence_with_images(0, &cfg, 1).unwrap();
        assert_eq!(select_targets(&one, TargetMode::Forcing), vec![1]);
        assert_eq!(select_targets(&one, TargetMode::LastOnly), vec![1]);
    }

    #[test]
    fn token_fractions_count() {
        let cfg = GenConfig { max_blocks: 16, ..GenConfig::default() };
        let four = generate_sequence_with_images(0, &cfg, 4).unwrap();
        assert_eq!(supervised_token_fraction(&four, TargetMode::Forcing), 0.75);
        assert_eq!(supervised_token_fraction(&four, TargetMode::LastOnly), 0.25);
    }

    #[test]
    fn fraction_matches_layout_enumeration() {
        // Against the token-enumeration route over random layouts.
        let mut rng = crate::rng::DetRng::new(12);
        for _ in 0..200 {
            let frames = 1 + rng.below(4);
            let mode = if rng.below(2) == 0 { TargetMode::Forcing } else { TargetMode::LastOnly };
            let z = 1 + rng.below(6);
            let cfg = GenConfig { max_blocks: 16, ..GenConfig::default() };
            let seq = generate_sequence_with_images(rng.below(1000) as u64, &cfg, frames).unwrap();
            let targets = select_targets(&seq, mode);
            let mut blocks = Vec::new();
            for f in 1..=frames {
                blocks.extend(frame(f, 1 + rng.below(4), 2, z, targets.contains(&f)));
            }
            let layout = SequenceLayout::new(blocks).unwrap();
            assert_eq!(
                layout.supervised_fraction(),
                supervised_token_fraction(&seq, mode),
                "frames {frames} mode {mode:?}"
            );
        }
    }
}
