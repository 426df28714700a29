//! Synthetic interleaved text-image sequences and the on-disk dataset format.
//!
//! Sequences alternate text and image blocks. Each text block names the
//! pattern class of the image that follows it through a fixed token
//! template, and images are procedurally rendered from that class, so
//! text-image alignment has an exact oracle. With the default configuration
//! (no pixel noise, no "same again" prompts) a rendered image is a pure
//! function of its text block's template tokens.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;

/// Token template vocabulary layout. Ids below `CLASS_TOKEN_BASE` are
/// reserved; class words occupy `CLASS_TOKEN_BASE..CLASS_TOKEN_BASE+n_classes`
/// and everything above is filler chatter.
pub const TOK_SHOW: u32 = 1;
/// Sentinel the backbone sees in place of image pixels.
pub const TOK_IMAGE: u32 = 2;
/// "Render the same class as the previous image" prompt word.
pub const TOK_SAME: u32 = 3;
pub const CLASS_TOKEN_BASE: u32 = 4;

const MAGIC: &[u8; 4] = b"MMIL";
const VERSION: u32 = 1;

/// Generation parameters for the synthetic corpus.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub vocab: u32,
    pub image_size: usize,
    pub n_classes: u32,
    pub max_text_len: usize,
    pub max_blocks: usize,
    /// Probability that a non-leading image re-uses the previous class via
    /// the SAME token instead of naming one.
    pub p_same: f64,
    /// Upper bound of per-sequence additive pixel noise; 0 keeps images a
    /// pure function of their template tokens.
    pub noise_max: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            image_size: 16,
            n_classes: 8,
            max_text_len: 6,
            max_blocks: 8,
            p_same: 0.0,
            noise_max: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < CLASS_TOKEN_BASE + self.n_classes {
            return Err(Error::Config(format!(
                "vocab {} too small for {} classes",
                self.vocab, self.n_classes
            )));
        }
        if self.n_classes == 0 || self.n_classes > 8 {
            return Err(Error::Config("n_classes must be in 1..=8".into()));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("template needs at least 2 text tokens".into()));
        }
        if self.max_blocks < 2 {
            return Err(Error::Config("need room for at least one text+image pair".into()));
        }
        if !(0.0..=1.0).contains(&self.p_same) || !(0.0..=1.0).contains(&self.noise_max) {
            return Err(Error::Config("p_same/noise_max outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn max_images(&self) -> usize {
        self.max_blocks / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextBlock {
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBlock {
    /// [1 x H x W] pixels in [0,1]. Values are snapped through f32 so the
    /// f32 file payload round-trips bit-exactly.
    pub pixels: Tensor,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Text(TextBlock),
    Image(ImageBlock),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub blocks: Vec<Block>,
}

/// What a text template asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prompt {
    Class(u32),
    SamePrevious,
}

impl InterleavedSequence {
    pub fn image_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| matches!(b, Block::Image(_)))
            .count()
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageBlock> {
        self.blocks.iter().filter_map(|b| match b {
            Block::Image(img) => Some(img),
            Block::Text(_) => None,
        })
    }

    /// Image classes in order.
    pub fn classes(&self) -> Vec<u32> {
        self.images().map(|img| img.class_id).collect()
    }

    pub fn validate(&self, cfg: &GenConfig) -> Result<()> {
        if self.blocks.len() > cfg.max_blocks {
            return Err(Error::Contract(format!(
                "{} blocks exceed max {}",
                self.blocks.len(),
                cfg.max_blocks
            )));
        }
        if !matches!(self.blocks.first(), Some(Block::Text(_))) {
            return Err(Error::Contract("first block must be text".into()));
        }
        if self.image_count() == 0 {
            return Err(Error::Contract("sequence needs at least one image".into()));
        }
        for block in &self.blocks {
            match block {
                Block::Text(t) => {
                    if t.tokens.is_empty() || t.tokens.len() > cfg.max_text_len {
                        return Err(Error::Contract("text block length out of range".into()));
                    }
                    if t.tokens.iter().any(|&id| id >= cfg.vocab) {
                        return Err(Error::Contract("token id out of vocabulary".into()));
                    }
                }
                Block::Image(img) => {
                    let s = cfg.image_size;
                    if img.pixels.shape() != [1, s, s] {
                        return Err(Error::Contract("image dims differ from config".into()));
                    }
                    if img.pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                        return Err(Error::Contract("pixel outside [0,1]".into()));
                    }
                    if img.class_id >= cfg.n_classes {
                        return Err(Error::Contract("class id out of range".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Render the deterministic pattern for a class: oriented bars, a disk, or
/// a checkerboard, each in two position/scale variants. Pure in (class, size).
pub fn render_pattern(class_id: u32, size: usize) -> Tensor {
    let kind = class_id % 4;
    let variant = (class_id / 4) as usize;
    let s = size;
    let mut px = vec![0.0f64; s * s];
    match kind {
        0 => {
            // horizontal bar
            let th = (s / 8).max(1);
            let row0 = if variant == 0 { s / 4 } else { (3 * s) / 4 - th };
            for y in row0..(row0 + th).min(s) {
                for x in 0..s {
                    px[y * s + x] = 1.0;
                }
            }
        }
        1 => {
            // vertical bar
            let th = (s / 8).max(1);
            let col0 = if variant == 0 { s / 4 } else { (3 * s) / 4 - th };
            for y in 0..s {
                for x in col0..(col0 + th).min(s) {
                    px[y * s + x] = 1.0;
                }
            }
        }
        2 => {
            // soft-edged disk
            let c = (s as f64 - 1.0) / 2.0;
            let r = s as f64 / 5.0 + variant as f64 * s as f64 / 6.0;
            for y in 0..s {
                for x in 0..s {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    px[y * s + x] = (r + 0.5 - d).clamp(0.0, 1.0);
                }
            }
        }
        _ => {
            // checkerboard
            let cell = 2 * (variant + 1);
            for y in 0..s {
                for x in 0..s {
                    px[y * s + x] = ((x / cell + y / cell) % 2) as f64;
                }
            }
        }
    }
    snap_f32(&mut px);
    Tensor::from_vec(vec![1, s, s], px).expect("pattern is finite")
}

/// Snap values through f32 so the dataset file's f32 payload round-trips
/// without losing bits.
fn snap_f32(data: &mut [f64]) {
    for v in data.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Decode a text template. Returns `None` when the block does not follow
/// the template (malformed prompts never occur in generated data).
pub fn decode_template(tokens: &[u32]) -> Option<Prompt> {
    if tokens.len() < 2 || tokens[0] != TOK_SHOW {
        return None;
    }
    match tokens[1] {
        TOK_SAME => Some(Prompt::SamePrevious),
        t if t >= CLASS_TOKEN_BASE => Some(Prompt::Class(t - CLASS_TOKEN_BASE)),
        _ => None,
    }
}

/// Oracle: resolve the class of every image from the text templates alone,
/// walking the sequence so SAME prompts inherit the previous class.
pub fn resolve_classes(seq: &InterleavedSequence) -> Result<Vec<u32>> {
    let mut classes = Vec::new();
    let mut pending: Option<Prompt> = None;
    for block in &seq.blocks {
        match block {
            Block::Text(t) => {
                if let Some(p) = decode_template(&t.tokens) {
                    pending = Some(p);
                }
            }
            Block::Image(_) => {
                let prompt = pending.take().ok_or_else(|| {
                    Error::Contract("image without a preceding template".into())
                })?;
                let class = match prompt {
                    Prompt::Class(c) => c,
                    Prompt::SamePrevious => *classes.last().ok_or_else(|| {
                        Error::Contract("SAME prompt before any image".into())
                    })?,
                };
                classes.push(class);
            }
        }
    }
    Ok(classes)
}

/// Generate a sequence with a seeded number of images in
/// [1, cfg.max_images()].
pub fn generate_sequence(seed: u64, cfg: &GenConfig) -> Result<InterleavedSequence> {
    let mut rng = DetRng::derive(seed, data_salt());
    let n_images = 1 + rng.below(cfg.max_images());
    generate_with(&mut rng, cfg, n_images)
}

/// Generate a sequence with exactly `n_images` text+image pairs.
pub fn generate_sequence_with_images(
    seed: u64,
    cfg: &GenConfig,
    n_images: usize,
) -> Result<InterleavedSequence> {
    let mut rng = DetRng::derive(seed, data_salt());
    rng.below(cfg.max_images()); // keep streams aligned with generate_sequence
    generate_with(&mut rng, cfg, n_images)
}

fn data_salt() -> u64 {
    0x6d6d_696c // "mmil"
}

fn generate_with(rng: &mut DetRng, cfg: &GenConfig, n_images: usize) -> Result<InterleavedSequence> {
    cfg.validate()?;
    if n_images == 0 || 2 * n_images > cfg.max_blocks {
        return Err(Error::Config(format!(
            "{n_images} images do not fit max_blocks {}",
            cfg.max_blocks
        )));
    }
    let noise_level = if cfg.noise_max > 0.0 {
        rng.uniform() * cfg.noise_max
    } else {
        0.0
    };
    let mut blocks = Vec::with_capacity(2 * n_images);
    let mut prev_class: Option<u32> = None;
    for _ in 0..n_images {
        let use_same = prev_class.is_some() && rng.uniform() < cfg.p_same;
        let class = if use_same {
            prev_class.unwrap()
        } else {
            rng.below(cfg.n_classes as usize) as u32
        };
        let mut tokens = vec![
            TOK_SHOW,
            if use_same { TOK_SAME } else { CLASS_TOKEN_BASE + class },
        ];
        let fillers = rng.below(cfg.max_text_len - 1);
        let filler_base = CLASS_TOKEN_BASE + cfg.n_classes;
        for _ in 0..fillers {
            tokens.push(filler_base + rng.below((cfg.vocab - filler_base) as usize) as u32);
        }
        blocks.push(Block::Text(TextBlock { tokens }));

        let mut pixels = render_pattern(class, cfg.image_size);
        if noise_level > 0.0 {
            for v in pixels.data_mut().iter_mut() {
                *v = (*v + noise_level * rng.normal()).clamp(0.0, 1.0);
            }
            snap_f32(pixels.data_mut());
        }
        blocks.push(Block::Image(ImageBlock {
            pixels,
            class_id: class,
        }));
        prev_class = Some(class);
    }
    Ok(InterleavedSequence { blocks })
}

// ---- dataset file ----
//
// Little-endian layout:
//   "MMIL" | version u32 | sequence_count u64
//   per sequence: block_count u16
//     per block: tag u8 (0 text, 1 image) | payload_len u32 | payload
//       text payload:  token ids as u32
//       image payload: pixels as f32 (row-major, C=1, H=W) then class_id u32

pub fn write_dataset(path: &Path, sequences: &[InterleavedSequence]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sequences.len() as u64).to_le_bytes());
    for seq in sequences {
        buf.extend_from_slice(&(seq.blocks.len() as u16).to_le_bytes());
        for block in &seq.blocks {
            match block {
                Block::Text(t) => {
                    buf.push(0u8);
                    buf.extend_from_slice(&((t.tokens.len() * 4) as u32).to_le_bytes());
                    for &tok in &t.tokens {
                        buf.extend_from_slice(&tok.to_le_bytes());
                    }
                }
                Block::Image(img) => {
                    buf.push(1u8);
                    let n_px = img.pixels.numel();
                    buf.extend_from_slice(&((n_px * 4 + 4) as u32).to_le_bytes());
                    for &v in img.pixels.data() {
                        buf.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                    buf.extend_from_slice(&img.class_id.to_le_bytes());
                }
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let start = self.pos;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: start,
            reason: format!("truncated while reading {what}"),
        })?;
        self.pos += n as u64;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<InterleavedSequence>> {
    let file = std::fs::File::open(path)?;
    let mut cur = Cursor {
        inner: std::io::BufReader::new(file),
        pos: 0,
    };

    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:0x?}, expected \"MMIL\""),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = cur.u64("sequence count")?;

    let mut sequences = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let block_count = cur.u16("block count")?;
        let mut blocks = Vec::with_capacity(block_count as usize);
        for _ in 0..block_count {
            let tag_offset = cur.pos;
            let tag = cur.u8("block tag")?;
            let payload_len = cur.u32("payload length")? as usize;
            let payload_offset = cur.pos;
            let payload = cur.take(payload_len, "block payload")?;
            match tag {
                0 => {
                    if payload_len % 4 != 0 {
                        return Err(Error::Format {
                            offset: payload_offset,
                            reason: "text payload not a multiple of 4".into(),
                        });
                    }
                    let tokens = payload
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    blocks.push(Block::Text(TextBlock { tokens }));
                }
                1 => {
                    if payload_len < 8 || (payload_len - 4) % 4 != 0 {
                        return Err(Error::Format {
                            offset: payload_offset,
                            reason: "image payload malformed".into(),
                        });
                    }
                    let n_px = (payload_len - 4) / 4;
                    let side = (n_px as f64).sqrt().round() as usize;
                    if side * side != n_px {
                        return Err(Error::Format {
                            offset: payload_offset,
                            reason: format!("{n_px} pixels is not a square image"),
                        });
                    }
                    let mut data = Vec::with_capacity(n_px);
                    for c in payload[..n_px * 4].chunks_exact(4) {
                        data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                    }
                    let class_id =
                        u32::from_le_bytes(payload[n_px * 4..].try_into().unwrap());
                    let pixels = Tensor::from_vec(vec![1, side, side], data).map_err(|_| {
                        Error::Format {
                            offset: payload_offset,
                            reason: "non-finite pixel data".into(),
                        }
                    })?;
                    blocks.push(Block::Image(ImageBlock { pixels, class_id }));
                }
                other => {
                    return Err(Error::Format {
                        offset: tag_offset,
                        reason: format!("unknown block tag {other}"),
                    })
                }
            }
        }
        sequences.push(InterleavedSequence { blocks });
    }

    // Strictness: declared count must exhaust the file.
    let mut rest = [0u8; 1];
    if cur.inner.read(&mut rest)? != 0 {
        return Err(Error::Format {
            offset: cur.pos,
            reason: "trailing bytes after final sequence".into(),
        });
    }
    Ok(sequences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn same_seed_identical() {
        let cfg = GenConfig::default();
        let a = generate_sequence(9, &cfg).unwrap();
        let b = generate_sequence(9, &cfg).unwrap();
        assert_eq!(a, b);
        // bit-for-bit on pixels
        for (x, y) in a.images().zip(b.images()) {
            assert!(x
                .pixels
                .data()
                .iter()
                .zip(y.pixels.data())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn two_images_layout() {
        let cfg = GenConfig::default();
        let seq = generate_sequence_with_images(0, &cfg, 2).unwrap();
        let kinds: Vec<bool> = seq
            .blocks
            .iter()
            .map(|b| matches!(b, Block::Image(_)))
            .collect();
        assert_eq!(kinds, vec![false, true, false, true]);
    }

    #[test]
    fn decode_oracle_matches_stored_class() {
        let cfg = GenConfig {
            p_same: 0.3,
            ..GenConfig::default()
        };
        for seed in 0..1000 {
            let seq = generate_sequence(seed, &cfg).unwrap();
            let resolved = resolve_classes(&seq).unwrap();
            assert_eq!(resolved, seq.classes(), "seed {seed}");
        }
    }

    #[test]
    fn generated_sequences_satisfy_invariants() {
        let cfg = GenConfig {
            p_same: 0.2,
            noise_max: 0.3,
            ..GenConfig::default()
        };
        for seed in 0..300 {
            let seq = generate_sequence(seed, &cfg).unwrap();
            seq.validate(&cfg).unwrap();
        }
    }

    #[test]
    fn pattern_is_pure_function_of_template() {
        let cfg = GenConfig::default();
        for seed in 0..200 {
            let seq = generate_sequence(seed, &cfg).unwrap();
            let classes = resolve_classes(&seq).unwrap();
            for (img, class) in seq.images().zip(classes) {
                let expected = render_pattern(class, cfg.image_size);
                assert_eq!(img.pixels.data(), expected.data());
            }
        }
    }

    #[test]
    fn roundtrip_ten_sequences() {
        let cfg = GenConfig {
            p_same: 0.2,
            noise_max: 0.4,
            ..GenConfig::default()
        };
        let seqs: Vec<_> = (0..10)
            .map(|s| generate_sequence(s, &cfg).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mmil");
        write_dataset(&path, &seqs).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(seqs, back);
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mmil");
        let seqs = vec![generate_sequence(1, &GenConfig::default()).unwrap()];
        write_dataset(&path, &seqs).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_failing_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.mmil");
        let seqs = vec![generate_sequence_with_images(3, &GenConfig::default(), 1).unwrap()];
        write_dataset(&path, &seqs).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Truncate inside the first block's payload. The first block starts
        // after magic(4) + version(4) + count(8) + block_count(2) = 18; its
        // payload begins at 18 + tag(1) + len(4) = 23.
        let payload_start = 23u64;
        std::fs::write(&path, &bytes[..payload_start as usize + 2]).unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, payload_start),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn roundtrip_arbitrary_seeds(seeds in proptest::collection::vec(0u64..10_000, 1..12)) {
            let cfg = GenConfig { p_same: 0.25, noise_max: 0.2, ..GenConfig::default() };
            let seqs: Vec<_> = seeds.iter().map(|&s| generate_sequence(s, &cfg).unwrap()).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("prop.mmil");
            write_dataset(&path, &seqs).unwrap();
            let back = read_dataset(&path).unwrap();
            prop_assert_eq!(seqs, back);
        }
    }
}
