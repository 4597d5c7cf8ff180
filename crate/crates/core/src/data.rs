//! Synthetic image-caption pairs with a latent attribute, masking plans,
//! and the on-disk corpus formats.
//!
//! Pair corpora are a directory holding `pairs.jsonl` (one
//! `{"caption", "image_index", "attribute"}` record per line) and
//! `images.bin`:
//!
//! ```text
//! magic "VKDIMG01" | u32 version | u64 count | u64 channels | u64 height | u64 width
//! count x u64 byte offset of each image (from the start of the file)
//! count x (channels*height*width) little-endian f64, planar
//! ```
//!
//! Dialogue corpora are JSONL files of `{"context", "response"}` records.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vkd_tensor::{Tensor, TensorError};

use crate::config::ModelConfig;
use crate::error::{Result, VkdError};
use crate::tokenizer::{self, TokenBatch, MASK, PAD};

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 4] = ["circle", "square", "cross", "ring"];
const RGB: [[f64; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9], [0.9, 0.85, 0.1]];
pub const FILLER: [&str; 8] = ["nice", "photo", "today", "small", "big", "look", "here", "old"];

/// Guards floor/ceil of `ratio * n` against products like `20 * 0.15`
/// landing a hair above or below the exact integer.
const RATIO_SLACK: f64 = 1e-9;

/// `(color, shape)` indices encoding attribute `a`. The map is a bijection
/// from `0..16` onto the 4x4 grid, so every attribute count up to 16 yields
/// distinct pairs.
pub fn attribute_parts(a: usize) -> (usize, usize) {
    (a % 4, (a % 4 + a / 4) % 4)
}

/// The two caption words naming attribute `a`.
pub fn attribute_words(a: usize) -> (&'static str, &'static str) {
    let (c, s) = attribute_parts(a);
    (COLORS[c], SHAPES[s])
}

/// Classifies a clean synthetic image: picks the palette color covering the
/// most pixels, then the shape whose mask best matches the colored region.
/// Recovers the attribute exactly on generated images.
pub fn decode_attribute(image: &[f64], size: usize, attribute_count: usize) -> usize {
    let plane = size * size;
    let mut region = vec![Vec::new(); 4];
    for i in 0..plane {
        let px = [image[i], image[plane + i], image[2 * plane + i]];
        for (c, rgb) in RGB.iter().enumerate() {
            if px.iter().zip(rgb).all(|(a, b)| (a - b).abs() < 1e-9) {
                region[c].push(i);
            }
        }
    }
    let c = (0..4).max_by_key(|&c| (region[c].len(), std::cmp::Reverse(c))).unwrap_or(0);
    let pts = &region[c];
    let n = pts.len().max(1) as f64;
    let (mut cy, mut cx) = (0.0, 0.0);
    for &i in pts {
        cy += (i / size) as f64 + 0.5;
        cx += (i % size) as f64 + 0.5;
    }
    let (cy, cx) = (cy / n, cx / n);
    let center_filled = pts.iter().any(|&i| {
        let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
        (y - cy).abs() < 1.0 && (x - cx).abs() < 1.0
    });
    // fill ratio of the bounding box separates square, circle and cross;
    // a hollow center identifies the ring
    let (mut y0, mut y1, mut x0, mut x1) = (size, 0, size, 0);
    for &i in pts {
        let (y, x) = (i / size, i % size);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let area = ((y1 + 1).saturating_sub(y0) * (x1 + 1).saturating_sub(x0)).max(1) as f64;
    let fill = pts.len() as f64 / area;
    let shape = if !center_filled {
        3
    } else if fill > 0.93 {
        1
    } else if fill > 0.68 {
        0
    } else {
        2
    };
    (0..attribute_count).find(|&a| attribute_parts(a) == (c, shape)).unwrap_or(0)
}

/// One image with its caption and the label used only by probes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    /// `[3, H, W]` planar pixels in `[0, 1]`.
    pub image: Vec<f64>,
    pub caption: String,
    pub attribute: usize,
}

fn render(rng: &mut ChaCha8Rng, a: usize, size: usize) -> Vec<f64> {
    let (c, s) = attribute_parts(a);
    let h = size as f64;
    let bg = rng.random_range(0.3..0.6);
    let plane = size * size;
    let mut img: Vec<f64> = (0..3 * plane).map(|_| bg + rng.random_range(-0.05..0.05)).collect();
    let r = rng.random_range(h * 0.22..h * 0.32);
    let cy = rng.random_range(r..h - r);
    let cx = rng.random_range(r..h - r);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let d2 = dy * dy + dx * dx;
            let inside = match s {
                0 => d2 <= r * r,
                1 => dy.abs() <= r * 0.8 && dx.abs() <= r * 0.8,
                2 => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
                _ => (r * 0.55).powi(2) <= d2 && d2 <= r * r,
            };
            if inside {
                for ch in 0..3 {
                    img[ch * plane + y * size + x] = RGB[c][ch];
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn filler(rng: &mut ChaCha8Rng) -> &'static str {
    FILLER[rng.random_range(0..FILLER.len())]
}

/// Parameters of the synthetic pair distribution. Draws take an explicit
/// generator so that the caller owns (and can checkpoint) all randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairGenerator {
    pub image_size: usize,
    pub attribute_count: usize,
    /// Permute captions among the pairs of each drawn batch, destroying the
    /// image-caption dependence while keeping the marginals.
    pub shuffle_attributes: bool,
}

impl PairGenerator {
    pub fn new(image_size: usize, attribute_count: usize) -> Result<Self> {
        if !(2..=16).contains(&attribute_count) {
            return Err(VkdError::input(format!("attribute count {} is not in [2, 16]", attribute_count)));
        }
        if image_size < 4 {
            return Err(VkdError::input("images need at least 4 pixels per side"));
        }
        Ok(PairGenerator { image_size, attribute_count, shuffle_attributes: false })
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let mut g = PairGenerator::new(cfg.image_size, cfg.attribute_count)?;
        g.shuffle_attributes = cfg.shuffle_attributes;
        Ok(g)
    }

    pub fn pair(&self, rng: &mut ChaCha8Rng, attribute: usize) -> SyntheticPair {
        let image = render(rng, attribute, self.image_size);
        let (color, shape) = attribute_words(attribute);
        let caption = format!("{} a {} {} {}", filler(rng), color, shape, filler(rng));
        SyntheticPair { image, caption, attribute }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng, count: usize) -> Vec<SyntheticPair> {
        let mut pairs: Vec<SyntheticPair> = (0..count)
            .map(|_| {
                let a = rng.random_range(0..self.attribute_count);
                self.pair(rng, a)
            })
            .collect();
        if self.shuffle_attributes {
            let mut captions: Vec<String> = pairs.iter().map(|p| p.caption.clone()).collect();
            captions.shuffle(rng);
            for (p, c) in pairs.iter_mut().zip(captions) {
                p.caption = c;
            }
        }
        pairs
    }
}

/// `count` pairs drawn from a generator seeded with `seed`.
pub fn generate_synthetic_pairs(seed: u64, count: usize, attribute_count: usize, image_size: usize) -> Result<Vec<SyntheticPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PairGenerator::new(image_size, attribute_count)?.draw(&mut rng, count))
}

/// Marks `floor(ratio * count)` of `count` patches, uniformly without
/// replacement.
pub fn mask_image_patches(count: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(VkdError::input(format!("mask ratio {} is not in (0, 1)", ratio)));
    }
    let k = (ratio * count as f64 + RATIO_SLACK).floor() as usize;
    if k == 0 {
        return Err(TensorError::DegenerateMask {
            op: "mask_image_patches",
            detail: format!("ratio {} masks no patch out of {}", ratio, count),
        }
        .into());
    }
    let mut mask = vec![false; count];
    for i in index::sample(rng, count, k) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Replaces `max(1, ceil(ratio * n))` of the `n` non-padding tokens with
/// MASK. Returns the masked sequence and the plan.
pub fn mask_text_tokens(tokens: &[usize], ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<bool>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(VkdError::input(format!("mask ratio {} is not in (0, 1)", ratio)));
    }
    let real: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] != PAD).collect();
    if real.is_empty() {
        return Err(VkdError::input("cannot mask an empty token sequence"));
    }
    let k = ((ratio * real.len() as f64 - RATIO_SLACK).ceil() as usize).clamp(1, real.len());
    let mut out = tokens.to_vec();
    let mut plan = vec![false; tokens.len()];
    for j in index::sample(rng, real.len(), k) {
        out[real[j]] = MASK;
        plan[real[j]] = true;
    }
    Ok((out, plan))
}

/// A training batch with both mask plans drawn.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    pub captions: TokenBatch,
    /// Caption token ids without padding, after any truncation.
    pub caption_seqs: Vec<Vec<usize>>,
    pub masked_captions: TokenBatch,
    /// `[B * L_t]`, true where a caption token was replaced by MASK.
    pub caption_mask_plan: Vec<bool>,
    /// One flag per mask patch, shared by the whole batch.
    pub image_mask_plan: Vec<bool>,
    /// For probing only; never fed to the model.
    pub attributes: Vec<usize>,
}

impl PairBatch {
    pub fn new(pairs: &[SyntheticPair], cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if pairs.is_empty() {
            return Err(VkdError::input("empty pair batch"));
        }
        let s = cfg.image_size;
        let mut pixels = Vec::with_capacity(pairs.len() * 3 * s * s);
        for p in pairs {
            if p.image.len() != 3 * s * s {
                return Err(VkdError::input(format!("image has {} values, expected {}", p.image.len(), 3 * s * s)));
            }
            pixels.extend_from_slice(&p.image);
        }
        let images = Tensor::new(&[pairs.len(), 3, s, s], pixels)?;
        let seqs: Vec<Vec<usize>> = pairs.iter().map(|p| tokenizer::encode(&p.caption)).collect();
        let captions = TokenBatch::from_sequences(&seqs, cfg.max_text_len, cfg.truncate_text)?;
        let caption_seqs = (0..captions.batch).map(|b| captions.sequence(b)).collect();
        let (gh, gw) = cfg.mask_grid();
        let image_mask_plan = mask_image_patches(gh * gw, cfg.image_mask_ratio, rng)?;
        let mut masked_ids = Vec::with_capacity(captions.ids.len());
        let mut plan = Vec::with_capacity(captions.ids.len());
        for b in 0..captions.batch {
            let (m, p) = mask_text_tokens(captions.row(b), cfg.text_mask_ratio, rng)?;
            masked_ids.extend(m);
            plan.extend(p);
        }
        let masked_captions = TokenBatch { ids: masked_ids, ..captions.clone() };
        Ok(PairBatch {
            images,
            captions,
            caption_seqs,
            masked_captions,
            caption_mask_plan: plan,
            image_mask_plan,
            attributes: pairs.iter().map(|p| p.attribute).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Images with every masked patch set to zero.
    pub fn masked_images(&self, mask_patch: usize) -> Result<Tensor> {
        let (b, s) = (self.images.dim(0), self.images.dim(2));
        let (w, _) = crate::distillation::masked_pixel_weights(b, s, mask_patch, &self.image_mask_plan)?;
        let data = self.images.data().iter().zip(&w).map(|(v, m)| if *m > 0.0 { 0.0 } else { *v }).collect();
        Ok(Tensor::new(self.images.shape(), data)?)
    }
}

/// A text-only context/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub context: String,
    pub response: String,
}

impl DialogueSample {
    pub fn context_ids(&self) -> Vec<usize> {
        tokenizer::encode(&self.context)
    }

    pub fn response_ids(&self) -> Vec<usize> {
        tokenizer::encode(&self.response)
    }
}

/// Dialogues whose context mentions an object and whose response reacts to
/// it, e.g. `look here i saw a red circle` / `a red circle sounds nice`.
pub fn synthetic_dialogues(seed: u64, count: usize, attribute_count: usize) -> Result<Vec<DialogueSample>> {
    if !(2..=16).contains(&attribute_count) {
        return Err(VkdError::input(format!("attribute count {} is not in [2, 16]", attribute_count)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..attribute_count);
            let (c, s) = attribute_words(a);
            let f = filler(&mut rng);
            DialogueSample { context: format!("{} i saw a {} {}", f, c, s), response: format!("a {} {} sounds {}", c, s, filler(&mut rng)) }
        })
        .collect())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| VkdError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| VkdError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(VkdError::EmptyCorpus(path.to_path_buf()));
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| VkdError::io(format!("writing {}", path.display()), e))
}

pub fn load_dialogue_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    let samples: Vec<DialogueSample> = read_jsonl(path)?;
    for (i, s) in samples.iter().enumerate() {
        if s.context.is_empty() || s.response.is_empty() {
            return Err(VkdError::Parse { path: path.to_path_buf(), line: i + 1, detail: "empty context or response".into() });
        }
    }
    Ok(samples)
}

pub fn save_dialogue_corpus(path: &Path, samples: &[DialogueSample]) -> Result<()> {
    write_jsonl(path, samples)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    caption: String,
    image_index: usize,
    attribute: usize,
}

const IMAGE_MAGIC: &[u8; 8] = b"VKDIMG01";
const IMAGE_VERSION: u32 = 1;

pub fn pairs_path(dir: &Path) -> PathBuf {
    dir.join("pairs.jsonl")
}

pub fn images_path(dir: &Path) -> PathBuf {
    dir.join("images.bin")
}

/// Writes `pairs.jsonl` and `images.bin` into `dir`.
pub fn save_pair_corpus(dir: &Path, pairs: &[SyntheticPair], image_size: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VkdError::io(format!("creating {}", dir.display()), e))?;
    let per = 3 * image_size * image_size;
    let records: Vec<PairRecord> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairRecord { caption: p.caption.clone(), image_index: i, attribute: p.attribute })
        .collect();
    write_jsonl(&pairs_path(dir), &records)?;
    let header = 8 + 4 + 8 * 4;
    let data_start = header + 8 * pairs.len();
    let mut buf = Vec::with_capacity(data_start + pairs.len() * per * 8);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    for v in [pairs.len(), 3, image_size, image_size] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for i in 0..pairs.len() {
        buf.extend_from_slice(&((data_start + i * per * 8) as u64).to_le_bytes());
    }
    for p in pairs {
        if p.image.len() != per {
            return Err(VkdError::input("image size disagrees with the corpus header"));
        }
        for v in &p.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = images_path(dir);
    let mut f = fs::File::create(&path).map_err(|e| VkdError::io(format!("creating {}", path.display()), e))?;
    f.write_all(&buf).map_err(|e| VkdError::io(format!("writing {}", path.display()), e))
}

fn u64_at(buf: &[u8], off: usize, path: &Path) -> Result<usize> {
    buf.get(off..off + 8)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| VkdError::Parse { path: path.to_path_buf(), line: 0, detail: format!("truncated at byte {}", off) })
}

/// Loads a pair corpus; returns the pairs and the image side length.
pub fn load_pair_corpus(dir: &Path) -> Result<(Vec<SyntheticPair>, usize)> {
    let records: Vec<PairRecord> = read_jsonl(&pairs_path(dir))?;
    let path = images_path(dir);
    let buf = fs::read(&path).map_err(|e| VkdError::io(format!("reading {}", path.display()), e))?;
    let bad = |detail: String| VkdError::Parse { path: path.clone(), line: 0, detail };
    if buf.len() < 44 || &buf[..8] != IMAGE_MAGIC {
        return Err(bad("not an image sidecar".into()));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != IMAGE_VERSION {
        return Err(bad(format!("unsupported version {}", version)));
    }
    let count = u64_at(&buf, 12, &path)?;
    let (c, h, w) = (u64_at(&buf, 20, &path)?, u64_at(&buf, 28, &path)?, u64_at(&buf, 36, &path)?);
    if c != 3 || h != w {
        return Err(bad(format!("expected square RGB images, got {}x{}x{}", c, h, w)));
    }
    let per = c * h * w;
    let mut pairs = Vec::with_capacity(records.len());
    for (line, r) in records.into_iter().enumerate() {
        if r.image_index >= count {
            return Err(VkdError::Parse {
                path: pairs_path(dir),
                line: line + 1,
                detail: format!("image_index {} out of range ({} images)", r.image_index, count),
            });
        }
        let off = u64_at(&buf, 44 + 8 * r.image_index, &path)?;
        let bytes = buf.get(off..off + per * 8).ok_or_else(|| bad(format!("image {} truncated", r.image_index)))?;
        let image = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        pairs.push(SyntheticPair { image, caption: r.caption, attribute: r.attribute });
    }
    Ok((pairs, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_map_is_bijective() {
        let mut seen = std::collections::HashSet::new();
        for a in 0..16 {
            assert!(seen.insert(attribute_parts(a)));
        }
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(mask_image_patches(64, 0.6, &mut rng).unwrap().iter().filter(|&&m| m).count(), 38);
        assert_eq!(mask_image_patches(64, 0.999, &mut rng).unwrap().iter().filter(|&&m| m).count(), 63);
        assert!(matches!(
            mask_image_patches(4, 0.1, &mut rng),
            Err(VkdError::Tensor(TensorError::DegenerateMask { .. }))
        ));
        let toks: Vec<usize> = (0..20).collect();
        let (m, p) = mask_text_tokens(&toks, 0.15, &mut rng).unwrap();
        assert_eq!(p.iter().filter(|&&x| x).count(), 3);
        assert!(m.iter().zip(&p).all(|(&t, &f)| (t == MASK) == f));
        let (m, _) = mask_text_tokens(&[65], 0.15, &mut rng).unwrap();
        assert_eq!(m, vec![MASK]);
        assert!(mask_text_tokens(&[], 0.15, &mut rng).is_err());
    }

    #[test]
    fn decision_rule_recovers_attribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for size in [16, 32] {
            let g = PairGenerator::new(size, 16).unwrap();
            for a in 0..16 {
                for _ in 0..8 {
                    let p = g.pair(&mut rng, a);
                    assert_eq!(decode_attribute(&p.image, size, 16), a, "attribute {} at {}px", a, size);
                }
            }
        }
    }
}
