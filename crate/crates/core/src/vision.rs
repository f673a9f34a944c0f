//! Image handling: PPM ingestion, augmentation pipeline and the small
//! patch-based transformer encoder producing the image feature.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::nn;
use crate::params::{ParamGraph, ParamStore};
use crate::rng::stream;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("unknown augmentation {0:?}")]
    UnknownAugmentation(String),
    #[error("image side {side} not divisible by patch size {patch}")]
    PatchDivisibility { side: usize, patch: usize },
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("bad PPM file: {0}")]
    Ppm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// RGB image with pixels in [0,1], row-major, channel-interleaved.
/// Grayscale sources are broadcast to three channels on load.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * 3);
        debug_assert!(pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    /// Nearest-neighbor resize to side×side.
    pub fn resize(&self, side: usize) -> Image {
        let mut out = Image::filled(side, side, 0.0);
        for y in 0..side {
            for x in 0..side {
                let sy = (y * self.height) / side;
                let sx = (x * self.width) / side;
                for c in 0..3 {
                    out.set(y, x, c, self.get(sy, sx, c));
                }
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), VisionError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image, VisionError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::parse_ppm(&buf)
    }

    pub fn parse_ppm(buf: &[u8]) -> Result<Image, VisionError> {
        if buf.len() < 2 || &buf[..2] != b"P6" {
            return Err(VisionError::Ppm("missing P6 magic".into()));
        }
        let mut pos = 2;
        let mut fields = Vec::new();
        while fields.len() < 3 {
            while pos < buf.len() && (buf[pos] as char).is_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < buf.len() && !(buf[pos] as char).is_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(VisionError::Ppm("truncated header".into()));
            }
            let field: usize = std::str::from_utf8(&buf[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| VisionError::Ppm("non-numeric header field".into()))?;
            fields.push(field);
        }
        pos += 1; // single whitespace after maxval
        let (width, height, maxval) = (fields[0], fields[1], fields[2]);
        if maxval != 255 {
            return Err(VisionError::Ppm(format!("unsupported maxval {maxval}")));
        }
        let need = width * height * 3;
        if buf.len() < pos + need {
            return Err(VisionError::Ppm("truncated pixel payload".into()));
        }
        let pixels = buf[pos..pos + need]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        Ok(Image::new(height, width, pixels))
    }
}

/// The five supported augmentation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AugKind {
    HFlip,
    Grayscale,
    HueShift,
    Rotate90,
    ScaleCrop,
}

impl AugKind {
    pub const ALL: [AugKind; 5] = [
        AugKind::HFlip,
        AugKind::Grayscale,
        AugKind::HueShift,
        AugKind::Rotate90,
        AugKind::ScaleCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::HFlip => "hflip",
            AugKind::Grayscale => "grayscale",
            AugKind::HueShift => "hue_shift",
            AugKind::Rotate90 => "rotate90",
            AugKind::ScaleCrop => "scale_crop",
        }
    }

    pub fn parse(s: &str) -> Result<Self, VisionError> {
        match s {
            "hflip" => Ok(AugKind::HFlip),
            "grayscale" => Ok(AugKind::Grayscale),
            "hue_shift" => Ok(AugKind::HueShift),
            "rotate90" => Ok(AugKind::Rotate90),
            "scale_crop" => Ok(AugKind::ScaleCrop),
            other => Err(VisionError::UnknownAugmentation(other.to_string())),
        }
    }
}

/// BT.601 luminance weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Deterministic augmentation: output dimensions and pixel range are
/// preserved for every kind.
pub fn augment(img: &Image, kind: AugKind, seed: u64) -> Image {
    match kind {
        AugKind::HFlip => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..3 {
                        out.set(y, x, c, img.get(y, img.width - 1 - x, c));
                    }
                }
            }
            out
        }
        AugKind::Grayscale => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    let l = (0..3).map(|c| LUMA[c] * img.get(y, x, c)).sum::<f64>();
                    for c in 0..3 {
                        out.set(y, x, c, l);
                    }
                }
            }
            out
        }
        // Channel rotation R->G->B; exactly invertible after 3 applications.
        AugKind::HueShift => {
            let mut out = img.clone();
            for y in 0..img.height {
                for x in 0..img.width {
                    let (r, g, b) = (img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
                    out.set(y, x, 1, r);
                    out.set(y, x, 2, g);
                    out.set(y, x, 0, b);
                }
            }
            out
        }
        AugKind::Rotate90 => {
            let mut out = Image::filled(img.width, img.height, 0.0);
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..3 {
                        out.set(x, img.height - 1 - y, c, img.get(y, x, c));
                    }
                }
            }
            out
        }
        AugKind::ScaleCrop => {
            // Upscale by 5/4 then crop back at a seeded offset.
            let mut rng = stream(seed, "augment/scale_crop");
            let big_h = img.height * 5 / 4;
            let big_w = img.width * 5 / 4;
            let mut big = Image::filled(big_h, big_w, 0.0);
            for y in 0..big_h {
                for x in 0..big_w {
                    let sy = (y * img.height) / big_h;
                    let sx = (x * img.width) / big_w;
                    for c in 0..3 {
                        big.set(y, x, c, img.get(sy, sx, c));
                    }
                }
            }
            let oy = rng.gen_range(0..=big_h - img.height);
            let ox = rng.gen_range(0..=big_w - img.width);
            let mut out = Image::filled(img.height, img.width, 0.0);
            for y in 0..img.height {
                for x in 0..img.width {
                    for c in 0..3 {
                        out.set(y, x, c, big.get(y + oy, x + ox, c));
                    }
                }
            }
            out
        }
    }
}

/// Two views of one source image for the contrastive pair.
#[derive(Debug, Clone)]
pub struct AugmentedPair {
    pub view_a: Image,
    pub view_b: Image,
    pub source_id: String,
}

/// Builds a pair: view A is the source, view B gets a uniformly drawn
/// augmentation from `set`, all seeded.
pub fn make_pair(img: &Image, source_id: &str, set: &[AugKind], seed: u64) -> AugmentedPair {
    let mut rng = stream(seed, &format!("augment/pick/{source_id}"));
    let kind = set[rng.gen_range(0..set.len())];
    AugmentedPair {
        view_a: img.clone(),
        view_b: augment(img, kind, seed),
        source_id: source_id.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 32,
            patch_size: 8,
            model_dim: 64,
            layers: 2,
            heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), VisionError> {
        if self.image_side % self.patch_size != 0 {
            return Err(VisionError::PatchDivisibility {
                side: self.image_side,
                patch: self.patch_size,
            });
        }
        if self.model_dim % self.heads != 0 {
            return Err(VisionError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Splits an image into row-major patches, one flattened patch per row.
pub fn patchify(img: &Image, cfg: &EncoderConfig) -> Result<Tensor, VisionError> {
    cfg.validate()?;
    if img.height != cfg.image_side || img.width != cfg.image_side {
        return Err(VisionError::Config(format!(
            "image {}x{} does not match configured side {}",
            img.height, img.width, cfg.image_side
        )));
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_side / p;
    let mut data = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        data.push(img.get(py * p + y, px * p + x, c));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], data)?)
}

/// Inverse of `patchify`; the pair is lossless.
pub fn unpatchify(patches: &Tensor, cfg: &EncoderConfig) -> Image {
    let p = cfg.patch_size;
    let per_side = cfg.image_side / p;
    let mut img = Image::filled(cfg.image_side, cfg.image_side, 0.0);
    let mut it = patches.data.iter();
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..p {
                for x in 0..p {
                    for c in 0..3 {
                        img.set(py * p + y, px * p + x, c, *it.next().unwrap());
                    }
                }
            }
        }
    }
    img
}

/// Allocates encoder parameters under `prefix` (e.g. "enc.online").
pub fn init_encoder(store: &mut ParamStore, seed: u64, prefix: &str, cfg: &EncoderConfig) {
    nn::init_linear(
        store,
        seed,
        &format!("{prefix}.patch_proj"),
        cfg.patch_dim(),
        cfg.model_dim,
    );
    let mut rng = stream(seed, &format!("init/{prefix}.pos"));
    store.insert(
        &format!("{prefix}.pos"),
        Tensor::randn(&mut rng, vec![cfg.num_patches(), cfg.model_dim], 0.02),
    );
    for l in 0..cfg.layers {
        nn::init_block(
            store,
            seed,
            &format!("{prefix}.blk{l}"),
            cfg.model_dim,
            cfg.model_dim * 4,
        );
    }
    nn::init_layer_norm(store, &format!("{prefix}.ln_f"), cfg.model_dim);
}

/// Encoder forward over pre-computed patches. Returns the unit-norm pooled
/// feature `[1 × d]` and the per-patch sequence `[P × d]`.
pub fn encode_patches(
    pg: &mut ParamGraph,
    patches: NodeId,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<(NodeId, NodeId), TensorError> {
    let mut x = nn::linear(pg, patches, &format!("{prefix}.patch_proj"))?;
    let pos = pg.p(&format!("{prefix}.pos"));
    x = pg.graph.add(x, pos)?;
    for l in 0..cfg.layers {
        x = nn::block(pg, x, &format!("{prefix}.blk{l}"), cfg.heads, false)?;
    }
    let x = nn::layer_norm(pg, x, &format!("{prefix}.ln_f"))?;
    let pooled = pg.graph.mean_rows(x);
    let normed = pg.graph.l2_normalize_rows(pooled);
    Ok((normed, x))
}

/// Full-image convenience wrapper around `patchify` + `encode_patches`.
pub fn encode_image(
    graph: &mut Graph,
    store: &ParamStore,
    trainable: bool,
    img: &Image,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<(NodeId, NodeId), VisionError> {
    let patches = patchify(img, cfg)?;
    let mut pg = ParamGraph::new(graph, store, trainable);
    let pid = pg.graph.input(&patches);
    Ok(encode_patches(&mut pg, pid, prefix, cfg)?)
}
