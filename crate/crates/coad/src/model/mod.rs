//! Disentangled ViT auto-encoder with color/content concept specialization.
//!
//! Three variants share one backbone: a convolutional patch projection
//! (kernel = stride = patch size) produces 2M-wide patch tokens which are
//! split into a color half and a content half.
//!
//! * `vit-cm-dwt` — four content encoder layers, one per Haar subband
//!   (LL, HL, LH, HH), three color encoder layers (R, G, B), four per-subband
//!   decoders whose outputs are recombined by the inverse DWT.
//! * `vit-cm` — a single content encoder layer plus the three color layers
//!   and a single pixel-patch decoder.
//! * `vit-ae` — the undisentangled control: one encoder layer over the full
//!   token width and a single RGB decoder.
//!
//! Color tokens deliberately receive no positional embeddings; content
//! tokens do. RGB reconstruction modulates each content block with a color
//! block via the Hadamard product; grayscale reconstruction consumes content
//! blocks only. Training alternates the two reconstruction objectives per
//! optimization step, detaching the content blocks during the modulated step
//! so each half of the latent specializes.

mod layers;

pub mod checkpoint;
pub mod train;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::object_image::{ObjectImage, LUMA_WEIGHTS};
use crate::wavelet::WaveletComponents;
use layers::{EncoderLayer, Linear, ParamRegistry};

pub use train::{train, train_on_device, LossRecord, TrainConfig, TrainOptions, TrainReport, Trainer};

/// Model variant tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Disentangled auto-encoder with per-subband content concepts.
    #[serde(rename = "vit-cm-dwt")]
    VitCmDwt,
    /// Disentangled auto-encoder with a single content concept.
    #[serde(rename = "vit-cm")]
    VitCm,
    /// Plain auto-encoder baseline with one undisentangled latent.
    #[serde(rename = "vit-ae")]
    VitAe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::VitCmDwt, Variant::VitCm, Variant::VitAe];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VitCmDwt => "vit-cm-dwt",
            Variant::VitCm => "vit-cm",
            Variant::VitAe => "vit-ae",
        }
    }

    /// Color concept kinds produced by this variant, in canonical order.
    pub fn color_kinds(self) -> &'static [ConceptKind] {
        match self {
            Variant::VitCmDwt | Variant::VitCm => &[ConceptKind::R, ConceptKind::G, ConceptKind::B],
            Variant::VitAe => &[],
        }
    }

    /// Content concept kinds produced by this variant, in canonical order.
    pub fn content_kinds(self) -> &'static [ConceptKind] {
        match self {
            Variant::VitCmDwt => &[
                ConceptKind::LL,
                ConceptKind::HL,
                ConceptKind::LH,
                ConceptKind::HH,
            ],
            Variant::VitCm => &[ConceptKind::Content],
            Variant::VitAe => &[],
        }
    }

    /// Every concept kind of this variant in canonical concatenation order
    /// (color first, then content, matching the R,G,B,LL,HL,LH,HH layout).
    pub fn all_kinds(self) -> Vec<ConceptKind> {
        match self {
            Variant::VitAe => vec![ConceptKind::Latent],
            _ => {
                let mut kinds = self.color_kinds().to_vec();
                kinds.extend_from_slice(self.content_kinds());
                kinds
            }
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit-cm-dwt" => Ok(Variant::VitCmDwt),
            "vit-cm" => Ok(Variant::VitCm),
            "vit-ae" => Ok(Variant::VitAe),
            other => Err(Error::config(format!(
                "unknown variant {other:?} (expected vit-cm-dwt, vit-cm or vit-ae)"
            ))),
        }
    }
}

/// Architecture hyper-parameters.
///
/// `concept_dim` is the per-concept width M; patch tokens are 2M wide before
/// the color/content split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_size: usize,
    pub patch_size: usize,
    pub concept_dim: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl ModelConfig {
    /// Reference defaults: 224×224 inputs, patch 16, M=64, 4 heads, FF 2048.
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            input_size: 224,
            patch_size: 16,
            concept_dim: 64,
            heads: 4,
            ff_width: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.patch_size == 0 {
            return Err(Error::config("input_size and patch_size must be positive"));
        }
        if self.input_size % self.patch_size != 0 {
            return Err(Error::shape(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            )));
        }
        if self.variant == Variant::VitCmDwt && self.patch_size % 2 != 0 {
            return Err(Error::config(format!(
                "vit-cm-dwt needs an even patch size (got {}): subband patches are patch_size/2",
                self.patch_size
            )));
        }
        if self.concept_dim == 0 || self.ff_width == 0 {
            return Err(Error::config("concept_dim and ff_width must be positive"));
        }
        let width = self.encoder_width();
        if self.heads == 0 || width % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder width {width} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Patches per image axis.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    /// Number of patch tokens N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch-token width before the split (2M).
    pub fn token_dim(&self) -> usize {
        2 * self.concept_dim
    }

    /// Width each encoder layer operates on: M for the disentangled
    /// variants, 2M for the undisentangled baseline.
    pub fn encoder_width(&self) -> usize {
        match self.variant {
            Variant::VitAe => self.token_dim(),
            _ => self.concept_dim,
        }
    }
}

/// Identity of one concept block inside a [`ConceptEmbedding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ConceptKind {
    R,
    G,
    B,
    LL,
    HL,
    LH,
    HH,
    /// Single content block of the `vit-cm` variant.
    Content,
    /// Undisentangled latent of the `vit-ae` baseline.
    Latent,
}

impl ConceptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConceptKind::R => "R",
            ConceptKind::G => "G",
            ConceptKind::B => "B",
            ConceptKind::LL => "LL",
            ConceptKind::HL => "HL",
            ConceptKind::LH => "LH",
            ConceptKind::HH => "HH",
            ConceptKind::Content => "content",
            ConceptKind::Latent => "latent",
        }
    }

    pub fn is_color(self) -> bool {
        matches!(self, ConceptKind::R | ConceptKind::G | ConceptKind::B)
    }
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-object latent: named N×M concept blocks in canonical order.
#[derive(Debug, Clone)]
pub struct ConceptEmbedding {
    variant: Variant,
    blocks: Vec<(ConceptKind, Array2<f32>)>,
}

impl ConceptEmbedding {
    /// Builds an embedding from named blocks.
    ///
    /// Blocks must be non-empty, finite, of one common shape, with unique
    /// kinds that all belong to `variant`. A subset of the variant's kinds
    /// is allowed (e.g. a content-only embedding for grayscale decoding).
    pub fn new(variant: Variant, blocks: Vec<(ConceptKind, Array2<f32>)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::shape("embedding needs at least one concept block"));
        }
        let allowed = variant.all_kinds();
        let shape = blocks[0].1.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::shape("concept blocks must be non-empty"));
        }
        for (kind, block) in &blocks {
            if !allowed.contains(kind) {
                return Err(Error::config(format!(
                    "concept block {kind} does not belong to variant {variant}"
                )));
            }
            if block.dim() != shape {
                return Err(Error::shape(format!(
                    "concept block {kind} has shape {:?}, expected {:?}",
                    block.dim(),
                    shape
                )));
            }
            if !block.iter().all(|v| v.is_finite()) {
                return Err(Error::data(format!("concept block {kind} contains non-finite values")));
            }
        }
        for i in 1..blocks.len() {
            if blocks[..i].iter().any(|(k, _)| *k == blocks[i].0) {
                return Err(Error::shape(format!("duplicate concept block {}", blocks[i].0)));
            }
        }
        Ok(Self { variant, blocks })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// (patches, concept width) of every block.
    pub fn block_shape(&self) -> (usize, usize) {
        self.blocks[0].1.dim()
    }

    pub fn kinds(&self) -> Vec<ConceptKind> {
        self.blocks.iter().map(|(k, _)| *k).collect()
    }

    pub fn block(&self, kind: ConceptKind) -> Option<&Array2<f32>> {
        self.blocks.iter().find(|(k, _)| *k == kind).map(|(_, b)| b)
    }

    pub fn blocks(&self) -> &[(ConceptKind, Array2<f32>)] {
        &self.blocks
    }

    /// Copy of this embedding with all color blocks removed (an
    /// "unmodulated" content-only embedding).
    pub fn without_color(&self) -> Result<Self> {
        let blocks: Vec<_> = self
            .blocks
            .iter()
            .filter(|(k, _)| !k.is_color())
            .cloned()
            .collect();
        Self::new(self.variant, blocks)
    }

    /// Copy with one block's contents replaced (shape-checked).
    pub fn with_block_replaced(&self, kind: ConceptKind, value: Array2<f32>) -> Result<Self> {
        let mut blocks = self.blocks.clone();
        let slot = blocks
            .iter_mut()
            .find(|(k, _)| *k == kind)
            .ok_or_else(|| Error::shape(format!("embedding has no {kind} block")))?;
        slot.1 = value;
        Self::new(self.variant, blocks)
    }

    fn require(&self, kind: ConceptKind) -> Result<&Array2<f32>> {
        self.block(kind)
            .ok_or_else(|| Error::config(format!("embedding is missing the {kind} block")))
    }
}

/// Hadamard modulation (Eqs. (2)–(4)): each content block is multiplied
/// elementwise by the given color block.
///
/// A ones color block is the identity; a zeros block annihilates.
pub fn modulate(content: &[Array2<f32>], color: &Array2<f32>) -> Result<Vec<Array2<f32>>> {
    let mut out = Vec::with_capacity(content.len());
    for block in content {
        if block.dim() != color.dim() {
            return Err(Error::shape(format!(
                "modulation shape mismatch: content {:?} vs color {:?}",
                block.dim(),
                color.dim()
            )));
        }
        out.push(block * color);
    }
    Ok(out)
}

/// Output mode of [`Model::decode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Rgb,
    Gray,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(DecodeMode::Rgb),
            "gray" | "grey" => Ok(DecodeMode::Gray),
            other => Err(Error::config(format!("unknown decode mode {other:?}"))),
        }
    }
}

/// Which training objective a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    /// RGB reconstruction through modulated (detached) content blocks.
    Modulated,
    /// Grayscale reconstruction through the content path only.
    Content,
    /// Single undisentangled RGB loss of the `vit-ae` baseline.
    Plain,
}

impl TrainPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::Modulated => "modulated",
            TrainPhase::Content => "content",
            TrainPhase::Plain => "plain",
        }
    }
}

impl fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Decoded image: pixels in channel-first layout plus, for the DWT variant,
/// the per-channel wavelet components the pixels were assembled from.
#[derive(Debug, Clone)]
pub struct ReconstructedImage {
    /// (C, H, W) with C = 3 for rgb mode, 1 for gray mode.
    pub pixels: Array3<f32>,
    /// R, G, B subbands when the DWT variant decodes in rgb mode.
    pub subbands: Option<Vec<WaveletComponents>>,
}

/// Internal result of a batched encoder pass.
struct EncodedBatch {
    /// f_R, f_G, f_B — empty for `vit-ae`.
    color: Vec<Tensor>,
    /// f_LL..f_HH (dwt), [f_content] (cm) or [latent] (ae).
    content: Vec<Tensor>,
}

/// The auto-encoder with its ordered parameter registry.
///
/// `Clone` is shallow: clones share parameter storage (candle `Var`s are
/// reference-counted), so a cloned model is a second handle on the same
/// weights — cheap to fan out across detector grid cells.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    registry: ParamRegistry,
    patch_proj: Linear,
    pos_emb: Var,
    content_encoders: Vec<EncoderLayer>,
    color_encoders: Vec<EncoderLayer>,
    decoders: Vec<Linear>,
    step: u64,
    epoch: u64,
}

impl Model {
    /// Fresh model with seeded initialization on the given device/dtype.
    pub fn new(config: ModelConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new(device, dtype, seed);
        let p = config.patch_size;
        let n = config.num_patches();
        let m = config.concept_dim;

        let patch_proj = Linear::new(&mut reg, "patch_proj", 3 * p * p, config.token_dim())?;
        let pos_dim = match config.variant {
            Variant::VitAe => config.token_dim(),
            _ => m,
        };
        let pos_emb = reg.uniform("pos_emb", &[n, pos_dim], 0.02)?;

        let width = config.encoder_width();
        let content_prefixes: Vec<String> = match config.variant {
            Variant::VitCmDwt => (0..4).map(|i| format!("content.{i}")).collect(),
            Variant::VitCm => vec!["content.0".to_string()],
            Variant::VitAe => vec!["latent.0".to_string()],
        };
        let mut content_encoders = Vec::new();
        for prefix in &content_prefixes {
            content_encoders.push(EncoderLayer::new(&mut reg, prefix, width, config.heads, config.ff_width)?);
        }
        let mut color_encoders = Vec::new();
        if config.variant != Variant::VitAe {
            for i in 0..3 {
                color_encoders.push(EncoderLayer::new(
                    &mut reg,
                    &format!("color.{i}"),
                    m,
                    config.heads,
                    config.ff_width,
                )?);
            }
        }

        let mut decoders = Vec::new();
        match config.variant {
            Variant::VitCmDwt => {
                let q = p / 2;
                for i in 0..4 {
                    decoders.push(Linear::new(&mut reg, &format!("dec.{i}"), m, q * q)?);
                }
            }
            Variant::VitCm => decoders.push(Linear::new(&mut reg, "dec.0", m, p * p)?),
            Variant::VitAe => decoders.push(Linear::new(&mut reg, "dec.0", config.token_dim(), 3 * p * p)?),
        }

        Ok(Self {
            config,
            registry: reg,
            patch_proj,
            pos_emb,
            content_encoders,
            color_encoders,
            decoders,
            step: 0,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn device(&self) -> &Device {
        self.registry.device()
    }

    pub fn dtype(&self) -> DType {
        self.registry.dtype()
    }

    /// Completed optimization steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed training epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub(crate) fn set_progress(&mut self, step: u64, epoch: u64) {
        self.step = step;
        self.epoch = epoch;
    }

    /// Named parameters in registration (= serialization) order.
    pub fn named_parameters(&self) -> &[(String, Var)] {
        self.registry.named()
    }

    /// Handles to every trainable variable.
    pub fn all_vars(&self) -> Vec<Var> {
        self.registry.vars()
    }

    /// Parameters whose name starts with `prefix` ("content.", "color.", …).
    pub fn parameters_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.registry
            .named()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect()
    }

    /// Stacks images into a (B, 3, H, W) tensor on the model device/dtype,
    /// validating spatial dimensions.
    pub fn image_batch(&self, images: &[ObjectImage]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::data("empty image batch"));
        }
        let s = self.config.input_size;
        for (i, img) in images.iter().enumerate() {
            let (h, w) = img.dims();
            if (h, w) != (s, s) {
                return Err(Error::shape(format!(
                    "image {i} is {h}×{w}, model expects {s}×{s}"
                )));
            }
        }
        crate::object_image::batch_tensor(images, self.dtype(), self.device())
    }

    // ---- forward plumbing -------------------------------------------------

    /// (B, 3, H, W) → (B, N, 3·p²) patch unfolding. Stride equals kernel, so
    /// the convolutional projection reduces to this reshape plus a Linear.
    fn patchify(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::shape(format!(
                "expected (B, 3, {s}, {s}) batch, got ({b}, {c}, {h}, {w})"
            )));
        }
        let g = self.config.grid();
        let p = self.config.patch_size;
        let t = x
            .reshape((b, c, g, p, g, p))?
            .permute([0, 2, 4, 1, 3, 5])?
            .contiguous()?
            .reshape((b, g * g, c * p * p))?;
        Ok(t)
    }

    /// Patch tokens (B, N, k²) → pixel grid (B, g·k, g·k).
    fn tokens_to_grid(&self, t: &Tensor, k: usize) -> Result<Tensor> {
        let (b, n, d) = t.dims3()?;
        let g = self.config.grid();
        debug_assert_eq!(n, g * g);
        debug_assert_eq!(d, k * k);
        let t = t
            .reshape((b, g, g, k, k))?
            .permute([0, 1, 3, 2, 4])?
            .contiguous()?
            .reshape((b, g * k, g * k))?;
        Ok(t)
    }

    /// Projection of a batch to 2M-wide patch tokens.
    fn project(&self, x: &Tensor) -> Result<Tensor> {
        self.patch_proj.forward(&self.patchify(x)?)
    }

    /// Splits tokens into (color half, content half).
    fn split(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let m = self.config.concept_dim;
        Ok((tokens.narrow(2, 0, m)?, tokens.narrow(2, m, m)?))
    }

    /// Runs the encoder banks. `with_color` skips the color layers when the
    /// phase does not need them (they would receive no gradient anyway).
    fn encode_batch(&self, x: &Tensor, with_color: bool) -> Result<EncodedBatch> {
        let tokens = self.project(x)?;
        match self.config.variant {
            Variant::VitAe => {
                let tokens = tokens.broadcast_add(self.pos_emb.as_tensor())?;
                let latent = self.content_encoders[0].forward(&tokens)?;
                Ok(EncodedBatch { color: vec![], content: vec![latent] })
            }
            _ => {
                let (color_half, content_half) = self.split(&tokens)?;
                let content_in = content_half.broadcast_add(self.pos_emb.as_tensor())?;
                let content = self
                    .content_encoders
                    .iter()
                    .map(|enc| enc.forward(&content_in))
                    .collect::<Result<Vec<_>>>()?;
                let color = if with_color {
                    self.color_encoders
                        .iter()
                        .map(|enc| enc.forward(&color_half))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    vec![]
                };
                Ok(EncodedBatch { color, content })
            }
        }
    }

    /// Inverse single-level Haar DWT on batched subband grids, differentiable.
    fn idwt_batch(&self, ll: &Tensor, hl: &Tensor, lh: &Tensor, hh: &Tensor) -> Result<Tensor> {
        let (b, h, w) = ll.dims3()?;
        let a = ll.add(hl)?.add(&lh.add(hh)?)?.affine(0.5, 0.0)?;
        let bb = ll.sub(hl)?.add(&lh.sub(hh)?)?.affine(0.5, 0.0)?;
        let c = ll.add(hl)?.sub(&lh.add(hh)?)?.affine(0.5, 0.0)?;
        let d = ll.sub(hl)?.sub(&lh.sub(hh)?)?.affine(0.5, 0.0)?;
        let top = Tensor::stack(&[&a, &bb], 3)?.reshape((b, h, 2 * w))?;
        let bottom = Tensor::stack(&[&c, &d], 3)?.reshape((b, h, 2 * w))?;
        let img = Tensor::stack(&[&top, &bottom], 2)?.reshape((b, 2 * h, 2 * w))?;
        Ok(img)
    }

    /// One channel image from content blocks, optionally modulated by a
    /// color block. Returns the channel plus its subband grids for the DWT
    /// variant.
    fn decode_channel(
        &self,
        content: &[Tensor],
        color: Option<&Tensor>,
    ) -> Result<(Tensor, Option<Vec<Tensor>>)> {
        let p = self.config.patch_size;
        match self.config.variant {
            Variant::VitCmDwt => {
                let q = p / 2;
                let mut grids = Vec::with_capacity(4);
                for (dec, block) in self.decoders.iter().zip(content) {
                    let block = match color {
                        Some(col) => block.mul(col)?,
                        None => block.clone(),
                    };
                    grids.push(self.tokens_to_grid(&dec.forward(&block)?, q)?);
                }
                let img = self.idwt_batch(&grids[0], &grids[1], &grids[2], &grids[3])?;
                Ok((img, Some(grids)))
            }
            Variant::VitCm => {
                let block = match color {
                    Some(col) => content[0].mul(col)?,
                    None => content[0].clone(),
                };
                let img = self.tokens_to_grid(&self.decoders[0].forward(&block)?, p)?;
                Ok((img, None))
            }
            Variant::VitAe => Err(Error::config("vit-ae has no per-channel decoding path")),
        }
    }

    /// RGB reconstruction (B, 3, H, W) via per-channel modulation. Also
    /// returns per-channel subband grids for the DWT variant.
    fn decode_rgb_batch(
        &self,
        color: &[Tensor],
        content: &[Tensor],
    ) -> Result<(Tensor, Option<Vec<Vec<Tensor>>>)> {
        if color.len() != 3 {
            return Err(Error::config(
                "rgb decoding requires modulation: embedding has no color blocks",
            ));
        }
        let mut channels = Vec::with_capacity(3);
        let mut subbands = Vec::with_capacity(3);
        for col in color {
            let (img, grids) = self.decode_channel(content, Some(col))?;
            channels.push(img);
            if let Some(g) = grids {
                subbands.push(g);
            }
        }
        let rgb = Tensor::stack(&channels, 1)?;
        let subbands = if subbands.len() == 3 { Some(subbands) } else { None };
        Ok((rgb, subbands))
    }

    /// Grayscale reconstruction (B, 1, H, W) from content blocks only.
    fn decode_gray_batch(&self, content: &[Tensor]) -> Result<Tensor> {
        let (img, _) = self.decode_channel(content, None)?;
        img.unsqueeze(1).map_err(Error::from)
    }

    /// Full `vit-ae` forward pass to an RGB reconstruction.
    fn forward_ae(&self, x: &Tensor) -> Result<Tensor> {
        let latent = &self.encode_batch(x, false)?.content[0];
        let tokens = self.decoders[0].forward(latent)?;
        let (b, n, _) = tokens.dims3()?;
        let g = self.config.grid();
        let p = self.config.patch_size;
        debug_assert_eq!(n, g * g);
        let img = tokens
            .reshape((b, g, g, 3, p, p))?
            .permute([0, 3, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, 3, g * p, g * p))?;
        Ok(img)
    }

    /// (B, 3, H, W) → (B, 1, H, W) luma target.
    fn gray_target(&self, x: &Tensor) -> Result<Tensor> {
        let w: Vec<f64> = LUMA_WEIGHTS.iter().map(|&v| v as f64).collect();
        let w = Tensor::from_vec(w, (1, 3, 1, 1), self.device())?.to_dtype(self.dtype())?;
        x.broadcast_mul(&w)?.sum_keepdim(1).map_err(Error::from)
    }

    /// Reconstruction loss for one batch under the given phase semantics:
    /// `Modulated` detaches the content blocks and scores RGB output against
    /// the input, `Content` scores the grayscale output against the luma
    /// target, `Plain` is the vit-ae RGB loss.
    pub fn forward_loss(&self, batch: &Tensor, phase: TrainPhase) -> Result<Tensor> {
        self.loss_inner(batch, phase, true)
    }

    fn loss_inner(&self, batch: &Tensor, phase: TrainPhase, detach: bool) -> Result<Tensor> {
        match (self.config.variant, phase) {
            (Variant::VitAe, TrainPhase::Plain) => {
                let recon = self.forward_ae(batch)?;
                candle_nn::loss::mse(&recon, batch).map_err(Error::from)
            }
            (Variant::VitAe, other) => Err(Error::config(format!(
                "vit-ae trains with the plain phase, not {other}"
            ))),
            (_, TrainPhase::Plain) => Err(Error::config(
                "the plain phase is only defined for vit-ae",
            )),
            (_, TrainPhase::Modulated) => {
                let encoded = self.encode_batch(batch, true)?;
                let content: Vec<Tensor> = if detach {
                    encoded.content.iter().map(|t| t.detach()).collect()
                } else {
                    encoded.content.clone()
                };
                let (recon, _) = self.decode_rgb_batch(&encoded.color, &content)?;
                candle_nn::loss::mse(&recon, batch).map_err(Error::from)
            }
            (_, TrainPhase::Content) => {
                let encoded = self.encode_batch(batch, false)?;
                let recon = self.decode_gray_batch(&encoded.content)?;
                let target = self.gray_target(batch)?;
                candle_nn::loss::mse(&recon, &target).map_err(Error::from)
            }
        }
    }

    /// Sum of both reconstruction losses with detachment disabled, so every
    /// parameter keeps its analytic gradient. Used for gradient checking;
    /// for `vit-ae` this is simply the plain loss.
    pub fn composite_loss(&self, batch: &Tensor) -> Result<Tensor> {
        if self.config.variant == Variant::VitAe {
            return self.loss_inner(batch, TrainPhase::Plain, false);
        }
        let rgb = self.loss_inner(batch, TrainPhase::Modulated, false)?;
        let gray = self.loss_inner(batch, TrainPhase::Content, false)?;
        rgb.add(&gray).map_err(Error::from)
    }

    // ---- public single-image operations -----------------------------------

    /// Patch projection of one image: the N×2M token grid before the split.
    pub fn patch_embed(&self, image: &ObjectImage) -> Result<Array2<f32>> {
        let x = self.image_batch(std::slice::from_ref(image))?;
        let tokens = self.project(&x)?;
        tensor_to_array2(&tokens.squeeze(0)?)
    }

    /// Encodes one image into its concept blocks (Eq. (1)).
    ///
    /// Rejected for `vit-ae`, which has no concept decomposition — use
    /// [`Model::latent_embedding`] for its undisentangled latent.
    pub fn encode(&self, image: &ObjectImage) -> Result<ConceptEmbedding> {
        if self.config.variant == Variant::VitAe {
            return Err(Error::config(
                "encode expects a disentangled variant; vit-ae exposes latent_embedding instead",
            ));
        }
        let x = self.image_batch(std::slice::from_ref(image))?;
        let encoded = self.encode_batch(&x, true)?;
        let mut blocks = Vec::with_capacity(7);
        for (kind, t) in self.config.variant.color_kinds().iter().zip(&encoded.color) {
            blocks.push((*kind, tensor_to_array2(&t.squeeze(0)?)?));
        }
        for (kind, t) in self.config.variant.content_kinds().iter().zip(&encoded.content) {
            blocks.push((*kind, tensor_to_array2(&t.squeeze(0)?)?));
        }
        ConceptEmbedding::new(self.config.variant, blocks)
    }

    /// The `vit-ae` baseline's single N×2M latent block.
    pub fn latent_embedding(&self, image: &ObjectImage) -> Result<ConceptEmbedding> {
        if self.config.variant != Variant::VitAe {
            return Err(Error::config(format!(
                "latent_embedding is the vit-ae path; {} exposes encode",
                self.config.variant
            )));
        }
        let x = self.image_batch(std::slice::from_ref(image))?;
        let encoded = self.encode_batch(&x, false)?;
        let latent = tensor_to_array2(&encoded.content[0].squeeze(0)?)?;
        ConceptEmbedding::new(Variant::VitAe, vec![(ConceptKind::Latent, latent)])
    }

    /// Decodes an embedding back to pixels (Eq. (5)).
    ///
    /// `Rgb` modulates each content block with each color block and needs
    /// both present; `Gray` consumes content blocks only, so color blocks —
    /// present, absent, or permuted — cannot influence its output.
    pub fn decode(&self, embedding: &ConceptEmbedding, mode: DecodeMode) -> Result<ReconstructedImage> {
        if embedding.variant() != self.config.variant {
            return Err(Error::config(format!(
                "embedding variant {} does not match model variant {}",
                embedding.variant(),
                self.config.variant
            )));
        }
        let (n, m) = embedding.block_shape();
        let expected = (
            self.config.num_patches(),
            match self.config.variant {
                Variant::VitAe => self.config.token_dim(),
                _ => self.config.concept_dim,
            },
        );
        if (n, m) != expected {
            return Err(Error::shape(format!(
                "embedding blocks are {n}×{m}, model expects {}×{}",
                expected.0, expected.1
            )));
        }

        if self.config.variant == Variant::VitAe {
            if mode == DecodeMode::Gray {
                return Err(Error::config("vit-ae has no grayscale decoding path"));
            }
            let latent = self.block_tensor(embedding.require(ConceptKind::Latent)?)?;
            let tokens = self.decoders[0].forward(&latent)?;
            let (_, nn, _) = tokens.dims3()?;
            let g = self.config.grid();
            let p = self.config.patch_size;
            debug_assert_eq!(nn, g * g);
            let img = tokens
                .reshape((1, g, g, 3, p, p))?
                .permute([0, 3, 1, 4, 2, 5])?
                .contiguous()?
                .reshape((1, 3, g * p, g * p))?;
            return Ok(ReconstructedImage {
                pixels: tensor_to_array3(&img.squeeze(0)?)?,
                subbands: None,
            });
        }

        let content: Vec<Tensor> = self
            .config
            .variant
            .content_kinds()
            .iter()
            .map(|k| self.block_tensor(embedding.require(*k)?))
            .collect::<Result<Vec<_>>>()?;

        match mode {
            DecodeMode::Gray => {
                let img = self.decode_gray_batch(&content)?;
                Ok(ReconstructedImage {
                    pixels: tensor_to_array3(&img.squeeze(0)?)?,
                    subbands: None,
                })
            }
            DecodeMode::Rgb => {
                let has_color = self
                    .config
                    .variant
                    .color_kinds()
                    .iter()
                    .all(|k| embedding.block(*k).is_some());
                if !has_color {
                    return Err(Error::config(
                        "rgb decoding requires modulation: embedding has no color blocks",
                    ));
                }
                let color: Vec<Tensor> = self
                    .config
                    .variant
                    .color_kinds()
                    .iter()
                    .map(|k| self.block_tensor(embedding.require(*k)?))
                    .collect::<Result<Vec<_>>>()?;
                let (img, grids) = self.decode_rgb_batch(&color, &content)?;
                let subbands = match grids {
                    Some(per_channel) => Some(
                        per_channel
                            .iter()
                            .map(|g| grids_to_components(g))
                            .collect::<Result<Vec<_>>>()?,
                    ),
                    None => None,
                };
                Ok(ReconstructedImage {
                    pixels: tensor_to_array3(&img.squeeze(0)?)?,
                    subbands,
                })
            }
        }
    }

    /// (N, M) ndarray block → (1, N, M) tensor on the model device/dtype.
    fn block_tensor(&self, block: &Array2<f32>) -> Result<Tensor> {
        let (n, m) = block.dim();
        let data: Vec<f32> = block.iter().copied().collect();
        let t = Tensor::from_vec(data, (1, n, m), self.device())?.to_dtype(self.dtype())?;
        Ok(t)
    }
}

/// Four (1, h, w) subband grids → f64 wavelet components (LL, HL, LH, HH).
fn grids_to_components(grids: &[Tensor]) -> Result<WaveletComponents> {
    let mut arrays = Vec::with_capacity(4);
    for g in grids {
        let g = g.squeeze(0)?;
        let arr = tensor_to_array2(&g)?;
        arrays.push(arr.mapv(|v| v as f64));
    }
    let hh = arrays.pop().expect("four subband grids");
    let lh = arrays.pop().expect("four subband grids");
    let hl = arrays.pop().expect("four subband grids");
    let ll = arrays.pop().expect("four subband grids");
    WaveletComponents::new(ll, hl, lh, hh)
}

fn tensor_to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (a, b) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array2::from_shape_vec((a, b), data).map_err(|e| Error::shape(e.to_string()))
}

fn tensor_to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (a, b, c) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Array3::from_shape_vec((a, b, c), data).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object_image::ObjectImage;
    use candle_core::Device;
    use ndarray::Array3;
    use rand::SeedableRng;

    pub(super) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            input_size: 8,
            patch_size: 4,
            concept_dim: 8,
            heads: 1,
            ff_width: 16,
        }
    }

    pub(super) fn random_image(size: usize, seed: u64) -> ObjectImage {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((3, size, size), |_| rng.gen_range(0.0f32..1.0));
        ObjectImage::new(data).unwrap()
    }

    fn tiny_model(variant: Variant) -> Model {
        Model::new(tiny_config(variant), 11, &Device::Cpu, DType::F32).unwrap()
    }

    #[test]
    fn patch_embed_shapes() {
        let model = tiny_model(Variant::VitCmDwt);
        let img = random_image(8, 1);
        let grid = model.patch_embed(&img).unwrap();
        assert_eq!(grid.dim(), (4, 16));
    }

    #[test]
    fn identical_images_identical_patch_grids() {
        let model = tiny_model(Variant::VitCmDwt);
        let img = random_image(8, 2);
        let a = model.patch_embed(&img).unwrap();
        let b = model.patch_embed(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_block_kinds_per_variant() {
        let img = random_image(8, 3);
        let dwt = tiny_model(Variant::VitCmDwt).encode(&img).unwrap();
        assert_eq!(dwt.kinds().len(), 7);
        assert_eq!(dwt.block_shape(), (4, 8));
        let cm = tiny_model(Variant::VitCm).encode(&img).unwrap();
        assert_eq!(cm.kinds().len(), 4);
        assert!(cm.block(ConceptKind::Content).is_some());
    }

    #[test]
    fn encode_rejects_vit_ae() {
        let img = random_image(8, 4);
        let ae = tiny_model(Variant::VitAe);
        assert!(ae.encode(&img).is_err());
        let latent = ae.latent_embedding(&img).unwrap();
        assert_eq!(latent.block_shape(), (4, 16));
    }

    #[test]
    fn encode_is_deterministic() {
        let model = tiny_model(Variant::VitCmDwt);
        let img = random_image(8, 5);
        let a = model.encode(&img).unwrap();
        let b = model.encode(&img).unwrap();
        for (x, y) in a.blocks().iter().zip(b.blocks()) {
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn modulate_identities() {
        let content = vec![Array2::from_elem((2, 3), 2.0f32)];
        let ones = Array2::from_elem((2, 3), 1.0f32);
        let zeros = Array2::from_elem((2, 3), 0.0f32);
        assert_eq!(modulate(&content, &ones).unwrap()[0], content[0]);
        assert!(modulate(&content, &zeros).unwrap()[0].iter().all(|&v| v == 0.0));
        let toy = modulate(&[Array2::from_elem((1, 1), 2.0f32)], &Array2::from_elem((1, 1), 3.0f32))
            .unwrap();
        assert_eq!(toy[0][[0, 0]], 6.0);
        let bad = Array2::from_elem((3, 2), 1.0f32);
        assert!(modulate(&content, &bad).is_err());
    }

    #[test]
    fn decode_shape_contracts() {
        for variant in [Variant::VitCmDwt, Variant::VitCm] {
            let model = tiny_model(variant);
            let img = random_image(8, 6);
            let emb = model.encode(&img).unwrap();
            let rgb = model.decode(&emb, DecodeMode::Rgb).unwrap();
            assert_eq!(rgb.pixels.dim(), (3, 8, 8));
            let gray = model.decode(&emb, DecodeMode::Gray).unwrap();
            assert_eq!(gray.pixels.dim(), (1, 8, 8));
            if variant == Variant::VitCmDwt {
                let subbands = rgb.subbands.expect("dwt decodes expose subbands");
                assert_eq!(subbands.len(), 3);
                assert_eq!(subbands[0].ll.dim(), (4, 4));
            } else {
                assert!(rgb.subbands.is_none());
            }
        }
    }

    #[test]
    fn rgb_decode_without_color_blocks_is_contract_error() {
        let model = tiny_model(Variant::VitCmDwt);
        let emb = model.encode(&random_image(8, 7)).unwrap();
        let content_only = emb.without_color().unwrap();
        let err = model.decode(&content_only, DecodeMode::Rgb).unwrap_err();
        assert!(err.to_string().contains("modulation"));
        assert!(model.decode(&content_only, DecodeMode::Gray).is_ok());
    }

    #[test]
    fn gray_decode_ignores_color_blocks_bit_identically() {
        let model = tiny_model(Variant::VitCmDwt);
        let emb = model.encode(&random_image(8, 8)).unwrap();
        let base = model.decode(&emb, DecodeMode::Gray).unwrap();
        let r = emb.block(ConceptKind::R).unwrap().clone();
        let b = emb.block(ConceptKind::B).unwrap().clone();
        let swapped = emb
            .with_block_replaced(ConceptKind::R, b)
            .unwrap()
            .with_block_replaced(ConceptKind::B, r)
            .unwrap();
        let permuted = model.decode(&swapped, DecodeMode::Gray).unwrap();
        assert!(base
            .pixels
            .iter()
            .zip(permuted.pixels.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn vit_ae_decodes_rgb_only() {
        let model = tiny_model(Variant::VitAe);
        let img = random_image(8, 9);
        let latent = model.latent_embedding(&img).unwrap();
        let rgb = model.decode(&latent, DecodeMode::Rgb).unwrap();
        assert_eq!(rgb.pixels.dim(), (3, 8, 8));
        assert!(model.decode(&latent, DecodeMode::Gray).is_err());
    }

    #[test]
    fn idwt_batch_matches_reference_inverse() {
        let model = tiny_model(Variant::VitCmDwt);
        let mk = |seed| {
            use rand::Rng;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(v, (2, 3, 3), &Device::Cpu).unwrap()
        };
        let (ll, hl, lh, hh) = (mk(1), mk(2), mk(3), mk(4));
        let img = model.idwt_batch(&ll, &hl, &lh, &hh).unwrap();
        assert_eq!(img.dims(), &[2, 6, 6]);

        let to_arr = |t: &Tensor, b: usize| {
            let v = t.to_vec3::<f32>().unwrap();
            Array2::from_shape_fn((3, 3), |(i, j)| v[b][i][j] as f64)
        };
        for b in 0..2 {
            let comp = WaveletComponents::new(
                to_arr(&ll, b),
                to_arr(&hl, b),
                to_arr(&lh, b),
                to_arr(&hh, b),
            )
            .unwrap();
            let expect = crate::wavelet::idwt2_haar(&comp).unwrap();
            let got = img.to_vec3::<f32>().unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    assert!((got[b][i][j] as f64 - expect.pixels()[[i, j]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn forward_loss_nonnegative_and_phase_checked() {
        let model = tiny_model(Variant::VitCmDwt);
        let batch = model
            .image_batch(&[random_image(8, 10), random_image(8, 11)])
            .unwrap();
        for phase in [TrainPhase::Modulated, TrainPhase::Content] {
            let loss = model.forward_loss(&batch, phase).unwrap();
            let v = loss.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
            assert!(v >= 0.0, "loss must be nonnegative");
        }
        assert!(model.forward_loss(&batch, TrainPhase::Plain).is_err());
        let ae = tiny_model(Variant::VitAe);
        assert!(ae.forward_loss(&batch, TrainPhase::Modulated).is_err());
        assert!(ae.forward_loss(&batch, TrainPhase::Plain).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config(Variant::VitCmDwt);
        cfg.input_size = 10;
        assert!(cfg.validate().is_err(), "non-divisible input");
        let mut cfg = tiny_config(Variant::VitCmDwt);
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err(), "odd patch with dwt");
        let mut cfg = tiny_config(Variant::VitCm);
        cfg.heads = 3;
        assert!(cfg.validate().is_err(), "heads must divide width");
        assert!(tiny_config(Variant::VitAe).validate().is_ok());
    }
}
