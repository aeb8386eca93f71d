//! Fixed-length per-object feature vectors from concept embeddings.
//!
//! Each selected concept block is mean-pooled over its patch axis, the
//! pooled blocks are concatenated in canonical order (R, G, B, LL, HL, LH,
//! HH — or R, G, B, content — as applicable) and the result is
//! L2-normalized. These vectors are what the detector compares.

pub mod cache;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConceptEmbedding, ConceptKind, Model, Variant};
use crate::object_image::ObjectImage;

pub use cache::{features_with_cache, EmbeddingCache};

/// Which concept blocks contribute to the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSelection {
    /// f_R, f_G, f_B only.
    Color,
    /// The content blocks only (subbands or the single content block).
    Content,
    /// Color then content, the full concept set.
    Both,
}

impl FeatureSelection {
    pub const ALL: [FeatureSelection; 3] =
        [FeatureSelection::Color, FeatureSelection::Content, FeatureSelection::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSelection::Color => "color",
            FeatureSelection::Content => "content",
            FeatureSelection::Both => "both",
        }
    }

    /// Concept kinds this selection reads from a variant, in pooling order.
    pub fn kinds_for(self, variant: Variant) -> Result<Vec<ConceptKind>> {
        if variant == Variant::VitAe {
            return match self {
                FeatureSelection::Both => Ok(vec![ConceptKind::Latent]),
                other => Err(Error::config(format!(
                    "vit-ae has a single undisentangled latent; feature selection {other} \
                     requires a disentangled variant"
                ))),
            };
        }
        Ok(match self {
            FeatureSelection::Color => variant.color_kinds().to_vec(),
            FeatureSelection::Content => variant.content_kinds().to_vec(),
            FeatureSelection::Both => variant.all_kinds(),
        })
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "color" => Ok(FeatureSelection::Color),
            "content" => Ok(FeatureSelection::Content),
            "both" => Ok(FeatureSelection::Both),
            other => Err(Error::config(format!(
                "unknown feature selection {other:?} (expected color, content or both)"
            ))),
        }
    }
}

/// One object's pooled, normalized feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeature {
    id: String,
    vector: Vec<f64>,
}

impl ObjectFeature {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::shape("feature vector is empty"));
        }
        if !vector.iter().all(|v| v.is_finite()) {
            return Err(Error::data("feature vector contains non-finite values"));
        }
        Ok(Self { id: id.into(), vector })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }
}

/// Mean-pools the selected concept blocks over patches, concatenates them in
/// canonical order and L2-normalizes (zero vectors are left as zeros).
pub fn pool(embedding: &ConceptEmbedding, selection: FeatureSelection) -> Result<ObjectFeature> {
    pool_with_id("object", embedding, selection)
}

/// [`pool`] with a caller-supplied object id.
pub fn pool_with_id(
    id: impl Into<String>,
    embedding: &ConceptEmbedding,
    selection: FeatureSelection,
) -> Result<ObjectFeature> {
    let kinds = selection.kinds_for(embedding.variant())?;
    let (patches, width) = embedding.block_shape();
    let mut vector = Vec::with_capacity(kinds.len() * width);
    for kind in kinds {
        let block = embedding.block(kind).ok_or_else(|| {
            Error::config(format!(
                "selection {selection} needs the {kind} block, which this embedding lacks"
            ))
        })?;
        for col in 0..width {
            let mut acc = 0.0f64;
            for row in 0..patches {
                acc += block[[row, col]] as f64;
            }
            vector.push(acc / patches as f64);
        }
    }
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut vector {
            *v /= norm;
        }
    }
    ObjectFeature::new(id, vector)
}

/// Embedding for one image under the variant's canonical path: concept
/// blocks for the disentangled variants, the single latent for `vit-ae`.
fn embed_image(model: &Model, image: &ObjectImage) -> Result<ConceptEmbedding> {
    match model.variant() {
        Variant::VitAe => model.latent_embedding(image),
        _ => model.encode(image),
    }
}

/// One pooled feature for one image.
pub fn feature_for(
    id: impl Into<String>,
    image: &ObjectImage,
    model: &Model,
    selection: FeatureSelection,
) -> Result<ObjectFeature> {
    pool_with_id(id, &embed_image(model, image)?, selection)
}

/// Ordered features for a shelf row, one per crop (ids `crop-0`, `crop-1`, …).
///
/// Failures on an individual crop are reported with that crop's index.
pub fn extract_row_features(
    crops: &[ObjectImage],
    model: &Model,
    selection: FeatureSelection,
) -> Result<Vec<ObjectFeature>> {
    if crops.len() < 2 {
        return Err(Error::data(format!(
            "a row needs at least 2 crops, got {}",
            crops.len()
        )));
    }
    crops
        .iter()
        .enumerate()
        .map(|(i, crop)| {
            feature_for(format!("crop-{i}"), crop, model, selection).map_err(|e| e.at_crop(i))
        })
        .collect()
}
