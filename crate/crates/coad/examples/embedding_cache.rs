//! Cache object embeddings on disk, keyed by checkpoint digest and feature
//! selection: the second pass over the same objects does no model work.
//!
//! ```sh
//! cargo run --example embedding_cache
//! ```

use coad::embed::{features_with_cache, EmbeddingCache, FeatureSelection};
use coad::eval::{generate_synthetic, SyntheticConfig};
use coad::model::checkpoint;
use coad::model::{train, TrainConfig, TrainOptions, Variant};
use coad::object_image::ObjectImage;

fn main() -> coad::error::Result<()> {
    let out = std::path::Path::new("runs/examples/embedding-cache");
    let data = generate_synthetic(
        out.join("data"),
        &SyntheticConfig { classes: 3, per_class: 6, image_size: 32, seed: 8 },
    )?;
    let images: Vec<ObjectImage> = data
        .records()
        .iter()
        .map(|r| data.load_image(&r.id))
        .collect::<coad::error::Result<_>>()?;
    let config = TrainConfig {
        variant: Variant::VitCm,
        epochs: 1,
        lr: 1e-3,
        batch_size: 8,
        seed: 0,
        input_size: 32,
        m: 8,
        heads: 1,
        ff_width: 32,
    };
    let (model, _) = train(&images, &config, &TrainOptions { out_dir: None, checkpoint_interval: None, log: false })?;

    // The cache key is the checkpoint content hash + feature selection, so a
    // retrained model can never serve stale embeddings.
    let ckpt = out.join("model.safetensors");
    checkpoint::save(&model, &ckpt)?;
    let digest = checkpoint::sha256_hex(&ckpt)?;
    println!("checkpoint digest: {}...", &digest[..16]);

    let items: Vec<(String, ObjectImage)> = data
        .records()
        .iter()
        .map(|r| Ok((r.id.clone(), data.load_image(&r.id)?)))
        .collect::<coad::error::Result<_>>()?;

    let mut cache = EmbeddingCache::open(out.join("cache"), &digest, FeatureSelection::Color)?;
    let (features, hits) = features_with_cache(&mut cache, &items, &model, FeatureSelection::Color)?;
    cache.save()?;
    println!("cold pass: {} features, {hits} cache hits", features.len());

    let mut cache = EmbeddingCache::open(out.join("cache"), &digest, FeatureSelection::Color)?;
    let (features, hits) = features_with_cache(&mut cache, &items, &model, FeatureSelection::Color)?;
    println!("warm pass: {} features, {hits} cache hits", features.len());
    println!("cache file: {}", cache.path().display());
    Ok(())
}
