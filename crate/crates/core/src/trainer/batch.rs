use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::TrainTuple;
use crate::encoders::{encode_image, Fingerprint};
use crate::geometry::{augment, AugmentConfig, PointCloud};
use crate::seed::{self, hash_str};
use crate::{Embedding, EncoderParams, Error, Result};

const TAG_PERM: u64 = 0x7065_726d;
const TAG_AUG: u64 = 0x6175_676d;
const TAG_VIEW: u64 = 0x7669_6577;

/// A mini-batch: `clouds[i]` is the augmented cloud of `tuples[indices[i]]`
/// and `views[i]` the position of the chosen view within that tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub clouds: Vec<PointCloud>,
    pub views: Vec<usize>,
}

pub fn steps_per_epoch(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size.max(1))
}

/// Dataset order for `epoch`.
pub fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, &[TAG_PERM, epoch as u64])));
    order
}

/// Builds batch `step` of `epoch`. Shapes come from the epoch permutation
/// without replacement; a short final batch is topped up from the start
/// of the permutation so every batch holds `batch_size` distinct shapes.
pub fn make_batch(
    tuples: &[TrainTuple],
    batch_size: usize,
    augment_cfg: &AugmentConfig,
    epoch: usize,
    step: usize,
    seed: u64,
) -> Result<Batch> {
    if batch_size == 0 || tuples.len() < batch_size {
        return Err(Error::param(format!(
            "batch size {batch_size} needs at least that many shapes, dataset has {}",
            tuples.len()
        )));
    }
    let steps = steps_per_epoch(tuples.len(), batch_size);
    if step >= steps {
        return Err(Error::param(format!("step {step} beyond {steps} steps per epoch")));
    }
    let order = epoch_permutation(tuples.len(), seed, epoch);
    let start = step * batch_size;
    let end = (start + batch_size).min(order.len());
    let mut indices = order[start..end].to_vec();
    let fill = batch_size - indices.len();
    indices.extend_from_slice(&order[..fill]);

    let mut clouds = Vec::with_capacity(batch_size);
    let mut views = Vec::with_capacity(batch_size);
    for &i in &indices {
        let t = &tuples[i];
        let key = [epoch as u64, step as u64, hash_str(&t.shape_id)];
        let aug_seed = seed::derive(seed, &[TAG_AUG, key[0], key[1], key[2]]);
        clouds.push(augment(&t.cloud, augment_cfg, aug_seed)?);
        let mut rng = seed::rng(seed::derive(seed, &[TAG_VIEW, key[0], key[1], key[2]]));
        views.push(rng.random_range(0..t.views.len()));
    }
    Ok(Batch { indices, clouds, views })
}

/// Image embeddings of a frozen image branch, keyed by shape and view index.
#[derive(Clone, Debug)]
pub struct EmbeddingCache {
    map: HashMap<(String, usize), Embedding>,
    fingerprint: Fingerprint,
}

impl EmbeddingCache {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Looks up an embedding, refusing if the image weights have changed.
    pub fn get(&self, current: &Fingerprint, shape_id: &str, view_index: usize) -> Result<&Embedding> {
        if *current != self.fingerprint {
            return Err(Error::StaleCache);
        }
        self.map
            .get(&(shape_id.to_string(), view_index))
            .ok_or_else(|| Error::Usage(format!("no cached embedding for {shape_id} view {view_index}")))
    }
}

pub fn precompute_image_embeddings(params: &EncoderParams, tuples: &[TrainTuple]) -> Result<EmbeddingCache> {
    if params.image_trainable {
        return Err(Error::Precondition("image branch must be frozen before caching".into()));
    }
    let mut map = HashMap::new();
    for t in tuples {
        for v in &t.views {
            map.insert((t.shape_id.clone(), v.view_index), encode_image(params, v)?);
        }
    }
    Ok(EmbeddingCache {
        map,
        fingerprint: params.image.fingerprint(),
    })
}
