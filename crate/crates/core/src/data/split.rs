use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CocoDataset, DataError};

fn subset(ds: &CocoDataset, ids: &HashSet<u64>) -> CocoDataset {
    CocoDataset {
        images: ds.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
        annotations: ds
            .annotations
            .iter()
            .filter(|a| ids.contains(&a.image_id))
            .cloned()
            .collect(),
        categories: ds.categories.clone(),
    }
}

/// Image-level train/validation split. Images are grouped by `source` and
/// `round(n · val_fraction)` images of each group go to validation.
/// Deterministic per seed; original image order is kept inside each split.
pub fn split_train_val(
    ds: &CocoDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(CocoDataset, CocoDataset), DataError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::InvalidFraction(val_fraction));
    }
    let mut groups: BTreeMap<Option<&str>, Vec<u64>> = BTreeMap::new();
    for img in &ds.images {
        groups.entry(img.source.as_deref()).or_default().push(img.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = HashSet::new();
    for ids in groups.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n_val = (ids.len() as f64 * val_fraction).round() as usize;
        val.extend(ids.iter().take(n_val).copied());
    }
    let train: HashSet<u64> = ds.images.iter().map(|i| i.id).filter(|id| !val.contains(id)).collect();
    Ok((subset(ds, &train), subset(ds, &val)))
}
