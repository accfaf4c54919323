use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::corpus::{read_wav, resample, DatasetIndex};
use crate::error::Result;

use super::{extract_features, FeatureConfig, FeatureMap, SAMPLE_RATE};

/// In-memory feature maps for every file of one or more indexes.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    maps: HashMap<PathBuf, Arc<FeatureMap>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &Path) -> Option<&Arc<FeatureMap>> {
        self.maps.get(path)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn insert(&mut self, path: PathBuf, map: FeatureMap) {
        self.maps.insert(path, Arc::new(map));
    }

    /// Extracts features for every file in `index` that is not already
    /// present. Files are processed in parallel; insertion order is fixed.
    pub fn load_index(&mut self, index: &DatasetIndex, config: &FeatureConfig) -> Result<()> {
        let missing: Vec<PathBuf> = index
            .files
            .keys()
            .filter(|p| !self.maps.contains_key(*p))
            .cloned()
            .collect();
        let computed: Vec<(PathBuf, Result<FeatureMap>)> = missing
            .par_iter()
            .map(|path| {
                let result = read_wav(path).map(|clip| {
                    let clip = if clip.sample_rate == SAMPLE_RATE {
                        clip
                    } else {
                        resample(&clip, SAMPLE_RATE)
                    };
                    extract_features(&clip, config)
                });
                (path.clone(), result)
            })
            .collect();
        for (path, result) in computed {
            self.maps.insert(path, Arc::new(result?));
        }
        Ok(())
    }
}
