//! Seeded synthetic datasets and their on-disk layout.
//!
//! A dataset directory holds `NNNNN.pgm` images with matching `NNNNN.json`
//! annotation files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{synth_scene, Sample, SceneSpec};
use crate::annot::{load_annotations, save_annotations, AnnotError};
use crate::raster::{read_pgm, write_pgm, RasterError};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Annot(#[from] AnnotError),
    #[error("{0}: image and annotation sizes differ")]
    SizeMismatch(PathBuf),
    #[error("{0}: no annotation file next to the image")]
    MissingAnnotations(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub size: usize,
    /// Inclusive range of objects per scene, drawn uniformly.
    pub objects: (usize, usize),
    pub object_radius_range: (f64, f64),
    pub background: f64,
    pub min_separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let scene = SceneSpec::default();
        Self {
            count: 100,
            size: scene.size,
            objects: (5, 30),
            object_radius_range: scene.object_radius_range,
            background: 0.8,
            min_separation: scene.min_separation,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Scene parameters of sample `i`; independent of every other sample.
    pub fn scene(&self, i: usize) -> SceneSpec {
        let mut rng = SplitMix64::new(derive_seed(self.seed, i as u64));
        let (lo, hi) = (self.objects.0.min(self.objects.1), self.objects.0.max(self.objects.1));
        SceneSpec {
            size: self.size,
            n_objects: lo + rng.below(hi - lo + 1),
            object_radius_range: self.object_radius_range,
            background: self.background,
            seed: rng.next_u64(),
            min_separation: self.min_separation,
        }
    }
}

/// Samples `0..spec.count`, generated on up to `threads` threads. The result
/// does not depend on the thread count.
pub fn synth_dataset(spec: &DatasetSpec, threads: usize) -> Vec<Sample> {
    let make = |i: usize| {
        let (image, points) = synth_scene(&spec.scene(i));
        Sample { image, points }
    };
    let threads = threads.clamp(1, spec.count.max(1));
    if threads == 1 {
        return (0..spec.count).map(make).collect();
    }
    let chunk = spec.count.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let make = &make;
                s.spawn(move || (t * chunk..((t + 1) * chunk).min(spec.count)).map(make).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scene generation does not panic"))
            .collect()
    })
}

pub fn save_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        write_pgm(&s.image, dir.join(format!("{i:05}.pgm")))?;
        save_annotations(&s.points, dir.join(format!("{i:05}.json")))?;
    }
    Ok(())
}

/// Every `*.pgm` in `dir` with its `.json` annotations, in file-name order.
/// Returns the file stems alongside the samples.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Sample>), DatasetError> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    images.retain(|p| p.extension().is_some_and(|e| e == "pgm"));
    images.sort();
    let mut ids = Vec::with_capacity(images.len());
    let mut samples = Vec::with_capacity(images.len());
    for img_path in images {
        let ann_path = img_path.with_extension("json");
        if !ann_path.exists() {
            return Err(DatasetError::MissingAnnotations(img_path));
        }
        let image = read_pgm(&img_path)?;
        let points = load_annotations(&ann_path)?;
        if (image.width(), image.height()) != (points.width(), points.height()) {
            return Err(DatasetError::SizeMismatch(img_path));
        }
        ids.push(img_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        samples.push(Sample { image, points });
    }
    Ok((ids, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thread_count_does_not_change_data() {
        let spec = DatasetSpec {
            count: 7,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(synth_dataset(&spec, 1), synth_dataset(&spec, 3));
    }

    #[test]
    fn object_counts_in_range() {
        let spec = DatasetSpec {
            count: 20,
            objects: (2, 4),
            ..Default::default()
        };
        for s in synth_dataset(&spec, 2) {
            assert!((2..=4).contains(&s.points.len()));
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(
            &DatasetSpec {
                count: 3,
                size: 16,
                ..Default::default()
            },
            1,
        );
        save_dataset(dir.path(), &samples).unwrap();
        let (ids, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(ids, ["00000", "00001", "00002"]);
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.points, b.points);
        }
    }
}
