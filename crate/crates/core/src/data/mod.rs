//! Data ingestion: KITTI ground truth, frame preprocessing, sequence samples
//! and the synthetic translating-texture dataset.

pub mod image;
pub mod kitti;
pub mod synth;

use std::collections::BTreeMap;
use std::path::PathBuf;

use ::image::RgbImage;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::meter_class;
use crate::tensor::{Real, Tensor};

pub use self::image::{load_rgb, mirror, normalize_image, PIXEL_MEANS};
pub use kitti::{
    ingest_sequences, make_windows, parse_kitti_poses, parse_window_index, traveled_distance, window_index_text, DatasetSplit,
    IngestSummary, Pose, PoseTrajectory, SplitPreset, WindowDescriptor,
};
pub use synth::{load_synthetic, render_sequence, save_synthetic, synth_generate, SynthConfig};

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SampleSource {
    pub sequence: String,
    pub start: usize,
}

/// Consecutive normalized frames with the ground-truth distance between the
/// first and the last one. Adjacent frames form the network's input pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample<T> {
    pub frames: Vec<Tensor<T>>,
    pub gt_distance: f64,
    pub source: SampleSource,
}

impl<T: Real> SequenceSample<T> {
    pub fn new(frames: Vec<Tensor<T>>, gt_distance: f64, source: SampleSource) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::contract(format!("a sequence needs at least 2 frames, got {}", frames.len())));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || frames.iter().any(|f| f.shape() != shape.as_slice()) {
            return Err(Error::dim("sequence", "frames must share one [C,H,W] shape"));
        }
        if !(gt_distance >= 0.0) {
            return Err(Error::domain(format!("ground-truth distance {gt_distance} is negative")));
        }
        Ok(SequenceSample { frames, gt_distance, source })
    }

    pub fn pair_count(&self) -> usize {
        self.frames.len() - 1
    }

    /// `(frames[i], frames[i + 1])` for every adjacent pair.
    pub fn pairs(&self) -> impl Iterator<Item = (&Tensor<T>, &Tensor<T>)> {
        self.frames.windows(2).map(|w| (&w[0], &w[1]))
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }

    pub fn mirrored(&self) -> Self {
        SequenceSample { frames: self.frames.iter().map(mirror).collect(), gt_distance: self.gt_distance, source: self.source.clone() }
    }
}

/// With probability `p` mirrors every frame of the sequence (one coin per
/// sequence). The label is unchanged.
pub fn flip_augment<T: Real, R: Rng>(sample: &SequenceSample<T>, p: f64, rng: &mut R) -> SequenceSample<T> {
    if p > 0.0 && rng.gen::<f64>() < p {
        sample.mirrored()
    } else {
        sample.clone()
    }
}

#[derive(Clone, Debug)]
pub enum FrameStore {
    Memory(Vec<RgbImage>),
    Files(Vec<PathBuf>),
}

#[derive(Clone, Debug)]
pub struct DatasetItem {
    pub source: SampleSource,
    pub gt_distance: f64,
    /// Constant per-frame speed for synthetic samples.
    pub speed: Option<f64>,
    pub frames: FrameStore,
}

impl DatasetItem {
    pub fn frame_count(&self) -> usize {
        match &self.frames {
            FrameStore::Memory(v) => v.len(),
            FrameStore::Files(v) => v.len(),
        }
    }

    pub fn images(&self) -> Result<Vec<RgbImage>> {
        match &self.frames {
            FrameStore::Memory(v) => Ok(v.clone()),
            FrameStore::Files(paths) => paths.iter().map(|p| load_rgb(p)).collect(),
        }
    }
}

/// Ordered collection of sequence windows.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn new(items: Vec<DatasetItem>) -> Self {
        Dataset { items }
    }

    pub fn from_windows(windows: Vec<WindowDescriptor>) -> Self {
        Dataset {
            items: windows
                .into_iter()
                .map(|w| DatasetItem {
                    source: SampleSource { sequence: w.sequence, start: w.start },
                    gt_distance: w.gt_distance,
                    speed: None,
                    frames: FrameStore::Files(w.frame_paths),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &DatasetItem {
        &self.items[i]
    }

    /// Whole-meter ground-truth histogram.
    pub fn meter_histogram(&self) -> BTreeMap<usize, u64> {
        let mut h = BTreeMap::new();
        for it in &self.items {
            *h.entry(meter_class(it.gt_distance)).or_default() += 1;
        }
        h
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { items: indices.iter().map(|&i| self.items[i].clone()).collect() }
    }

    /// Decodes and normalizes window `i` to `resolution = (width, height)`.
    pub fn load_sample<T: Real>(&self, i: usize, means: [f64; 3], resolution: (usize, usize)) -> Result<SequenceSample<T>> {
        let item = &self.items[i];
        let frames = item
            .images()?
            .iter()
            .map(|img| normalize_image(img, means, resolution))
            .collect::<Result<Vec<_>>>()?;
        SequenceSample::new(frames, item.gt_distance, item.source.clone())
    }
}
