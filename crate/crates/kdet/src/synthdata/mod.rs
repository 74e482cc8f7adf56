//! Synthetic detection scenes: colored geometric shapes on noisy
//! backgrounds, a day -> night domain shift, and the on-disk dataset format.

mod render;

pub mod io;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::Tensor;
use crate::par;
use crate::rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Day,
    Night,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Day => write!(f, "day"),
            Domain::Night => write!(f, "night"),
        }
    }
}

/// Shape drawn for a class; the class id is the index into
/// [`SceneConfig::shapes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Square,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Class `i` renders as `shapes[i]`.
    pub shapes: Vec<ShapeKind>,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object bounding-box side as a fraction of the image.
    pub size_min: f64,
    pub size_max: f64,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            shapes: vec![ShapeKind::Circle, ShapeKind::Triangle],
            objects_min: 1,
            objects_max: 4,
            size_min: 0.15,
            size_max: 0.45,
            noise: 0.20,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty()
            || self.objects_min > self.objects_max
            || self.size_min <= 0.0
            || self.size_min > self.size_max
            || self.size_max > 1.0
            || self.image_size == 0
        {
            return Err(Error::invalid("scene_config", format!("{:?}", self)));
        }
        Ok(())
    }
}

/// Planar [3, H, W] image stored as f32 (the on-disk precision); training
/// widens to f64 on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(size: usize) -> Self {
        Image {
            size,
            data: vec![0.0; 3 * size * size],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![3, self.size, self.size],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .unwrap()
    }

    pub fn flip_horizontal(&self) -> Image {
        let s = self.size;
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..s {
                let row = (c * s + y) * s;
                for x in 0..s {
                    out.data[row + x] = self.data[row + (s - 1 - x)];
                }
            }
        }
        out
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    /// Annotations visible to training (ground truth when labeled, teacher
    /// detections once pseudo-labeled, empty for unlabeled data).
    pub boxes: Vec<BBox>,
    /// Held-back ground truth of unlabeled samples, for evaluation only.
    pub hidden_boxes: Option<Vec<BBox>>,
    pub domain: Domain,
}

impl Sample {
    /// Ground truth for evaluation: hidden annotations when present,
    /// otherwise the visible ones.
    pub fn gt_boxes(&self) -> &[BBox] {
        self.hidden_boxes.as_deref().unwrap_or(&self.boxes)
    }

    pub fn flip_horizontal(&self) -> Sample {
        Sample {
            id: self.id.clone(),
            image: self.image.flip_horizontal(),
            boxes: self.boxes.iter().map(|b| b.flip_horizontal()).collect(),
            hidden_boxes: self
                .hidden_boxes
                .as_ref()
                .map(|bs| bs.iter().map(|b| b.flip_horizontal()).collect()),
            domain: self.domain,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub image_size: usize,
    pub seed: u64,
    pub domain: Domain,
    pub labeled: bool,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Generate sample `index` of the config's deterministic stream.
pub fn gen_sample(cfg: &SceneConfig, index: u64, labeled: bool) -> Sample {
    let mut r = rng::stream(cfg.seed, "sample", index);
    let (image, boxes) = render::render_scene(cfg, &mut r);
    Sample {
        id: format!("img{index:05}"),
        image,
        boxes: if labeled { boxes.clone() } else { Vec::new() },
        hidden_boxes: if labeled { None } else { Some(boxes) },
        domain: Domain::Day,
    }
}

/// Generate `n` deterministic samples. Sample `i` depends only on
/// `(cfg.seed, i)`, so generation parallelizes without changing output.
pub fn gen_dataset(cfg: &SceneConfig, n: usize, labeled: bool) -> Result<Dataset> {
    cfg.validate()?;
    let samples = par::map_range(n, |i| gen_sample(cfg, i as u64, labeled));
    Ok(Dataset {
        image_size: cfg.image_size,
        seed: cfg.seed,
        domain: Domain::Day,
        labeled,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Night,
}

/// Apply a domain shift; annotations are untouched. The night shift scales
/// brightness to 0.35x, adds Gaussian noise (sigma 0.05), and lifts the blue
/// channel by 1.15x, clamping to [0, 1] after each step. The noise stream is
/// derived from the sample id, so shifting is deterministic.
pub fn apply_domain_shift(s: &Sample, shift: Shift) -> Sample {
    let Shift::Night = shift;
    let mut r = rng::stream(rng::hash_label(&s.id), "night", 0);
    let size = s.image.size;
    let mut image = s.image.clone();
    {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.05).unwrap();
        let plane = size * size;
        for (i, v) in image.data.iter_mut().enumerate() {
            let mut x = *v as f64 * 0.35;
            x = (x + noise.sample(&mut r)).clamp(0.0, 1.0);
            if i >= 2 * plane {
                x = (x * 1.15).clamp(0.0, 1.0);
            }
            *v = x as f32;
        }
    }
    Sample {
        id: s.id.clone(),
        image,
        boxes: s.boxes.clone(),
        hidden_boxes: s.hidden_boxes.clone(),
        domain: Domain::Night,
    }
}

/// Shift a whole dataset.
pub fn shift_dataset(ds: &Dataset, shift: Shift) -> Dataset {
    Dataset {
        image_size: ds.image_size,
        seed: ds.seed,
        domain: Domain::Night,
        labeled: ds.labeled,
        samples: par::map(&ds.samples, |s| apply_domain_shift(s, shift)),
    }
}
