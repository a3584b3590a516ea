use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectError, Result};
use crate::geometry::{iou, BBox};
use crate::labelstore::{
    AnnotationEntry, BoxDocument, CategoryEntry, ClassLabel, ImageEntry, ImageRecord, Split,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenObject {
    pub object_id: String,
    pub class_label: ClassLabel,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenImage {
    pub record: ImageRecord,
    pub objects: Vec<HiddenObject>,
}

/// Parameters of a generated ground-truth world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub classes: Vec<String>,
    /// Relative class frequencies, aligned with `classes`.
    pub class_weights: Vec<f64>,
    pub image_count: usize,
    /// Leading images placed in the seed split.
    pub seed_images: usize,
    pub width: u32,
    pub height: u32,
    pub objects_per_image: (usize, usize),
    pub object_size: (f64, f64),
    /// New objects overlapping an existing one above this IoU are redrawn.
    pub max_overlap_iou: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: vec!["Rockfish".into(), "Starfish".into(), "Sponge".into()],
            class_weights: vec![0.5, 0.3, 0.2],
            image_count: 200,
            seed_images: 20,
            width: 1024,
            height: 768,
            objects_per_image: (8, 12),
            object_size: (40.0, 160.0),
            max_overlap_iou: 0.05,
        }
    }
}

/// The true objects of every image. Only the simulated detector and the
/// simulated workers may read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenWorld {
    pub classes: Vec<String>,
    pub images: BTreeMap<String, HiddenImage>,
}

impl HiddenWorld {
    pub fn generate(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        if cfg.classes.is_empty() || cfg.classes.len() != cfg.class_weights.len() {
            return Err(DetectError::InvalidConfig(
                "classes and class_weights must be non-empty and aligned".into(),
            ));
        }
        let total_w: f64 = cfg.class_weights.iter().sum();
        if !(total_w > 0.0) || cfg.class_weights.iter().any(|w| *w < 0.0) {
            return Err(DetectError::InvalidConfig("class weights must be non-negative".into()));
        }
        let (lo, hi) = cfg.object_size;
        if !(lo > 0.0 && lo <= hi && hi < f64::from(cfg.width.min(cfg.height))) {
            return Err(DetectError::InvalidConfig("object sizes must fit the image".into()));
        }
        let mut images = BTreeMap::new();
        for i in 0..cfg.image_count {
            let image_id = format!("img-{:04}", i + 1);
            let mut rng = rng::stream(seed, &["world", &image_id]);
            let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
            let n = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
            let mut objects: Vec<HiddenObject> = Vec::with_capacity(n);
            let mut attempts = 0;
            while objects.len() < n && attempts < 200 * n.max(1) {
                attempts += 1;
                let side = rng.random_range(lo..=hi);
                let aspect: f64 = rng.random_range(0.6..=1.6);
                let bw = (side * aspect.sqrt()).min(w - 1.0);
                let bh = (side / aspect.sqrt()).min(h - 1.0);
                let x = rng.random_range(0.0..=(w - bw));
                let y = rng.random_range(0.0..=(h - bh));
                let bbox = BBox::from_xywh(x, y, bw, bh)?;
                if objects.iter().any(|o| iou(&o.bbox, &bbox) > cfg.max_overlap_iou) {
                    continue;
                }
                let mut pick = rng.random_range(0.0..total_w);
                let mut class = cfg.classes.len() - 1;
                for (c, wt) in cfg.class_weights.iter().enumerate() {
                    if pick < *wt {
                        class = c;
                        break;
                    }
                    pick -= wt;
                }
                objects.push(HiddenObject {
                    object_id: format!("{image_id}-o{:02}", objects.len() + 1),
                    class_label: ClassLabel::object(cfg.classes[class].clone()),
                    bbox,
                });
            }
            let record = ImageRecord {
                image_id: image_id.clone(),
                width: cfg.width,
                height: cfg.height,
                uri: format!("sim://{image_id}.jpg"),
                split: if i < cfg.seed_images { Split::Seed } else { Split::Pool },
            };
            images.insert(image_id, HiddenImage { record, objects });
        }
        Ok(Self {
            classes: cfg.classes.clone(),
            images,
        })
    }

    pub fn image(&self, image_id: &str) -> Result<&HiddenImage> {
        self.images
            .get(image_id)
            .ok_or_else(|| DetectError::UnknownImage(image_id.to_string()))
    }

    pub fn objects(&self) -> impl Iterator<Item = (&str, &HiddenObject)> {
        self.images
            .iter()
            .flat_map(|(id, img)| img.objects.iter().map(move |o| (id.as_str(), o)))
    }

    pub fn object_count(&self) -> usize {
        self.images.values().map(|i| i.objects.len()).sum()
    }

    /// True object counts per class over the images in `splits`.
    pub fn class_totals(&self, splits: &[Split]) -> BTreeMap<String, u64> {
        let mut out: BTreeMap<String, u64> = self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for img in self.images.values().filter(|i| splits.contains(&i.record.split)) {
            for o in &img.objects {
                *out.entry(o.class_label.to_string()).or_default() += 1;
            }
        }
        out
    }

    /// A box document of the given images. `with_objects` selects whose true
    /// boxes are included; the rest appear as images only.
    pub fn document(&self, hidden: bool, with_objects: impl Fn(&HiddenImage) -> bool) -> BoxDocument {
        let categories: Vec<CategoryEntry> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, name)| CategoryEntry {
                id: i as u32 + 1,
                name: name.clone(),
            })
            .collect();
        let cat_id = |label: &ClassLabel| {
            categories
                .iter()
                .find(|c| c.name == label.as_str())
                .map_or(0, |c| c.id)
        };
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for img in self.images.values() {
            images.push(ImageEntry {
                id: img.record.image_id.clone(),
                width: img.record.width,
                height: img.record.height,
                uri: img.record.uri.clone(),
                split: img.record.split,
            });
            if with_objects(img) {
                for o in &img.objects {
                    annotations.push(AnnotationEntry {
                        id: o.object_id.clone(),
                        image_id: img.record.image_id.clone(),
                        category_id: cat_id(&o.class_label),
                        bbox: o.bbox.to_xywh(),
                        score: None,
                        state: None,
                    });
                }
            }
        }
        BoxDocument {
            hidden,
            images,
            categories,
            annotations,
        }
    }

    /// The full world as a hidden-marked box document.
    pub fn to_document(&self) -> BoxDocument {
        self.document(true, |_| true)
    }

    pub fn from_document(doc: &BoxDocument) -> Result<Self> {
        if !doc.hidden {
            return Err(DetectError::NotHidden);
        }
        let cats = doc.category_map()?;
        let mut images: BTreeMap<String, HiddenImage> = doc
            .images
            .iter()
            .map(|e| {
                let record = ImageRecord {
                    image_id: e.id.clone(),
                    width: e.width,
                    height: e.height,
                    uri: e.uri.clone(),
                    split: e.split,
                };
                (e.id.clone(), HiddenImage { record, objects: Vec::new() })
            })
            .collect();
        for a in &doc.annotations {
            let class_label = cats
                .get(&a.category_id)
                .cloned()
                .ok_or_else(|| DetectError::InvalidConfig(format!("{}: unknown category {}", a.id, a.category_id)))?;
            let [x, y, w, h] = a.bbox;
            let img = images
                .get_mut(&a.image_id)
                .ok_or_else(|| DetectError::UnknownImage(a.image_id.clone()))?;
            img.objects.push(HiddenObject {
                object_id: a.id.clone(),
                class_label,
                bbox: BBox::from_xywh(x, y, w, h)?,
            });
        }
        Ok(Self {
            classes: doc.class_names(),
            images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_document().to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_document(&BoxDocument::from_json(&text)?)
    }
}
