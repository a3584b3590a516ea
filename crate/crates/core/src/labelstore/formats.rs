//! Interchange formats.
//!
//! box-JSON is a small COCO-like subset:
//!
//! ```json
//! {
//!   "images": [{"id": "img-1", "width": 2448, "height": 2050, "uri": "...", "split": "seed"}],
//!   "categories": [{"id": 1, "name": "Rockfish"}],
//!   "annotations": [{"id": "a-1", "image_id": "img-1", "category_id": 1, "bbox": [x, y, w, h]}]
//! }
//! ```
//!
//! Background records use `category_id` 0 and only appear when explicitly
//! exported. A document carrying `"hidden": true` is simulation ground truth
//! and is refused by [`LabelStore::import_boxes`].
//!
//! dot-CSV is UTF-8 with the header `image_id,x,y,class_label`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    Annotation, AnnotationState, ClassCatalog, ClassLabel, Dataset, ImageRecord, LabelStore,
    Result, Split, StoreError, StoreEvent,
};
use crate::geometry::{dot_to_seed_box, BBox, Dot};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDocument {
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub hidden: bool,
    pub images: Vec<ImageEntry>,
    pub categories: Vec<CategoryEntry>,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub uri: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryEntry {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationEntry {
    pub id: String,
    pub image_id: String,
    pub category_id: u32,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<AnnotationState>,
}

impl BoxDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Pretty-printed JSON; byte-stable for a fixed document.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("box document serializes");
        s.push('\n');
        s
    }

    /// Maps category ids to labels, with 0 reserved for `Background`.
    pub fn category_map(&self) -> Result<BTreeMap<u32, ClassLabel>> {
        let mut map = BTreeMap::new();
        for c in &self.categories {
            let label = ClassLabel::from(c.name.as_str());
            if (c.id == 0) != label.is_background() {
                return Err(StoreError::Schema {
                    record: format!("category {}", c.id),
                    reason: "category id 0 is reserved for Background".into(),
                });
            }
            if map.insert(c.id, label).is_some() {
                return Err(StoreError::Schema {
                    record: format!("category {}", c.id),
                    reason: "duplicate category id".into(),
                });
            }
        }
        Ok(map)
    }

    /// Object class names in category-id order.
    pub fn class_names(&self) -> Vec<String> {
        let mut cats: Vec<_> = self.categories.iter().filter(|c| c.id != 0).collect();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ImportSummary {
    pub images_added: usize,
    pub annotations_added: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DotRow {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub class_label: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct DotImportSummary {
    pub annotations_added: usize,
    pub images_added: usize,
    /// One message per skipped dot.
    pub skipped: Vec<String>,
}

impl LabelStore {
    /// Imports a box-JSON document; every annotation is stored as `Seed`.
    /// Boxes are clipped to their image. Either the whole document is
    /// imported or nothing is.
    pub fn import_boxes(&mut self, doc: &BoxDocument) -> Result<ImportSummary> {
        if doc.hidden {
            return Err(StoreError::HiddenWorld);
        }
        let categories = doc.category_map()?;
        let mut staged = self.clone();
        if staged.catalog().is_empty() {
            staged.commit(StoreEvent::CatalogDefined {
                classes: doc.class_names(),
            })?;
        }
        let unknown: Vec<String> = categories
            .values()
            .filter(|c| !c.is_background() && !staged.catalog().knows(c))
            .map(ToString::to_string)
            .collect();
        if !unknown.is_empty() {
            return Err(StoreError::UnknownClasses(unknown));
        }

        let mut summary = ImportSummary::default();
        for img in &doc.images {
            let record = ImageRecord {
                image_id: img.id.clone(),
                width: img.width,
                height: img.height,
                uri: img.uri.clone(),
                split: img.split,
            };
            let existed = staged.dataset().images.contains_key(&img.id);
            staged.add_image(record)?;
            if !existed {
                summary.images_added += 1;
            }
        }
        for entry in &doc.annotations {
            let schema = |reason: String| StoreError::Schema {
                record: entry.id.clone(),
                reason,
            };
            let label = categories
                .get(&entry.category_id)
                .ok_or_else(|| schema(format!("unknown category_id {}", entry.category_id)))?;
            if label.is_background() {
                return Err(schema("seed annotations cannot be Background".into()));
            }
            let image = staged
                .dataset()
                .image(&entry.image_id)
                .ok_or_else(|| schema(format!("unknown image_id {}", entry.image_id)))?;
            let (w, h) = image.extent();
            let [x, y, bw, bh] = entry.bbox;
            let bbox = BBox::from_xywh(x, y, bw, bh)
                .and_then(|b| b.clip_to(w, h))
                .map_err(|e| schema(e.to_string()))?;
            staged.add_annotation(Annotation::new(
                entry.id.clone(),
                entry.image_id.clone(),
                label.clone(),
                bbox,
                AnnotationState::Seed,
                None,
            ))?;
            summary.annotations_added += 1;
        }
        *self = staged;
        Ok(summary)
    }

    /// Imports legacy dots as `Predicted` seed boxes awaiting tightening.
    ///
    /// Images not yet in the store are created with `default_extent` when
    /// given; otherwise their rows are skipped. Out-of-bounds dots are skipped
    /// with a warning. Unknown classes fail the whole import.
    pub fn import_dots<R: Read>(
        &mut self,
        reader: R,
        half_extent: f64,
        default_extent: Option<(u32, u32)>,
    ) -> Result<DotImportSummary> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| StoreError::Csv(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["image_id", "x", "y", "class_label"] {
            return Err(StoreError::Schema {
                record: "header".into(),
                reason: "expected image_id,x,y,class_label".into(),
            });
        }
        let mut rows = Vec::new();
        for (i, row) in rdr.deserialize::<DotRow>().enumerate() {
            rows.push(row.map_err(|e| StoreError::Schema {
                record: format!("row {}", i + 2),
                reason: e.to_string(),
            })?);
        }
        let unknown: BTreeSet<String> = rows
            .iter()
            .filter(|r| !self.catalog().contains(&r.class_label))
            .map(|r| r.class_label.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(StoreError::UnknownClasses(unknown.into_iter().collect()));
        }

        let mut staged = self.clone();
        let mut summary = DotImportSummary::default();
        for (i, row) in rows.into_iter().enumerate() {
            if staged.dataset().image(&row.image_id).is_none() {
                match default_extent {
                    Some((width, height)) => {
                        staged.add_image(ImageRecord {
                            image_id: row.image_id.clone(),
                            width,
                            height,
                            uri: String::new(),
                            split: Split::Pool,
                        })?;
                        summary.images_added += 1;
                    }
                    None => {
                        let msg = format!("row {}: unknown image {}", i + 2, row.image_id);
                        warn!("skipping dot: {msg}");
                        summary.skipped.push(msg);
                        continue;
                    }
                }
            }
            let extent = staged.dataset().images[&row.image_id].extent();
            let dot = Dot {
                x: row.x,
                y: row.y,
                class_label: row.class_label.clone(),
            };
            match dot_to_seed_box(&dot, half_extent, extent) {
                Ok(bbox) => {
                    let id = staged.fresh_ann_id("dot");
                    staged.add_annotation(Annotation::new(
                        id,
                        row.image_id,
                        ClassLabel::Object(row.class_label),
                        bbox,
                        AnnotationState::Predicted,
                        None,
                    ))?;
                    summary.annotations_added += 1;
                }
                Err(e) => {
                    let msg = format!("row {}: {e}", i + 2);
                    warn!("skipping dot: {msg}");
                    summary.skipped.push(msg);
                }
            }
        }
        *self = staged;
        Ok(summary)
    }
}

impl Dataset {
    /// Exports annotations in `states` as box-JSON, sorted by image then
    /// annotation id. Background records are included only on request.
    pub fn export_boxes(&self, states: &[AnnotationState], include_background: bool) -> BoxDocument {
        let ids = category_ids(&self.catalog);
        let mut categories: Vec<CategoryEntry> = self
            .catalog
            .names()
            .iter()
            .map(|n| CategoryEntry {
                id: ids[n.as_str()],
                name: n.clone(),
            })
            .collect();
        if include_background {
            categories.insert(
                0,
                CategoryEntry {
                    id: 0,
                    name: super::BACKGROUND.into(),
                },
            );
        }
        let images = self
            .images
            .values()
            .map(|i| ImageEntry {
                id: i.image_id.clone(),
                width: i.width,
                height: i.height,
                uri: i.uri.clone(),
                split: i.split,
            })
            .collect();
        let mut anns: Vec<&Annotation> = self
            .annotations_in(states)
            .filter(|a| include_background || !a.class_label.is_background())
            .collect();
        anns.sort_by(|a, b| (&a.image_id, &a.ann_id).cmp(&(&b.image_id, &b.ann_id)));
        let annotations = anns
            .into_iter()
            .map(|a| AnnotationEntry {
                id: a.ann_id.clone(),
                image_id: a.image_id.clone(),
                category_id: match &a.class_label {
                    ClassLabel::Background => 0,
                    ClassLabel::Object(n) => ids[n.as_str()],
                },
                bbox: a.bbox.to_xywh(),
                score: a.score,
                state: Some(a.state),
            })
            .collect();
        BoxDocument {
            hidden: false,
            images,
            categories,
            annotations,
        }
    }
}

fn category_ids(catalog: &ClassCatalog) -> BTreeMap<&str, u32> {
    catalog
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i as u32 + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn catalog() -> ClassCatalog {
        ClassCatalog::new(["Rockfish", "Starfish", "Sponge"]).unwrap()
    }

    fn cats() -> Vec<CategoryEntry> {
        ["Rockfish", "Starfish", "Sponge"]
            .iter()
            .enumerate()
            .map(|(i, n)| CategoryEntry {
                id: i as u32 + 1,
                name: n.to_string(),
            })
            .collect()
    }

    fn img(id: &str) -> ImageEntry {
        ImageEntry {
            id: id.into(),
            width: 2448,
            height: 2050,
            uri: String::new(),
            split: Split::Seed,
        }
    }

    fn seed_document(counts: [usize; 3]) -> BoxDocument {
        let mut doc = BoxDocument {
            images: (0..50).map(|i| img(&format!("seed-{i:03}"))).collect(),
            categories: cats(),
            ..Default::default()
        };
        let mut n = 0;
        for (cat, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let x = (n % 40) as f64 * 55.0;
                let y = ((n / 40) % 30) as f64 * 60.0;
                doc.annotations.push(AnnotationEntry {
                    id: format!("ann-{n:05}"),
                    image_id: format!("seed-{:03}", n % 50),
                    category_id: cat as u32 + 1,
                    bbox: [x, y, 50.0, 40.0],
                    score: None,
                    state: None,
                });
                n += 1;
            }
        }
        doc
    }

    #[test]
    fn seed_import_counts_match_initial_dataset() {
        let mut store = LabelStore::new(catalog());
        let summary = store.import_boxes(&seed_document([965, 650, 2005])).unwrap();
        assert_eq!(summary.annotations_added, 3620);
        let counts = store.dataset().class_counts(&[AnnotationState::Seed]);
        assert_eq!(counts[&ClassLabel::object("Rockfish")], 965);
        assert_eq!(counts[&ClassLabel::object("Starfish")], 650);
        assert_eq!(counts[&ClassLabel::object("Sponge")], 2005);
        let bg = store
            .dataset()
            .class_counts(&[AnnotationState::BackgroundConfirmed]);
        assert!(bg.values().all(|&c| c == 0));
    }

    #[test]
    fn empty_image_import() {
        let mut store = LabelStore::new(catalog());
        let doc = BoxDocument {
            images: (0..2026).map(|i| img(&format!("empty-{i:04}"))).collect(),
            categories: cats(),
            ..Default::default()
        };
        let summary = store.import_boxes(&doc).unwrap();
        assert_eq!(summary.images_added, 2026);
        assert_eq!(store.dataset().images.len(), 2026);
        assert!(store.dataset().annotations.is_empty());
    }

    #[test]
    fn inverted_box_names_the_record_and_imports_nothing() {
        let mut store = LabelStore::new(catalog());
        let mut doc = seed_document([2, 0, 0]);
        doc.annotations.push(AnnotationEntry {
            id: "broken".into(),
            image_id: "seed-000".into(),
            category_id: 1,
            bbox: [10.0, 10.0, -3.0, 5.0],
            score: None,
            state: None,
        });
        let err = store.import_boxes(&doc).unwrap_err();
        match err {
            StoreError::Schema { record, .. } => assert_eq!(record, "broken"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(store.dataset().annotations.is_empty());
        assert!(store.dataset().images.is_empty());
    }

    #[test]
    fn duplicate_ids_and_hidden_documents_are_refused() {
        let mut store = LabelStore::new(catalog());
        let mut doc = seed_document([2, 0, 0]);
        doc.annotations[1].id = doc.annotations[0].id.clone();
        assert!(matches!(
            store.import_boxes(&doc),
            Err(StoreError::DuplicateAnnotation(_))
        ));
        let mut hidden = seed_document([1, 0, 0]);
        hidden.hidden = true;
        assert!(matches!(
            store.import_boxes(&hidden),
            Err(StoreError::HiddenWorld)
        ));
        let text = hidden.to_json();
        assert!(text.contains("\"hidden\": true"));
    }

    #[test]
    fn boxes_are_clipped_on_ingestion() {
        let mut store = LabelStore::new(catalog());
        let mut doc = seed_document([0, 0, 0]);
        doc.annotations.push(AnnotationEntry {
            id: "edge".into(),
            image_id: "seed-001".into(),
            category_id: 2,
            bbox: [2400.0, -10.0, 100.0, 50.0],
            score: None,
            state: None,
        });
        store.import_boxes(&doc).unwrap();
        let a = store.dataset().annotation("edge").unwrap();
        assert_eq!(a.bbox, BBox::new(2400.0, 0.0, 2448.0, 40.0).unwrap());
    }

    #[test]
    fn dots_become_predicted_seed_boxes() {
        let mut store = LabelStore::new(catalog());
        let csv = "image_id,x,y,class_label\n\
                   img-a,100,100,Rockfish\n\
                   img-a,500,400,Rockfish\n\
                   img-a,900,800,Sponge\n";
        let s = store
            .import_dots(csv.as_bytes(), 40.0, Some((2448, 2050)))
            .unwrap();
        assert_eq!(s.annotations_added, 3);
        assert!(s.skipped.is_empty());
        for a in store.dataset().annotations.values() {
            assert_eq!(a.state, AnnotationState::Predicted);
            assert_eq!(a.bbox.width(), 80.0);
            assert_eq!(a.bbox.height(), 80.0);
        }
    }

    #[test]
    fn out_of_bounds_dot_is_skipped() {
        let mut store = LabelStore::new(catalog());
        let csv = "image_id,x,y,class_label\nimg-a,-5,10,Rockfish\nimg-a,5,10,Rockfish\n";
        let s = store
            .import_dots(csv.as_bytes(), 40.0, Some((2448, 2050)))
            .unwrap();
        assert_eq!(s.annotations_added, 1);
        assert_eq!(s.skipped.len(), 1);
        assert!(s.skipped[0].contains("row 2"));
    }

    #[test]
    fn unknown_dot_classes_are_listed() {
        let mut store = LabelStore::new(catalog());
        let csv = "image_id,x,y,class_label\nimg-a,5,5,Eel\nimg-a,6,6,Crab\nimg-a,7,7,Eel\n";
        match store.import_dots(csv.as_bytes(), 40.0, Some((100, 100))) {
            Err(StoreError::UnknownClasses(list)) => assert_eq!(list, vec!["Crab", "Eel"]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(store.dataset().images.is_empty());
    }

    #[test]
    fn large_dot_file_imports_every_row() {
        let mut store = LabelStore::new(catalog());
        let mut csv = String::from("image_id,x,y,class_label\n");
        for i in 0..91_432u32 {
            csv.push_str(&format!(
                "noaa-{:05},{},{},Rockfish\n",
                i / 40,
                50 + (i % 40) * 55,
                60 + (i % 7) * 250
            ));
        }
        let s = store
            .import_dots(csv.as_bytes(), 40.0, Some((2448, 2050)))
            .unwrap();
        assert_eq!(s.annotations_added, 91_432);
        let counts = store.dataset().class_counts(&[AnnotationState::Predicted]);
        assert_eq!(counts[&ClassLabel::object("Rockfish")], 91_432);
    }

    #[test]
    fn export_is_sorted_and_stable() {
        let mut store = LabelStore::new(catalog());
        store.import_boxes(&seed_document([5, 3, 4])).unwrap();
        let a = store
            .dataset()
            .export_boxes(&[AnnotationState::Seed], false)
            .to_json();
        let b = store
            .dataset()
            .export_boxes(&[AnnotationState::Seed], false)
            .to_json();
        assert_eq!(a, b);
        let doc = BoxDocument::from_json(&a).unwrap();
        let keys: Vec<_> = doc
            .annotations
            .iter()
            .map(|x| (x.image_id.clone(), x.id.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let empty = LabelStore::new(catalog())
            .dataset()
            .export_boxes(&AnnotationState::ALL, false);
        assert!(empty.annotations.is_empty());
    }

    proptest! {
        #[test]
        fn export_then_import_preserves_counts_and_boxes(
            boxes in proptest::collection::vec((0u32..3, 0.0f64..2000.0, 0.0f64..1800.0, 1.0f64..300.0, 1.0f64..200.0), 0..40)
        ) {
            let mut store = LabelStore::new(catalog());
            let mut doc = BoxDocument { images: vec![img("only")], categories: cats(), ..Default::default() };
            for (i, (c, x, y, w, h)) in boxes.iter().enumerate() {
                doc.annotations.push(AnnotationEntry {
                    id: format!("a{i}"), image_id: "only".into(), category_id: c + 1,
                    bbox: [*x, *y, *w, *h], score: None, state: None,
                });
            }
            store.import_boxes(&doc).unwrap();
            let exported = store.dataset().export_boxes(&[AnnotationState::Seed], false);
            let mut again = LabelStore::new(catalog());
            again.import_boxes(&BoxDocument::from_json(&exported.to_json()).unwrap()).unwrap();
            prop_assert_eq!(
                again.dataset().class_counts(&AnnotationState::ALL),
                store.dataset().class_counts(&AnnotationState::ALL)
            );
            for (id, a) in &store.dataset().annotations {
                let b = &again.dataset().annotations[id];
                for (u, v) in a.bbox.to_xyxy().iter().zip(b.bbox.to_xyxy()) {
                    prop_assert!((u - v).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn counts_over_disjoint_states_sum_to_total(n in 0usize..30, k in 0usize..30) {
            let mut store = LabelStore::new(catalog());
            store.import_boxes(&seed_document([n, k, 1])).unwrap();
            let total: u64 = AnnotationState::ALL
                .iter()
                .map(|s| store.dataset().class_counts(&[*s]).values().sum::<u64>())
                .sum();
            prop_assert_eq!(total as usize, store.dataset().annotations.len());
        }
    }
}
