//! COCO-like JSON annotation and detection files.
//!
//! Boxes are stored as `[x, y, w, h]` to mirror COCO and converted to the
//! internal corner form at this boundary only. Loaders reject invalid
//! input instead of repairing it, and every write is atomic
//! (temp-file-then-rename).

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use detkit_core::geometry::BBox;
use detkit_core::{Detection, GroundTruthObject};

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid {path}: {what}")]
    Invalid { path: String, what: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: i64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: i64,
    pub category_id: i64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_iou: Option<f64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PersistError> {
    let text = fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PersistError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Serializes `value` and atomically replaces `path`.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PersistError::Json {
        path: path.display().to_string(),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

/// Writes bytes to a temp file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io_err = |source| PersistError::Io { path: path.display().to_string(), source };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        )),
        None => Path::new(&format!(".{}.tmp", path.display())).to_path_buf(),
    };
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn check_unique(ids: impl Iterator<Item = i64>, section: &str, path: &Path) -> Result<(), PersistError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(PersistError::Invalid {
                path: path.display().to_string(),
                what: format!("duplicate id {id} in {section}"),
            });
        }
    }
    Ok(())
}

fn box_from_xywh(bbox: [f64; 4], context: &str, path: &Path) -> Result<BBox, PersistError> {
    let [x, y, w, h] = bbox;
    if !(w >= 0.0 && h >= 0.0) || !bbox.iter().all(|v| v.is_finite()) {
        return Err(PersistError::Invalid {
            path: path.display().to_string(),
            what: format!("{context}: bbox [x, y, w, h] must be finite with w, h >= 0, got {bbox:?}"),
        });
    }
    Ok(BBox::new(x, y, x + w, y + h))
}

/// Loads and validates an annotation file. Annotations with zero-area
/// boxes, dangling references, or duplicate ids are rejected with the
/// offending ids in the message.
pub fn load_annotations(path: &Path) -> Result<Vec<GroundTruthObject>, PersistError> {
    let file: AnnotationFile = read_json(path)?;
    let invalid = |what: String| PersistError::Invalid { path: path.display().to_string(), what };

    check_unique(file.images.iter().map(|i| i.id), "images", path)?;
    check_unique(file.annotations.iter().map(|a| a.id), "annotations", path)?;
    check_unique(file.categories.iter().map(|c| c.id), "categories", path)?;
    let image_ids: HashSet<i64> = file.images.iter().map(|i| i.id).collect();
    let category_ids: HashSet<i64> = file.categories.iter().map(|c| c.id).collect();

    file.annotations
        .iter()
        .map(|ann| {
            if !image_ids.contains(&ann.image_id) {
                return Err(invalid(format!(
                    "annotation id {} references unknown image_id {}",
                    ann.id, ann.image_id
                )));
            }
            if !category_ids.contains(&ann.category_id) {
                return Err(invalid(format!(
                    "annotation id {} references unknown category_id {}",
                    ann.id, ann.category_id
                )));
            }
            let bbox = box_from_xywh(ann.bbox, &format!("annotation id {}", ann.id), path)?;
            if !bbox.is_non_degenerate() {
                return Err(invalid(format!(
                    "annotation id {} has a degenerate box {:?}",
                    ann.id, ann.bbox
                )));
            }
            Ok(GroundTruthObject {
                image_id: ann.image_id,
                category_id: ann.category_id,
                bbox,
            })
        })
        .collect()
}

/// Loads and validates a detection file (a JSON array of records).
pub fn load_detections(path: &Path) -> Result<Vec<Detection>, PersistError> {
    let records: Vec<DetectionRecord> = read_json(path)?;
    let invalid = |what: String| PersistError::Invalid { path: path.display().to_string(), what };

    records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(invalid(format!(
                    "detection {i}: score {} outside [0, 1]",
                    rec.score
                )));
            }
            if let Some(p) = rec.predicted_iou {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!(
                        "detection {i}: predicted_iou {p} outside [0, 1]"
                    )));
                }
            }
            Ok(Detection {
                image_id: rec.image_id,
                category_id: rec.category_id,
                bbox: box_from_xywh(rec.bbox, &format!("detection {i}"), path)?,
                score: rec.score,
                predicted_iou: rec.predicted_iou,
                confidence: None,
            })
        })
        .collect()
}

fn xywh_of(bbox: &BBox) -> [f64; 4] {
    [bbox.x1, bbox.y1, bbox.width(), bbox.height()]
}

/// Writes ground truths as an annotation file. Image entries are
/// synthesized for every referenced image id with the given canvas size;
/// category entries for every referenced category.
pub fn save_annotations(
    path: &Path,
    gts: &[GroundTruthObject],
    canvas: (f64, f64),
) -> Result<(), PersistError> {
    let mut image_ids: Vec<i64> = gts.iter().map(|g| g.image_id).collect();
    image_ids.sort_unstable();
    image_ids.dedup();
    let mut category_ids: Vec<i64> = gts.iter().map(|g| g.category_id).collect();
    category_ids.sort_unstable();
    category_ids.dedup();

    let file = AnnotationFile {
        images: image_ids
            .into_iter()
            .map(|id| ImageInfo { id, width: canvas.0, height: canvas.1 })
            .collect(),
        annotations: gts
            .iter()
            .enumerate()
            .map(|(i, g)| Annotation {
                id: i as i64 + 1,
                image_id: g.image_id,
                category_id: g.category_id,
                bbox: xywh_of(&g.bbox),
            })
            .collect(),
        categories: category_ids
            .into_iter()
            .map(|id| Category { id, name: format!("category_{id}") })
            .collect(),
    };
    write_json_atomic(path, &file)
}

/// Writes detections as a detection file. Fused confidences are not
/// persisted; they are recomputed from score and predicted IoU on load.
pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<(), PersistError> {
    let records: Vec<DetectionRecord> = dets
        .iter()
        .map(|d| DetectionRecord {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: xywh_of(&d.bbox),
            score: d.score,
            predicted_iou: d.predicted_iou,
        })
        .collect();
    write_json_atomic(path, &records)
}
