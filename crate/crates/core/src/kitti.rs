//! KITTI object label files: 15 whitespace-separated columns per object,
//! plus an optional 16th column holding a detection score.
//!
//! | column | field |
//! |---|---|
//! | 1 | class name |
//! | 2 | truncated, 0..1 (-1 for `DontCare`) |
//! | 3 | occluded, 0..3 (-1 for `DontCare`) |
//! | 4 | alpha (observation angle), radians |
//! | 5–8 | 2D box left, top, right, bottom, pixels |
//! | 9–11 | dimensions h, w, l, meters |
//! | 12–14 | location x, y, z, meters |
//! | 15 | rotation_y, radians |
//! | 16 | score (predictions only) |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::angle::wrap;
use crate::error::KittiError;
use crate::eval::{AosDetection, AosGroundTruth, AosImage, AosInput, BoundingBox, Difficulty};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KittiRecord {
    pub class_name: String,
    /// `0..=1`, or `-1` when not annotated (`DontCare`).
    pub truncated: f64,
    /// `0..=3`, or `-1` when not annotated (`DontCare`).
    pub occluded: i8,
    pub alpha: f64,
    pub bbox: BoundingBox,
    /// h, w, l.
    pub dimensions: [f64; 3],
    /// x, y, z.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

const COLUMN_NAMES: [&str; 16] = [
    "class_name",
    "truncated",
    "occluded",
    "alpha",
    "left",
    "top",
    "right",
    "bottom",
    "height",
    "width",
    "length",
    "x",
    "y",
    "z",
    "rotation_y",
    "score",
];

impl KittiRecord {
    pub fn height(&self) -> f64 {
        self.bbox.bottom - self.bbox.top
    }

    /// One label line with two decimals per number.
    pub fn to_line(&self) -> String {
        let b = &self.bbox;
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        let mut s = format!(
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            self.class_name,
            self.truncated,
            self.occluded,
            self.alpha,
            b.left,
            b.top,
            b.right,
            b.bottom,
            h,
            w,
            l,
            x,
            y,
            z,
            self.rotation_y
        );
        if let Some(score) = self.score {
            let _ = write!(s, " {score:.2}");
        }
        s
    }
}

/// Parses one label line; `line` is the 1-based line number for errors.
pub fn parse_line(text: &str, line: usize) -> Result<KittiRecord, KittiError> {
    let cols: Vec<&str> = text.split_whitespace().collect();
    if cols.len() != 15 && cols.len() != 16 {
        return Err(KittiError::ColumnCount { line, found: cols.len() });
    }
    let num = |i: usize| -> Result<f64, KittiError> {
        cols[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| KittiError::Number {
                line,
                column: i + 1,
                name: COLUMN_NAMES[i],
                text: cols[i].to_string(),
            })
    };
    let invalid = |reason: String| KittiError::Invalid { line, reason };
    let truncated = num(1)?;
    let occluded = cols[2].parse::<i8>().map_err(|_| KittiError::Number {
        line,
        column: 3,
        name: COLUMN_NAMES[2],
        text: cols[2].to_string(),
    })?;
    if !(-1..=3).contains(&occluded) {
        return Err(invalid(format!("occluded must be 0..3 or -1, got {occluded}")));
    }
    if !(truncated == -1.0 || (0.0..=1.0).contains(&truncated)) {
        return Err(invalid(format!("truncated must be in [0, 1] or -1, got {truncated}")));
    }
    let bbox = BoundingBox {
        left: num(4)?,
        top: num(5)?,
        right: num(6)?,
        bottom: num(7)?,
    };
    if bbox.right <= bbox.left || bbox.bottom <= bbox.top {
        return Err(invalid("box has no area".into()));
    }
    Ok(KittiRecord {
        class_name: cols[0].to_string(),
        truncated,
        occluded,
        alpha: wrap(num(3)?).expect("finite").radians(),
        bbox,
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: wrap(num(14)?).expect("finite").radians(),
        score: if cols.len() == 16 { Some(num(15)?) } else { None },
    })
}

/// One record per non-empty line.
pub fn parse_labels(text: &str) -> Result<Vec<KittiRecord>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn parse_label_file(path: impl AsRef<Path>) -> Result<Vec<KittiRecord>, KittiError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KittiError::io(path, e))?;
    parse_labels(&text).map_err(|e| match e {
        KittiError::Io { .. } => e,
        other => KittiError::InFile {
            path: path.to_path_buf(),
            source: Box::new(other),
        },
    })
}

pub fn serialize_labels(records: &[KittiRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

/// Reads every `*.txt` file in `dir`, keyed by file stem (the image id).
pub fn load_label_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<KittiRecord>>, KittiError> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| KittiError::io(dir, e))? {
        let path = entry.map_err(|e| KittiError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("txt") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        out.insert(stem.to_string(), parse_label_file(&path)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyFilter {
    pub min_box_height: f64,
    pub max_occlusion: i8,
    pub max_truncation: f64,
}

impl DifficultyFilter {
    pub const EASY: Self = Self {
        min_box_height: 40.0,
        max_occlusion: 0,
        max_truncation: 0.15,
    };
    pub const MODERATE: Self = Self {
        min_box_height: 25.0,
        max_occlusion: 1,
        max_truncation: 0.30,
    };
    pub const HARD: Self = Self {
        min_box_height: 25.0,
        max_occlusion: 2,
        max_truncation: 0.50,
    };

    pub fn preset(level: Difficulty) -> Self {
        match level {
            Difficulty::Easy => Self::EASY,
            Difficulty::Moderate => Self::MODERATE,
            Difficulty::Hard => Self::HARD,
        }
    }

    pub fn validate(&self) -> Result<(), KittiError> {
        if !(self.min_box_height >= 0.0 && self.max_occlusion >= 0 && self.max_truncation >= 0.0) {
            return Err(KittiError::InvalidFilter("thresholds must be non-negative".into()));
        }
        Ok(())
    }

    /// Unannotated records (`-1` occlusion or truncation) never pass.
    pub fn accepts(&self, r: &KittiRecord) -> bool {
        r.occluded >= 0
            && r.truncated >= 0.0
            && r.height() >= self.min_box_height
            && r.occluded <= self.max_occlusion
            && r.truncated <= self.max_truncation
    }
}

pub fn filter_difficulty(records: &[KittiRecord], filter: &DifficultyFilter) -> Vec<KittiRecord> {
    records.iter().filter(|r| filter.accepts(r)).cloned().collect()
}

/// Easiest preset the record satisfies, if any.
pub fn difficulty_of(r: &KittiRecord) -> Option<Difficulty> {
    [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard]
        .into_iter()
        .find(|&d| DifficultyFilter::preset(d).accepts(r))
}

/// Pairs ground truth and predictions by image id, keeps `class_name` on
/// both sides, and scores `alpha`. Images present on only one side count
/// with an empty list on the other.
pub fn to_aos_input(
    ground_truth: &BTreeMap<String, Vec<KittiRecord>>,
    predictions: &BTreeMap<String, Vec<KittiRecord>>,
    class_name: &str,
) -> Result<AosInput, KittiError> {
    let mut ids: Vec<&String> = ground_truth.keys().chain(predictions.keys()).collect();
    ids.sort();
    ids.dedup();
    let empty = Vec::new();
    let mut images = Vec::with_capacity(ids.len());
    for id in ids {
        let mut image = AosImage::default();
        for (line, r) in predictions.get(id).unwrap_or(&empty).iter().enumerate() {
            if r.class_name != class_name {
                continue;
            }
            let score = r.score.ok_or_else(|| KittiError::MissingScore {
                image: id.clone(),
                line: line + 1,
            })?;
            image.predictions.push(AosDetection {
                bbox: r.bbox,
                score,
                orientation: r.alpha,
            });
        }
        for r in ground_truth.get(id).unwrap_or(&empty) {
            if r.class_name == class_name {
                image.ground_truths.push(AosGroundTruth {
                    bbox: r.bbox,
                    orientation: r.alpha,
                    difficulty: difficulty_of(r),
                });
            }
        }
        images.push(image);
    }
    Ok(AosInput { images })
}
