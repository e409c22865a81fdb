//! Textual and visual perturbation tests built from true-positive closed
//! answers.
//!
//! Both tests turn a correctly answered "Yes" question into one whose
//! correct answer is "No": the textual test swaps the anatomy or disease
//! term, the visual test pastes the queried anatomy from a scene that lacks
//! the queried disease there.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{closed_template_of, render_closed, DatasetShard, QAItem, QaKind};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, PixelMask, ANATOMIES};
use crate::metrics::{normalize_yesno, YesNo};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Textual,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwappedField {
    Anatomy,
    Disease,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub base_qa_id: String,
    pub scene_id: String,
    pub mode: PerturbMode,
    pub swapped_field: SwappedField,
    pub new_entity: Option<String>,
    pub donor_scene_id: Option<String>,
    pub perturbed_question: Option<String>,
    pub perturbed_image: Option<Vec<f64>>,
    pub expected_flip: bool,
}

impl PerturbationRecord {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            PerturbMode::Textual => {
                self.swapped_field != SwappedField::None && self.perturbed_question.is_some()
            }
            PerturbMode::Visual => self.donor_scene_id.is_some() && self.perturbed_image.is_some(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InconsistentItem {
                qa_id: self.base_qa_id.clone(),
                reason: format!("{:?} record is missing its perturbation", self.mode),
            })
        }
    }

    /// The (anatomy, disease) pair the perturbed question asks about.
    pub fn queried_pair(&self, base: &QAItem) -> (String, String) {
        let disease = base.disease.clone().unwrap_or_default();
        match (self.swapped_field, &self.new_entity) {
            (SwappedField::Anatomy, Some(a)) => (a.clone(), disease),
            (SwappedField::Disease, Some(d)) => (base.anatomy.clone(), d.clone()),
            _ => (base.anatomy.clone(), disease),
        }
    }
}

/// Positive closed items answered "yes".
pub fn select_true_positives(
    predictions: &BTreeMap<String, String>,
    shard: &DatasetShard,
) -> Result<Vec<QAItem>> {
    let mut out = Vec::new();
    for item in shard.qa.iter().filter(|q| q.kind == QaKind::PositiveClosed) {
        let answer = predictions
            .get(&item.qa_id)
            .ok_or_else(|| Error::MissingPrediction(item.qa_id.clone()))?;
        if normalize_yesno(answer) == YesNo::Yes {
            out.push(item.clone());
        }
    }
    Ok(out)
}

fn require_positive(item: &QAItem) -> Result<&str> {
    match (&item.kind, &item.disease) {
        (QaKind::PositiveClosed, Some(d)) => Ok(d),
        _ => Err(Error::InconsistentItem {
            qa_id: item.qa_id.clone(),
            reason: "perturbations apply to positive closed items only".into(),
        }),
    }
}

/// Swaps the anatomy or the disease of a true-positive question for a term
/// that makes the pair absent from the scene. `Ok(None)` means no valid
/// replacement exists and the item is skipped.
pub fn tpt_swap(item: &QAItem, shard: &DatasetShard, seed: u64) -> Result<Option<PerturbationRecord>> {
    let disease = require_positive(item)?;
    let relations = shard.relations(&item.scene_id).ok_or_else(|| Error::InconsistentItem {
        qa_id: item.qa_id.clone(),
        reason: format!("no relations for scene `{}`", item.scene_id),
    })?;
    let vocab = shard.disease_vocab();
    let anatomy_options: Vec<&str> = ANATOMIES
        .iter()
        .copied()
        .filter(|a| *a != item.anatomy && !relations.contains(a, disease))
        .collect();
    let disease_options: Vec<&str> = vocab
        .iter()
        .map(String::as_str)
        .filter(|d| *d != disease && !relations.contains(&item.anatomy, d))
        .collect();

    let mut fields = Vec::new();
    if !anatomy_options.is_empty() {
        fields.push(SwappedField::Anatomy);
    }
    if !disease_options.is_empty() {
        fields.push(SwappedField::Disease);
    }
    let mut rng = seed::rng(seed);
    let Some(&field) = fields.choose(&mut rng) else {
        return Ok(None);
    };
    let (anatomy, new_disease, entity) = match field {
        SwappedField::Anatomy => {
            let a = *anatomy_options.choose(&mut rng).expect("non-empty");
            (a, disease, a)
        }
        _ => {
            let d = *disease_options.choose(&mut rng).expect("non-empty");
            (item.anatomy.as_str(), d, d)
        }
    };
    debug_assert!(!relations.contains(anatomy, new_disease));
    let template = closed_template_of(&item.question).unwrap_or(0);
    Ok(Some(PerturbationRecord {
        base_qa_id: item.qa_id.clone(),
        scene_id: item.scene_id.clone(),
        mode: PerturbMode::Textual,
        swapped_field: field,
        new_entity: Some(entity.to_string()),
        donor_scene_id: None,
        perturbed_question: Some(render_closed(template, anatomy, new_disease)),
        perturbed_image: None,
        expected_flip: true,
    }))
}

/// Nearest-neighbour resample of `donor_rect` onto `target_rect`, written
/// only where `target_mask` is set.
pub fn paste_region(
    target: &[f64],
    target_mask: &PixelMask,
    target_rect: BoundingBox,
    donor: &[f64],
    donor_width: usize,
    donor_rect: BoundingBox,
) -> Vec<f64> {
    let width = target_mask.width;
    let mut out = target.to_vec();
    let (tw, th) = (target_rect.width(), target_rect.height());
    let (dw, dh) = (donor_rect.width(), donor_rect.height());
    for y in target_rect.y0..target_rect.y1 {
        let sy = donor_rect.y0 + (y - target_rect.y0) * dh / th;
        for x in target_rect.x0..target_rect.x1 {
            let idx = y * width + x;
            if !target_mask.contains(idx) {
                continue;
            }
            let sx = donor_rect.x0 + (x - target_rect.x0) * dw / tw;
            out[idx] = donor[sy * donor_width + sx];
        }
    }
    out
}

/// Replaces the queried anatomy with the same anatomy from a scene that
/// lacks the queried relation. `Ok(None)` means no eligible donor.
pub fn vpt_blend(item: &QAItem, shard: &DatasetShard, seed: u64) -> Result<Option<PerturbationRecord>> {
    let disease = require_positive(item)?;
    let scene = shard.scene(&item.scene_id).ok_or_else(|| Error::InconsistentItem {
        qa_id: item.qa_id.clone(),
        reason: format!("unknown scene `{}`", item.scene_id),
    })?;
    let target_mask = scene.anatomies.get(&item.anatomy).ok_or_else(|| Error::InconsistentItem {
        qa_id: item.qa_id.clone(),
        reason: format!("scene has no `{}` mask", item.anatomy),
    })?;
    let Some(target_rect) = target_mask.bounding_rect() else {
        return Ok(None);
    };
    let donors: Vec<usize> = shard
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.scene_id != scene.scene_id)
        .filter(|(_, s)| {
            s.anatomies
                .get(&item.anatomy)
                .and_then(PixelMask::bounding_rect)
                .is_some()
        })
        .filter(|(_, s)| {
            shard
                .relations(&s.scene_id)
                .is_some_and(|r| !r.contains(&item.anatomy, disease))
        })
        .map(|(i, _)| i)
        .collect();
    let mut rng = seed::rng(seed);
    if donors.is_empty() {
        return Ok(None);
    }
    let donor = &shard.scenes[donors[rng.random_range(0..donors.len())]];
    let donor_rect = donor.anatomies[&item.anatomy]
        .bounding_rect()
        .expect("filtered to non-empty masks");
    let image = paste_region(&scene.image, target_mask, target_rect, &donor.image, donor.width, donor_rect);
    Ok(Some(PerturbationRecord {
        base_qa_id: item.qa_id.clone(),
        scene_id: item.scene_id.clone(),
        mode: PerturbMode::Visual,
        swapped_field: SwappedField::None,
        new_entity: None,
        donor_scene_id: Some(donor.scene_id.clone()),
        perturbed_question: None,
        perturbed_image: Some(image),
        expected_flip: true,
    }))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerturbationSet {
    pub records: Vec<PerturbationRecord>,
    pub skipped: Vec<String>,
}

/// Runs one perturbation test over the true positives, with per-item seeds
/// derived from `seed`.
pub fn perturb_all(items: &[QAItem], shard: &DatasetShard, mode: PerturbMode, seed: u64) -> Result<PerturbationSet> {
    let mut set = PerturbationSet::default();
    let stream = match mode {
        PerturbMode::Textual => "tpt",
        PerturbMode::Visual => "vpt",
    };
    for (i, item) in items.iter().enumerate() {
        let item_seed = seed::stream_seed(seed, stream, i as u64);
        let rec = match mode {
            PerturbMode::Textual => tpt_swap(item, shard, item_seed)?,
            PerturbMode::Visual => vpt_blend(item, shard, item_seed)?,
        };
        match rec {
            Some(r) => set.records.push(r),
            None => set.skipped.push(item.qa_id.clone()),
        }
    }
    Ok(set)
}

pub fn write_records(records: &[PerturbationRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PerturbationRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PerturbationRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}
