//! Synthetic scene generation, template question generation and JSONL
//! dataset shards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{map_relations, BoundingBox, PixelMask, RelationMap, SceneAnnotation, ANATOMIES};
use crate::seed;

/// Intensity pattern used to render a disease inside its box. Patterns are
/// evaluated in absolute pixel coordinates so they stay phase-aligned with
/// the model's patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TexturePattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Dots,
    Blocks,
}

impl TexturePattern {
    pub fn value(self, x: usize, y: usize) -> f64 {
        let on = match self {
            TexturePattern::Solid => true,
            TexturePattern::HorizontalStripes => y % 2 == 0,
            TexturePattern::VerticalStripes => x % 2 == 0,
            TexturePattern::Checker => (x + y) % 2 == 0,
            TexturePattern::Dots => x % 2 == 0 && y % 2 == 0,
            TexturePattern::Blocks => (x / 2 + y / 2) % 2 == 0,
        };
        if on {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseSpec {
    pub label: String,
    pub pattern: TexturePattern,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub disease_vocab: Vec<DiseaseSpec>,
    /// Inclusive range of disease boxes per scene.
    pub diseases_per_scene: (usize, usize),
    /// Inclusive range of disease box side lengths, in pixels.
    pub box_side: (usize, usize),
    pub rng_seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let vocab = [
            ("atelectasis", TexturePattern::Dots),
            ("cardiomegaly", TexturePattern::Blocks),
            ("nodule/mass", TexturePattern::Solid),
            ("pleural effusion", TexturePattern::VerticalStripes),
            ("pneumonia", TexturePattern::Checker),
            ("pulmonary fibrosis", TexturePattern::HorizontalStripes),
        ];
        Self {
            grid_size: 24,
            disease_vocab: vocab
                .into_iter()
                .map(|(label, pattern)| DiseaseSpec {
                    label: label.to_string(),
                    pattern,
                    amplitude: 0.35,
                })
                .collect(),
            diseases_per_scene: (0, 3),
            box_side: (3, 6),
            rng_seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn disease_labels(&self) -> Vec<String> {
        self.disease_vocab.iter().map(|d| d.label.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.disease_vocab {
            let key = (d.pattern, (d.amplitude * 1000.0).round() as i64);
            if !seen.insert(key) {
                return Err(Error::InvalidConfig(format!(
                    "texture signature of `{}` duplicates another disease",
                    d.label
                )));
            }
        }
        let labels: BTreeSet<_> = self.disease_vocab.iter().map(|d| &d.label).collect();
        if labels.len() != self.disease_vocab.len() {
            return Err(Error::InvalidConfig("duplicate disease label".into()));
        }
        let (lo, hi) = self.diseases_per_scene;
        if lo > hi {
            return Err(Error::InvalidConfig("diseases_per_scene range is empty".into()));
        }
        let (smin, smax) = self.box_side;
        if smin == 0 || smin > smax || smax > self.grid_size {
            return Err(Error::InvalidConfig(format!(
                "box side range {smin}..={smax} invalid for a {}-pixel grid",
                self.grid_size
            )));
        }
        if hi > 0 && self.disease_vocab.is_empty() {
            return Err(Error::InvalidConfig("diseases requested but vocabulary is empty".into()));
        }
        anatomy_layout(self.grid_size).map(|_| ())
    }
}

/// Background intensity of each anatomy and of the margin.
fn base_intensity(anatomy: &str) -> f64 {
    match anatomy {
        "trachea" => 0.35,
        "mediastinum" => 0.55,
        "heart" => 0.65,
        "diaphragm" => 0.45,
        _ => 0.2,
    }
}

const MARGIN_INTENSITY: f64 = 0.05;

/// The fixed chest-like layout: lungs in the outer columns split into
/// upper/lower halves, four stacked regions in the middle column.
pub fn anatomy_layout(grid: usize) -> Result<Vec<(&'static str, BoundingBox)>> {
    let margin = (grid / 12).max(1);
    if grid < 2 * margin + 12 {
        return Err(Error::InvalidConfig(format!(
            "grid of {grid} pixels is too small for the anatomy layout"
        )));
    }
    let inner = grid - 2 * margin;
    let at = |num: usize, den: usize| margin + (inner * num + den / 2) / den;
    let (c0, c1, c2, c3) = (at(0, 3), at(1, 3), at(2, 3), at(3, 3));
    let (h0, h1, h2) = (at(0, 2), at(1, 2), at(2, 2));
    let q: Vec<usize> = (0..=4).map(|i| at(i, 4)).collect();
    let rect = |x0, y0, x1, y1| BoundingBox { x0, y0, x1, y1 };
    let layout = vec![
        ("right upper lung", rect(c0, h0, c1, h1)),
        ("right lower lung", rect(c0, h1, c1, h2)),
        ("left upper lung", rect(c2, h0, c3, h1)),
        ("left lower lung", rect(c2, h1, c3, h2)),
        ("trachea", rect(c1, q[0], c2, q[1])),
        ("mediastinum", rect(c1, q[1], c2, q[2])),
        ("heart", rect(c1, q[2], c2, q[3])),
        ("diaphragm", rect(c1, q[3], c2, q[4])),
    ];
    debug_assert_eq!(layout.len(), ANATOMIES.len());
    if layout.iter().any(|(_, r)| r.x0 >= r.x1 || r.y0 >= r.y1) {
        return Err(Error::InvalidConfig(format!("degenerate anatomy region for grid {grid}")));
    }
    Ok(layout)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 1000.0).round() / 1000.0
}

/// Renders one synthetic scene. Deterministic in `(config, seed)`.
pub fn synth_scene(config: &SceneConfig, seed: u64, scene_id: &str) -> Result<SceneAnnotation> {
    config.validate()?;
    let grid = config.grid_size;
    let layout = anatomy_layout(grid)?;
    let mut rng = seed::rng(seed);

    let mut image = vec![MARGIN_INTENSITY; grid * grid];
    for (label, r) in &layout {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                image[y * grid + x] = base_intensity(label);
            }
        }
    }
    for v in image.iter_mut() {
        *v += rng.random_range(-0.03..0.03);
    }

    let (lo, hi) = config.diseases_per_scene;
    let count = rng.random_range(lo..=hi);
    let (min_side, max_side) = config.box_side;
    let mut diseases = Vec::with_capacity(count);
    for _ in 0..count {
        let spec = config
            .disease_vocab
            .choose(&mut rng)
            .expect("validated non-empty vocabulary");
        let (_, region) = layout.choose(&mut rng).expect("layout is non-empty");
        let w = rng.random_range(min_side..=max_side).min(grid);
        let h = rng.random_range(min_side..=max_side).min(grid);
        let cx = rng.random_range(region.x0..region.x1);
        let cy = rng.random_range(region.y0..region.y1);
        let x0 = cx.saturating_sub(w / 2).min(grid - w);
        let y0 = cy.saturating_sub(h / 2).min(grid - h);
        let bbox = BoundingBox { x0, y0, x1: x0 + w, y1: y0 + h };
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                image[y * grid + x] += spec.amplitude * spec.pattern.value(x, y);
            }
        }
        diseases.push((spec.label.clone(), bbox));
    }
    for v in image.iter_mut() {
        *v = quantize(*v);
    }

    let anatomies = layout
        .iter()
        .map(|(label, r)| (label.to_string(), PixelMask::from_rect(grid, grid, *r)))
        .collect();
    Ok(SceneAnnotation {
        scene_id: scene_id.to_string(),
        width: grid,
        height: grid,
        image,
        anatomies,
        diseases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaKind {
    PositiveClosed,
    HallucinatedClosed,
    OpenNormal,
    OpenAbnormal,
}

impl QaKind {
    pub const ALL: [QaKind; 4] = [
        QaKind::PositiveClosed,
        QaKind::HallucinatedClosed,
        QaKind::OpenNormal,
        QaKind::OpenAbnormal,
    ];

    pub fn is_closed(self) -> bool {
        matches!(self, QaKind::PositiveClosed | QaKind::HallucinatedClosed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QaKind::PositiveClosed => "positive_closed",
            QaKind::HallucinatedClosed => "hallucinated_closed",
            QaKind::OpenNormal => "open_normal",
            QaKind::OpenAbnormal => "open_abnormal",
        }
    }
}

impl fmt::Display for QaKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub qa_id: String,
    pub scene_id: String,
    pub kind: QaKind,
    pub anatomy: String,
    pub disease: Option<String>,
    pub question: String,
    pub gold_answer: String,
    /// Disease labels for open kinds, `["yes"]`/`["no"]` for closed kinds.
    pub gold_labels: Vec<String>,
}

impl QAItem {
    /// Checks the kind invariant against the scene's relations.
    pub fn check_kind(&self, relations: &RelationMap) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InconsistentItem {
                qa_id: self.qa_id.clone(),
                reason: reason.to_string(),
            })
        };
        match (self.kind, &self.disease) {
            (QaKind::PositiveClosed, Some(d)) => {
                if !relations.contains(&self.anatomy, d) {
                    return fail("positive question about an absent pair");
                }
            }
            (QaKind::HallucinatedClosed, Some(d)) => {
                if relations.contains(&self.anatomy, d) {
                    return fail("hallucinated question about a present pair");
                }
            }
            (QaKind::OpenNormal, None) => {
                if relations.has_any(&self.anatomy) {
                    return fail("normal question about an abnormal anatomy");
                }
            }
            (QaKind::OpenAbnormal, None) => {
                if !relations.has_any(&self.anatomy) {
                    return fail("abnormality question about a healthy anatomy");
                }
            }
            _ => return fail("disease field does not match the question kind"),
        }
        Ok(())
    }
}

pub const CLOSED_TEMPLATES: [&str; 2] = [
    "Does {anatomy} have {disease}?",
    "Is there {disease} present in {anatomy}?",
];
pub const OPEN_TEMPLATE: &str = "Are there any abnormalities at the {anatomy}?";

pub fn render_closed(template: usize, anatomy: &str, disease: &str) -> String {
    CLOSED_TEMPLATES[template]
        .replace("{anatomy}", anatomy)
        .replace("{disease}", disease)
}

/// Which closed template produced `question`, if any.
pub fn closed_template_of(question: &str) -> Option<usize> {
    if question.starts_with("Does ") {
        Some(0)
    } else if question.starts_with("Is there ") {
        Some(1)
    } else {
        None
    }
}

pub fn render_open(anatomy: &str) -> String {
    OPEN_TEMPLATE.replace("{anatomy}", anatomy)
}

/// Joins labels as "a", "a and b", "a, b and c".
fn enumerate_labels(labels: &[&str]) -> String {
    match labels {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    }
}

/// Gold answer text and gold labels for an item.
pub fn gold_answer(item: &QAItem, relations: &RelationMap) -> Result<(String, Vec<String>)> {
    item.check_kind(relations)?;
    Ok(match item.kind {
        QaKind::PositiveClosed => ("Yes".to_string(), vec!["yes".to_string()]),
        QaKind::HallucinatedClosed => ("No".to_string(), vec!["no".to_string()]),
        QaKind::OpenNormal => (
            format!("No abnormalities are present in the {}.", item.anatomy),
            Vec::new(),
        ),
        QaKind::OpenAbnormal => {
            let labels: Vec<&str> = relations.diseases_of(&item.anatomy).collect();
            (
                format!("The {} suffers from {}.", item.anatomy, enumerate_labels(&labels)),
                labels.iter().map(|s| s.to_string()).collect(),
            )
        }
    })
}

/// Draws 2–5 question/answer items for one scene, choosing each item's kind
/// uniformly among the kinds the scene can support.
pub fn generate_qa(
    scene: &SceneAnnotation,
    relations: &RelationMap,
    disease_vocab: &[String],
    seed: u64,
) -> Result<Vec<QAItem>> {
    if scene.anatomies.is_empty() {
        return Err(Error::InvalidScene {
            scene_id: scene.scene_id.clone(),
            reason: "scene has no anatomies".into(),
        });
    }
    let mut rng = seed::rng(seed);
    let anatomies: Vec<&str> = scene.anatomies.keys().map(String::as_str).collect();
    let positives: Vec<(&str, &str)> = relations
        .pairs
        .iter()
        .map(|(a, d)| (a.as_str(), d.as_str()))
        .collect();
    let hallucinated: Vec<(&str, &str)> = anatomies
        .iter()
        .flat_map(|a| disease_vocab.iter().map(move |d| (*a, d.as_str())))
        .filter(|(a, d)| !relations.contains(a, d))
        .collect();
    let abnormal: Vec<&str> = anatomies.iter().copied().filter(|a| relations.has_any(a)).collect();
    let normal: Vec<&str> = anatomies.iter().copied().filter(|a| !relations.has_any(a)).collect();

    let mut feasible = Vec::new();
    if !positives.is_empty() {
        feasible.push(QaKind::PositiveClosed);
    }
    if !hallucinated.is_empty() {
        feasible.push(QaKind::HallucinatedClosed);
    }
    if !normal.is_empty() {
        feasible.push(QaKind::OpenNormal);
    }
    if !abnormal.is_empty() {
        feasible.push(QaKind::OpenAbnormal);
    }

    let target = rng.random_range(2..=5usize);
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(target);
    let mut attempts = 0;
    while items.len() < target && attempts < 64 {
        attempts += 1;
        let kind = *feasible.choose(&mut rng).expect("open questions are always feasible");
        let (anatomy, disease, question) = match kind {
            QaKind::PositiveClosed | QaKind::HallucinatedClosed => {
                let pool = if kind == QaKind::PositiveClosed { &positives } else { &hallucinated };
                let (a, d) = *pool.choose(&mut rng).expect("feasible kind has candidates");
                let template = rng.random_range(0..CLOSED_TEMPLATES.len());
                (a, Some(d), render_closed(template, a, d))
            }
            QaKind::OpenNormal | QaKind::OpenAbnormal => {
                let pool = if kind == QaKind::OpenNormal { &normal } else { &abnormal };
                let a = *pool.choose(&mut rng).expect("feasible kind has candidates");
                (a, None, render_open(a))
            }
        };
        if !seen.insert((anatomy, disease, kind.is_closed())) {
            continue;
        }
        let mut item = QAItem {
            qa_id: format!("{}-q{}", scene.scene_id, items.len()),
            scene_id: scene.scene_id.clone(),
            kind,
            anatomy: anatomy.to_string(),
            disease: disease.map(str::to_string),
            question,
            gold_answer: String::new(),
            gold_labels: Vec::new(),
        };
        let (answer, labels) = gold_answer(&item, relations)?;
        item.gold_answer = answer;
        item.gold_labels = labels;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scenes: usize,
    pub relations: usize,
    pub qa_total: usize,
    pub qa_counts: BTreeMap<QaKind, usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetShard {
    pub scenes: Vec<SceneAnnotation>,
    pub qa: Vec<QAItem>,
    pub relation_maps: Vec<RelationMap>,
    pub manifest: Manifest,
}

impl DatasetShard {
    pub fn compute_manifest(&self, seed: u64) -> Manifest {
        let mut qa_counts: BTreeMap<QaKind, usize> = QaKind::ALL.iter().map(|k| (*k, 0)).collect();
        for item in &self.qa {
            *qa_counts.entry(item.kind).or_default() += 1;
        }
        Manifest {
            seed,
            scenes: self.scenes.len(),
            relations: self.relation_maps.len(),
            qa_total: self.qa.len(),
            qa_counts,
        }
    }

    pub fn scene(&self, scene_id: &str) -> Option<&SceneAnnotation> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn relations(&self, scene_id: &str) -> Option<&RelationMap> {
        self.relation_maps.iter().find(|r| r.scene_id == scene_id)
    }

    pub fn item(&self, qa_id: &str) -> Option<&QAItem> {
        self.qa.iter().find(|q| q.qa_id == qa_id)
    }

    /// Index from scene id to position, for repeated lookups.
    pub fn scene_index(&self) -> BTreeMap<&str, usize> {
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (s.scene_id.as_str(), i))
            .collect()
    }

    pub fn disease_vocab(&self) -> BTreeSet<String> {
        let mut vocab: BTreeSet<String> = self
            .scenes
            .iter()
            .flat_map(|s| s.diseases.iter().map(|(l, _)| l.clone()))
            .collect();
        vocab.extend(self.qa.iter().filter_map(|q| q.disease.clone()));
        vocab
    }

    /// Checks cross-record consistency: manifest counts, scene references
    /// and every item's kind invariant.
    pub fn validate(&self) -> Result<()> {
        let expected = self.compute_manifest(self.manifest.seed);
        if expected != self.manifest {
            return Err(Error::ManifestMismatch(format!(
                "manifest says {} scenes / {} relations / {} qa, contents have {} / {} / {}",
                self.manifest.scenes,
                self.manifest.relations,
                self.manifest.qa_total,
                expected.scenes,
                expected.relations,
                expected.qa_total
            )));
        }
        let rel_by_scene: BTreeMap<&str, &RelationMap> = self
            .relation_maps
            .iter()
            .map(|r| (r.scene_id.as_str(), r))
            .collect();
        let scenes = self.scene_index();
        for item in &self.qa {
            if !scenes.contains_key(item.scene_id.as_str()) {
                return Err(Error::InconsistentItem {
                    qa_id: item.qa_id.clone(),
                    reason: format!("unknown scene `{}`", item.scene_id),
                });
            }
            let rel = rel_by_scene.get(item.scene_id.as_str()).ok_or_else(|| {
                Error::InconsistentItem {
                    qa_id: item.qa_id.clone(),
                    reason: "scene has no relation record".into(),
                }
            })?;
            item.check_kind(rel)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub seed: u64,
    pub delta: f64,
    pub scene: SceneConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            seed: 0,
            delta: 0.5,
            scene: SceneConfig::default(),
        }
    }
}

/// Scenes, relations and QA for `config.scenes` scenes; per-scene seeds are
/// derived from the master seed so results do not depend on ordering.
pub fn build_shard(config: &CorpusConfig) -> Result<DatasetShard> {
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::InvalidConfig(format!("delta {} outside (0, 1)", config.delta)));
    }
    let vocab = config.scene.disease_labels();
    let mut shard = DatasetShard::default();
    for i in 0..config.scenes {
        let scene_id = format!("scene-{i:05}");
        let scene = synth_scene(&config.scene, seed::stream_seed(config.seed, "scene", i as u64), &scene_id)?;
        let relations = map_relations(&scene, config.delta);
        let qa = generate_qa(&scene, &relations, &vocab, seed::stream_seed(config.seed, "qa", i as u64))?;
        shard.scenes.push(scene);
        shard.relation_maps.push(relations);
        shard.qa.extend(qa);
    }
    shard.manifest = shard.compute_manifest(config.seed);
    Ok(shard)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ShardRecord {
    Manifest(Manifest),
    Scene(SceneAnnotation),
    Relations(RelationMap),
    Qa(QAItem),
}

/// Writes the shard as JSONL: the manifest first, then each scene followed
/// by its relations and its items.
pub fn write_shard_to<W: Write>(shard: &DatasetShard, mut out: W) -> Result<()> {
    let mut line = |rec: &ShardRecord| -> Result<()> {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    line(&ShardRecord::Manifest(shard.manifest.clone()))?;
    let mut qa_by_scene: BTreeMap<&str, Vec<&QAItem>> = BTreeMap::new();
    for item in &shard.qa {
        qa_by_scene.entry(item.scene_id.as_str()).or_default().push(item);
    }
    let rel_by_scene: BTreeMap<&str, &RelationMap> = shard
        .relation_maps
        .iter()
        .map(|r| (r.scene_id.as_str(), r))
        .collect();
    for scene in &shard.scenes {
        line(&ShardRecord::Scene(scene.clone()))?;
        if let Some(rel) = rel_by_scene.get(scene.scene_id.as_str()) {
            line(&ShardRecord::Relations((*rel).clone()))?;
        }
        for item in qa_by_scene.remove(scene.scene_id.as_str()).unwrap_or_default() {
            line(&ShardRecord::Qa(item.clone()))?;
        }
    }
    // items whose scene is missing still round-trip; validate() flags them
    for items in qa_by_scene.into_values() {
        for item in items {
            line(&ShardRecord::Qa(item.clone()))?;
        }
    }
    Ok(())
}

pub fn write_shard(shard: &DatasetShard, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_shard_to(shard, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn shard_to_string(shard: &DatasetShard) -> Result<String> {
    let mut buf = Vec::new();
    write_shard_to(shard, &mut buf)?;
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

pub fn read_shard_from<R: BufRead>(input: R) -> Result<DatasetShard> {
    let mut shard = DatasetShard::default();
    let mut manifest = None;
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let last = lines.len();
    for (i, text) in lines.iter().enumerate() {
        if text.trim().is_empty() {
            continue;
        }
        let rec: ShardRecord = match serde_json::from_str(text) {
            Ok(rec) => rec,
            // a torn final line is what a truncated write leaves behind
            Err(e) if i + 1 == last && e.is_eof() => {
                return Err(Error::ManifestMismatch(format!(
                    "line {} is truncated; shard is incomplete",
                    i + 1
                )))
            }
            Err(e) => {
                return Err(Error::MalformedLine {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        };
        match rec {
            ShardRecord::Manifest(m) => {
                if manifest.replace(m).is_some() {
                    return Err(Error::MalformedLine {
                        line: i + 1,
                        reason: "second manifest record".into(),
                    });
                }
            }
            ShardRecord::Scene(s) => {
                s.validate().map_err(|e| Error::MalformedLine {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                shard.scenes.push(s);
            }
            ShardRecord::Relations(r) => shard.relation_maps.push(r),
            ShardRecord::Qa(q) => shard.qa.push(q),
        }
    }
    shard.manifest = manifest.ok_or_else(|| Error::ManifestMismatch("no manifest record".into()))?;
    shard.validate()?;
    Ok(shard)
}

pub fn read_shard(path: &Path) -> Result<DatasetShard> {
    read_shard_from(BufReader::new(File::open(path)?))
}
