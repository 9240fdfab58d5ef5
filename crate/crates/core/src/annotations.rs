//! Canonical pose-annotation model and the parsers that feed it.
//!
//! Three input flavours are understood:
//!
//! * **native** – the self-describing JSON document written by this crate,
//!   with an explicit `schema` block;
//! * **coco_like** – `images` / `annotations` arrays with flat
//!   `[x, y, v, ...]` keypoint triples (COCO and CrowdPose style);
//! * **jta_like** – arrays of 10-column joint rows
//!   `[frame, person_id, joint_type, x2d, y2d, x3d, y3d, z3d, occluded, self_occluded]`.
//!
//! Everything is mapped onto [`Dataset`], whose poses all share one
//! [`PoseSchema`].

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::SegmentMask;

/// Tag stored in the native format header.
pub const NATIVE_FORMAT_TAG: &str = "crowdpose-kit/1";

/// Frame size assumed for JTA rows that do not carry one.
pub const JTA_FRAME_WIDTH: u32 = 1920;
pub const JTA_FRAME_HEIGHT: u32 = 1080;

pub const CROWDPOSE_KEYPOINTS: [&str; 14] = [
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "head",
    "neck",
];

/// Joint order of the public JTA annotation files (`joint_type` column).
pub const JTA_KEYPOINTS: [&str; 22] = [
    "head_top",
    "head_center",
    "neck",
    "right_clavicle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_clavicle",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "spine0",
    "spine1",
    "spine2",
    "spine3",
    "spine4",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
];

/// CrowdPose names whose JTA counterpart is spelled differently.
const CROWDPOSE_TO_JTA_ALIASES: [(&str, &str); 1] = [("head", "head_top")];

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

impl AnnotationError {
    fn from_json(bytes: &[u8], err: serde_json::Error) -> Self {
        AnnotationError::Parse {
            offset: byte_offset(bytes, err.line(), err.column()),
            message: err.to_string(),
        }
    }

    fn at(offset: usize, message: impl Into<String>) -> Self {
        AnnotationError::Parse {
            offset,
            message: message.into(),
        }
    }
}

/// Converts serde_json's 1-based line / column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut current = 1;
    let mut line_start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if current == line {
            break;
        }
        if b == b'\n' {
            current += 1;
            line_start = i + 1;
        }
    }
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    Occluded,
    SelfOccluded,
    Unlabeled,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }

    /// COCO visibility code: 2 visible, 1 labeled but not visible, 0 unlabeled.
    pub fn from_coco_code(code: f64) -> Option<Self> {
        match code {
            c if c == 2.0 => Some(Visibility::Visible),
            c if c == 1.0 => Some(Visibility::Occluded),
            c if c == 0.0 => Some(Visibility::Unlabeled),
            _ => None,
        }
    }

    pub fn to_coco_code(self) -> u8 {
        match self {
            Visibility::Visible | Visibility::SelfOccluded => 2,
            Visibility::Occluded => 1,
            Visibility::Unlabeled => 0,
        }
    }

    /// JTA flag pair. External occlusion wins when both flags are set.
    pub fn from_jta_flags(occluded: bool, self_occluded: bool) -> Self {
        match (occluded, self_occluded) {
            (true, _) => Visibility::Occluded,
            (false, true) => Visibility::SelfOccluded,
            (false, false) => Visibility::Visible,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub vis: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, vis: Visibility) -> Self {
        Keypoint { x, y, vis }
    }

    pub fn unlabeled() -> Self {
        Keypoint::new(0.0, 0.0, Visibility::Unlabeled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseSchema {
    pub name: String,
    pub keypoint_names: Vec<String>,
}

impl PoseSchema {
    pub fn new(name: impl Into<String>, names: &[&str]) -> Result<Self, AnnotationError> {
        let schema = PoseSchema {
            name: name.into(),
            keypoint_names: names.iter().map(|s| s.to_string()).collect(),
        };
        schema.check()?;
        Ok(schema)
    }

    pub fn crowdpose() -> Self {
        PoseSchema::new("crowdpose", &CROWDPOSE_KEYPOINTS).expect("static schema")
    }

    pub fn jta() -> Self {
        PoseSchema::new("jta", &JTA_KEYPOINTS).expect("static schema")
    }

    /// Picks a built-in schema from its keypoint count.
    pub fn for_count(count: usize) -> Result<Self, AnnotationError> {
        match count {
            14 => Ok(PoseSchema::crowdpose()),
            22 => Ok(PoseSchema::jta()),
            n => Err(AnnotationError::SchemaMismatch(format!(
                "no known schema has {n} keypoints"
            ))),
        }
    }

    pub fn count(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == name)
    }

    fn check(&self) -> Result<(), AnnotationError> {
        let mut seen = HashSet::new();
        for n in &self.keypoint_names {
            if !seen.insert(n.as_str()) {
                return Err(AnnotationError::InvalidSchema(format!(
                    "duplicate keypoint name {n:?} in schema {:?}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose {
    pub keypoints: Vec<Keypoint>,
}

impl Pose {
    pub fn new(keypoints: Vec<Keypoint>) -> Self {
        Pose { keypoints }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.vis.is_labeled()).count()
    }
}

/// Axis-aligned box, top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Closed-box containment: points on an edge are inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x <= self.x + self.w && y >= self.y && y <= self.y + self.h
    }

    /// Tight bounds of the labeled keypoints, `None` if none are labeled.
    pub fn around_keypoints(pose: &Pose) -> Option<BBox> {
        let mut it = pose.keypoints.iter().filter(|k| k.vis.is_labeled());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonInstance {
    pub bbox: BBox,
    pub pose: Pose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentMask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<i64>,
}

impl PersonInstance {
    pub fn new(bbox: BBox, pose: Pose) -> Self {
        PersonInstance {
            bbox,
            pose,
            segmentation: None,
            score: None,
            track_id: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default)]
    pub persons: Vec<PersonInstance>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        ImageRecord {
            id: id.into(),
            width,
            height,
            source: None,
            persons: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: PoseSchema,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub images: Vec<ImageRecord>,
}

impl Dataset {
    pub fn new(schema: PoseSchema) -> Self {
        Dataset {
            schema,
            meta: BTreeMap::new(),
            images: Vec::new(),
        }
    }

    pub fn person_count(&self) -> usize {
        self.images.iter().map(|im| im.persons.len()).sum()
    }

    /// Serializes to the native JSON document.
    pub fn to_native_json(&self) -> String {
        let doc = NativeDocumentRef {
            format: NATIVE_FORMAT_TAG,
            schema: &self.schema,
            meta: &self.meta,
            images: &self.images,
        };
        serde_json::to_string_pretty(&doc).expect("dataset serializes")
    }
}

#[derive(Serialize)]
struct NativeDocumentRef<'a> {
    format: &'a str,
    schema: &'a PoseSchema,
    meta: &'a BTreeMap<String, serde_json::Value>,
    images: &'a [ImageRecord],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeDocument {
    format: String,
    schema: PoseSchema,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    CocoLike,
    JtaLike,
    Native,
}

impl InputFormat {
    /// Guesses the format from the top-level JSON shape.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        let first = bytes.iter().find(|b| !b.is_ascii_whitespace())?;
        if *first == b'[' {
            return Some(InputFormat::JtaLike);
        }
        let value: serde_json::Value = serde_json::from_slice(bytes).ok()?;
        let obj = value.as_object()?;
        if obj.contains_key("schema") {
            Some(InputFormat::Native)
        } else if obj.contains_key("annotations") {
            Some(InputFormat::CocoLike)
        } else if obj.contains_key("rows") {
            Some(InputFormat::JtaLike)
        } else {
            None
        }
    }
}

pub fn parse_dataset(bytes: &[u8], format: InputFormat) -> Result<Dataset, AnnotationError> {
    match format {
        InputFormat::Native => parse_native(bytes),
        InputFormat::CocoLike => parse_coco(bytes),
        InputFormat::JtaLike => parse_jta(bytes),
    }
}

fn parse_native(bytes: &[u8]) -> Result<Dataset, AnnotationError> {
    let doc: NativeDocument =
        serde_json::from_slice(bytes).map_err(|e| AnnotationError::from_json(bytes, e))?;
    if doc.format != NATIVE_FORMAT_TAG {
        return Err(AnnotationError::at(
            0,
            format!("unsupported native format tag {:?}", doc.format),
        ));
    }
    doc.schema.check()?;
    let count = doc.schema.count();
    for im in &doc.images {
        for (pi, p) in im.persons.iter().enumerate() {
            if p.pose.len() != count {
                return Err(AnnotationError::SchemaMismatch(format!(
                    "image {:?} person {pi}: {} keypoints, schema {:?} has {count}",
                    im.id,
                    p.pose.len(),
                    doc.schema.name
                )));
            }
        }
    }
    Ok(Dataset {
        schema: doc.schema,
        meta: doc.meta,
        images: doc.images,
    })
}

#[derive(Deserialize)]
struct CocoDocument {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: serde_json::Value,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: serde_json::Value,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    keypoints: Vec<f64>,
    #[serde(default)]
    segmentation: Option<SegmentMask>,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    track_id: Option<i64>,
}

#[derive(Deserialize)]
struct CocoCategory {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    keypoints: Vec<String>,
}

fn id_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn parse_coco(bytes: &[u8]) -> Result<Dataset, AnnotationError> {
    let doc: CocoDocument =
        serde_json::from_slice(bytes).map_err(|e| AnnotationError::from_json(bytes, e))?;

    let named = doc.categories.iter().find(|c| !c.keypoints.is_empty());
    let schema = match named {
        Some(cat) => {
            let names: Vec<&str> = cat.keypoints.iter().map(String::as_str).collect();
            let name = cat.name.clone().unwrap_or_else(|| "coco_like".into());
            PoseSchema::new(name, &names)?
        }
        None => match doc.annotations.first() {
            Some(a) if a.keypoints.len() % 3 == 0 => PoseSchema::for_count(a.keypoints.len() / 3)?,
            Some(a) => {
                return Err(AnnotationError::SchemaMismatch(format!(
                    "keypoint array length {} is not a multiple of 3",
                    a.keypoints.len()
                )))
            }
            None => PoseSchema::crowdpose(),
        },
    };

    let mut dataset = Dataset::new(schema);
    let mut index = BTreeMap::new();
    for im in &doc.images {
        let id = id_string(&im.id);
        index.insert(id.clone(), dataset.images.len());
        let mut rec = ImageRecord::new(id, im.width, im.height);
        rec.source = im.file_name.clone();
        dataset.images.push(rec);
    }

    let count = dataset.schema.count();
    for (ai, ann) in doc.annotations.into_iter().enumerate() {
        if ann.keypoints.len() != count * 3 {
            return Err(AnnotationError::SchemaMismatch(format!(
                "annotation {ai}: {} values, expected {}",
                ann.keypoints.len(),
                count * 3
            )));
        }
        let mut kps = Vec::with_capacity(count);
        for t in ann.keypoints.chunks_exact(3) {
            let vis = Visibility::from_coco_code(t[2]).ok_or_else(|| {
                AnnotationError::at(0, format!("annotation {ai}: invalid visibility code {}", t[2]))
            })?;
            kps.push(Keypoint::new(t[0], t[1], vis));
        }
        let pose = Pose::new(kps);
        let bbox = match ann.bbox {
            Some(b) => BBox::from(b),
            None => BBox::around_keypoints(&pose).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0)),
        };
        let image_id = id_string(&ann.image_id);
        let slot = *index.get(&image_id).ok_or_else(|| {
            AnnotationError::at(0, format!("annotation {ai} references unknown image {image_id}"))
        })?;
        dataset.images[slot].persons.push(PersonInstance {
            bbox,
            pose,
            segmentation: ann.segmentation,
            score: ann.score,
            track_id: ann.track_id,
        });
    }
    Ok(dataset)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JtaDocument {
    Rows(Vec<Vec<f64>>),
    Framed {
        width: u32,
        height: u32,
        rows: Vec<Vec<f64>>,
    },
}

fn parse_jta(bytes: &[u8]) -> Result<Dataset, AnnotationError> {
    let doc: JtaDocument =
        serde_json::from_slice(bytes).map_err(|e| AnnotationError::from_json(bytes, e))?;
    let (width, height, rows) = match doc {
        JtaDocument::Rows(rows) => (JTA_FRAME_WIDTH, JTA_FRAME_HEIGHT, rows),
        JtaDocument::Framed {
            width,
            height,
            rows,
        } => (width, height, rows),
    };

    let schema = PoseSchema::jta();
    let count = schema.count();
    // frame -> person -> joints
    let mut frames: BTreeMap<i64, BTreeMap<i64, Vec<Keypoint>>> = BTreeMap::new();
    for (ri, row) in rows.iter().enumerate() {
        if row.len() != 10 {
            return Err(AnnotationError::at(
                0,
                format!("row {ri}: expected 10 columns, found {}", row.len()),
            ));
        }
        let frame = row[0] as i64;
        let person = row[1] as i64;
        let joint = row[2];
        if joint < 0.0 || joint.fract() != 0.0 || joint as usize >= count {
            return Err(AnnotationError::SchemaMismatch(format!(
                "row {ri}: joint type {joint} outside the {count}-joint schema"
            )));
        }
        let vis = Visibility::from_jta_flags(row[8] != 0.0, row[9] != 0.0);
        let joints = frames
            .entry(frame)
            .or_default()
            .entry(person)
            .or_insert_with(|| vec![Keypoint::unlabeled(); count]);
        joints[joint as usize] = Keypoint::new(row[3], row[4], vis);
    }

    let mut dataset = Dataset::new(schema);
    for (frame, persons) in frames {
        let mut rec = ImageRecord::new(format!("frame_{frame}"), width, height);
        for (pid, joints) in persons {
            let pose = Pose::new(joints);
            let mut bbox = BBox::around_keypoints(&pose).unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0));
            // Keep single-joint or collinear people at positive area.
            bbox.w = bbox.w.max(1.0);
            bbox.h = bbox.h.max(1.0);
            let mut inst = PersonInstance::new(bbox, pose);
            inst.track_id = Some(pid);
            rec.persons.push(inst);
        }
        dataset.images.push(rec);
    }
    Ok(dataset)
}

/// Mapping from target keypoint index to source keypoint index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointMapping(pub Vec<usize>);

impl KeypointMapping {
    /// Matches target names against source names, honouring the known aliases.
    pub fn by_name(source: &PoseSchema, target: &PoseSchema) -> Result<Self, AnnotationError> {
        let mut out = Vec::with_capacity(target.count());
        for name in &target.keypoint_names {
            let alias = CROWDPOSE_TO_JTA_ALIASES
                .iter()
                .find(|(t, _)| t == name)
                .map(|(_, s)| *s);
            let idx = source
                .index_of(name)
                .or_else(|| alias.and_then(|a| source.index_of(a)))
                .ok_or_else(|| {
                    AnnotationError::Mapping(format!(
                        "target keypoint {name:?} has no counterpart in schema {:?}",
                        source.name
                    ))
                })?;
            out.push(idx);
        }
        Ok(KeypointMapping(out))
    }

    /// JTA (22) to CrowdPose (14), by joint name.
    pub fn jta_to_crowdpose() -> Self {
        KeypointMapping::by_name(&PoseSchema::jta(), &PoseSchema::crowdpose())
            .expect("built-in schemas share every CrowdPose joint")
    }

    pub fn check(&self, source_len: usize) -> Result<(), AnnotationError> {
        let mut seen = HashSet::new();
        for &i in &self.0 {
            if i >= source_len {
                return Err(AnnotationError::Mapping(format!(
                    "index {i} out of range for {source_len} source keypoints"
                )));
            }
            if !seen.insert(i) {
                return Err(AnnotationError::Mapping(format!("index {i} used twice")));
            }
        }
        Ok(())
    }

    /// Reads either a bare JSON array or `{"mapping": [...]}`.
    pub fn from_json(bytes: &[u8]) -> Result<Self, AnnotationError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Doc {
            Bare(Vec<usize>),
            Wrapped { mapping: Vec<usize> },
        }
        let doc: Doc =
            serde_json::from_slice(bytes).map_err(|e| AnnotationError::from_json(bytes, e))?;
        Ok(KeypointMapping(match doc {
            Doc::Bare(v) | Doc::Wrapped { mapping: v } => v,
        }))
    }
}

/// Reorders and discards keypoints; output `k` is input `mapping[k]`.
pub fn convert_pose(pose: &Pose, mapping: &KeypointMapping) -> Result<Pose, AnnotationError> {
    mapping.check(pose.len())?;
    Ok(Pose::new(
        mapping.0.iter().map(|&i| pose.keypoints[i]).collect(),
    ))
}

pub fn convert_jta_to_crowdpose(
    pose: &Pose,
    mapping: &KeypointMapping,
) -> Result<Pose, AnnotationError> {
    if pose.len() != JTA_KEYPOINTS.len() {
        return Err(AnnotationError::SchemaMismatch(format!(
            "expected a 22-keypoint JTA pose, got {}",
            pose.len()
        )));
    }
    if mapping.0.len() != CROWDPOSE_KEYPOINTS.len() {
        return Err(AnnotationError::Mapping(format!(
            "mapping must list 14 indices, got {}",
            mapping.0.len()
        )));
    }
    convert_pose(pose, mapping)
}

/// Converts every pose of a dataset into `target` using `mapping`.
pub fn convert_dataset(
    dataset: &Dataset,
    target: PoseSchema,
    mapping: &KeypointMapping,
) -> Result<Dataset, AnnotationError> {
    if mapping.0.len() != target.count() {
        return Err(AnnotationError::Mapping(format!(
            "mapping lists {} indices but schema {:?} has {} keypoints",
            mapping.0.len(),
            target.name,
            target.count()
        )));
    }
    mapping.check(dataset.schema.count())?;
    let mut out = Dataset::new(target);
    out.meta = dataset.meta.clone();
    for im in &dataset.images {
        let mut rec = im.clone();
        for p in &mut rec.persons {
            p.pose = convert_pose(&p.pose, mapping)?;
        }
        out.images.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    DegenerateBbox,
    SchemaMismatch,
    NonFiniteKeypoint,
    ScoreOutOfRange,
    DuplicateKeypointName,
    DuplicateImageId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub person_index: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub counts: BTreeMap<ViolationKind, usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    fn push(&mut self, kind: ViolationKind, image: Option<&str>, person: Option<usize>, detail: String) {
        *self.counts.entry(kind).or_default() += 1;
        self.violations.push(Violation {
            kind,
            image_id: image.map(str::to_string),
            person_index: person,
            detail,
        });
    }
}

pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut names = HashSet::new();
    for n in &dataset.schema.keypoint_names {
        if !names.insert(n) {
            report.push(
                ViolationKind::DuplicateKeypointName,
                None,
                None,
                format!("keypoint name {n:?} repeated"),
            );
        }
    }
    let count = dataset.schema.count();
    let mut ids = HashSet::new();
    for im in &dataset.images {
        let id = Some(im.id.as_str());
        if !ids.insert(&im.id) {
            report.push(ViolationKind::DuplicateImageId, id, None, "image id repeated".into());
        }
        for (pi, p) in im.persons.iter().enumerate() {
            if !p.bbox.is_valid() {
                report.push(
                    ViolationKind::DegenerateBbox,
                    id,
                    Some(pi),
                    format!("bbox {:?} has non-positive extent", <[f64; 4]>::from(p.bbox)),
                );
            }
            if p.pose.len() != count {
                report.push(
                    ViolationKind::SchemaMismatch,
                    id,
                    Some(pi),
                    format!("{} keypoints, schema has {count}", p.pose.len()),
                );
            }
            let bad = p
                .pose
                .keypoints
                .iter()
                .filter(|k| k.vis.is_labeled() && !(k.x.is_finite() && k.y.is_finite()))
                .count();
            if bad > 0 {
                report.push(
                    ViolationKind::NonFiniteKeypoint,
                    id,
                    Some(pi),
                    format!("{bad} labeled keypoints with non-finite coordinates"),
                );
            }
            if let Some(s) = p.score {
                if !(0.0..=1.0).contains(&s) {
                    report.push(
                        ViolationKind::ScoreOutOfRange,
                        id,
                        Some(pi),
                        format!("score {s} outside [0, 1]"),
                    );
                }
            }
        }
    }
    report
}
