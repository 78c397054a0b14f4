//! Clip and annotation data model, the line-oriented manifest format, and
//! training-target construction.
//!
//! A manifest is a text file whose first non-blank line is a header record
//! `{"version":1}`, followed by one JSON clip record per line:
//!
//! ```text
//! {"version":1}
//! {"clip_id":"c0000","payload":"c0000.npy","kind":"features","fps":60.0,"has_me":true,"state":"listening","segments":[[10,25]]}
//! ```
//!
//! Payload paths are resolved relative to the manifest's directory. Payloads
//! are `.npy` arrays of `f64`: `T×D_in` for features, `T×C×H×W` for frames.
//! Segment offsets are inclusive frame indices.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversationalState {
    Speaking,
    Listening,
}

impl ConversationalState {
    pub const ALL: [ConversationalState; 2] = [ConversationalState::Speaking, ConversationalState::Listening];

    pub fn is_speaking(self) -> bool {
        self == ConversationalState::Speaking
    }
}

impl fmt::Display for ConversationalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConversationalState::Speaking => "speaking",
            ConversationalState::Listening => "listening",
        })
    }
}

/// Inclusive frame interval `onset..=offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub onset: usize,
    pub offset: usize,
}

impl Span {
    pub fn new(onset: usize, offset: usize) -> Self {
        debug_assert!(onset <= offset);
        Span { onset, offset }
    }

    pub fn len(&self) -> usize {
        self.offset - self.onset + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, t: usize) -> bool {
        self.onset <= t && t <= self.offset
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.onset, self.offset)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SegmentAnnotation {
    pub onset: usize,
    pub offset: usize,
    pub state: ConversationalState,
}

impl SegmentAnnotation {
    pub fn span(&self) -> Span {
        Span { onset: self.onset, offset: self.offset }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Frames,
    Features,
}

impl fmt::Display for PayloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PayloadKind::Frames => "frames",
            PayloadKind::Features => "features",
        })
    }
}

/// Per-clip visual input.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// `T×D_in` precomputed per-frame features.
    Features(Array2<f64>),
    /// `T×C×H×W` raw frames.
    Frames(Array4<f64>),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Features(_) => PayloadKind::Features,
            Payload::Frames(_) => PayloadKind::Frames,
        }
    }

    /// Number of frames `T`.
    pub fn num_frames(&self) -> usize {
        match self {
            Payload::Features(a) => a.nrows(),
            Payload::Frames(a) => a.shape()[0],
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Payload::Features(a) => a.iter().all(|v| v.is_finite()),
            Payload::Frames(a) => a.iter().all(|v| v.is_finite()),
        }
    }

    pub fn read(path: &Path, kind: PayloadKind) -> Result<Payload> {
        let npy_err = |e: &dyn fmt::Display| Error::Npy { path: path.to_path_buf(), msg: e.to_string() };
        Ok(match kind {
            PayloadKind::Features => Payload::Features(ndarray_npy::read_npy(path).map_err(|e| npy_err(&e))?),
            PayloadKind::Frames => Payload::Frames(ndarray_npy::read_npy(path).map_err(|e| npy_err(&e))?),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let res = match self {
            Payload::Features(a) => ndarray_npy::write_npy(path, a),
            Payload::Frames(a) => ndarray_npy::write_npy(path, a),
        };
        res.map_err(|e| Error::Npy { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// One labelled clip, validated on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub clip_id: String,
    pub payload: Payload,
    pub fps: f64,
    pub has_me: bool,
    pub state: ConversationalState,
    pub segments: Vec<SegmentAnnotation>,
}

impl ClipSample {
    pub fn new(
        clip_id: impl Into<String>,
        payload: Payload,
        fps: f64,
        state: ConversationalState,
        spans: &[Span],
    ) -> Result<Self> {
        let clip_id = clip_id.into();
        validate_spans(&clip_id, payload.num_frames(), spans)?;
        Ok(ClipSample {
            clip_id,
            payload,
            fps,
            has_me: !spans.is_empty(),
            state,
            segments: spans.iter().map(|s| SegmentAnnotation { onset: s.onset, offset: s.offset, state }).collect(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.payload.num_frames()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.segments.iter().map(SegmentAnnotation::span).collect()
    }

    pub fn frame_mask(&self) -> Vec<f64> {
        frame_mask(self.num_frames(), &self.spans())
    }

    pub fn boundary_weights(&self, w_boundary: f64) -> Vec<f64> {
        boundary_weights(self.num_frames(), &self.spans(), w_boundary)
    }
}

/// `mask[t] = 1` iff `t` lies inside some segment (inclusive bounds).
pub fn frame_mask(num_frames: usize, spans: &[Span]) -> Vec<f64> {
    let mut mask = vec![0.0; num_frames];
    for s in spans {
        for m in &mut mask[s.onset..=s.offset] {
            *m = 1.0;
        }
    }
    mask
}

/// `w_boundary` at every onset and offset frame, `1` elsewhere. A
/// single-frame segment is weighted once.
pub fn boundary_weights(num_frames: usize, spans: &[Span], w_boundary: f64) -> Vec<f64> {
    let mut w = vec![1.0; num_frames];
    for s in spans {
        w[s.onset] = w_boundary;
        w[s.offset] = w_boundary;
    }
    w
}

fn validate_spans(clip_id: &str, num_frames: usize, spans: &[Span]) -> Result<()> {
    if num_frames < 2 {
        return Err(Error::Validation(format!("clip `{clip_id}`: needs at least 2 frames, has {num_frames}")));
    }
    let mut prev: Option<Span> = None;
    for s in spans {
        if s.onset > s.offset {
            return Err(Error::Validation(format!("clip `{clip_id}`: segment {s} has onset > offset")));
        }
        if s.offset >= num_frames {
            return Err(Error::Validation(format!(
                "clip `{clip_id}`: segment {s} ends beyond the last frame {}",
                num_frames - 1
            )));
        }
        if let Some(p) = prev {
            if s.onset <= p.offset {
                return Err(Error::Validation(format!("clip `{clip_id}`: segment {s} overlaps or precedes {p}")));
            }
        }
        prev = Some(*s);
    }
    Ok(())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Payload path, relative to the manifest directory unless absolute.
    pub payload: PathBuf,
    pub kind: PayloadKind,
    pub fps: f64,
    pub has_me: bool,
    pub state: ConversationalState,
    pub segments: Vec<[usize; 2]>,
}

impl ClipRecord {
    pub fn spans(&self) -> Vec<Span> {
        self.segments.iter().map(|&[on, off]| Span { onset: on, offset: off }).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub clips: Vec<ClipRecord>,
    /// Directory payload paths are resolved against. Not serialized.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, clips: Vec<ClipRecord>) -> Self {
        DatasetManifest { version: MANIFEST_VERSION, clips, root: root.into() }
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn payload_path(&self, record: &ClipRecord) -> PathBuf {
        if record.payload.is_absolute() {
            record.payload.clone()
        } else {
            self.root.join(&record.payload)
        }
    }

    pub fn find(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    pub fn load_clip(&self, record: &ClipRecord) -> Result<ClipSample> {
        let payload = Payload::read(&self.payload_path(record), record.kind)?;
        ClipSample::new(record.clip_id.clone(), payload, record.fps, record.state, &record.spans())
    }

    pub fn load_clips(&self) -> Result<Vec<ClipSample>> {
        self.clips.iter().map(|r| self.load_clip(r)).collect()
    }

    /// Checks every record, loading payloads to learn each clip's length.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Schema(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let mut seen = HashSet::new();
        for rec in &self.clips {
            if !seen.insert(rec.clip_id.as_str()) {
                return Err(Error::Validation(format!("duplicate clip_id `{}`", rec.clip_id)));
            }
            if !(rec.fps.is_finite() && rec.fps > 0.0) {
                return Err(Error::Validation(format!("clip `{}`: fps must be positive", rec.clip_id)));
            }
            if rec.has_me == rec.segments.is_empty() {
                return Err(Error::Validation(format!(
                    "clip `{}`: has_me={} disagrees with {} segment(s)",
                    rec.clip_id,
                    rec.has_me,
                    rec.segments.len()
                )));
            }
            let path = self.payload_path(rec);
            if !path.exists() {
                return Err(Error::Validation(format!(
                    "clip `{}`: payload {} does not exist",
                    rec.clip_id,
                    path.display()
                )));
            }
            let payload = Payload::read(&path, rec.kind)?;
            validate_spans(&rec.clip_id, payload.num_frames(), &rec.spans())?;
        }
        Ok(())
    }

    /// Writes the manifest text. Payload files are not touched.
    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).at(path)?;
        let mut w = BufWriter::new(file);
        let header = serde_json::to_string(&Header { version: self.version }).expect("header serializes");
        writeln!(w, "{header}").at(path)?;
        for rec in &self.clips {
            let line = serde_json::to_string(rec).expect("clip record serializes");
            writeln!(w, "{line}").at(path)?;
        }
        w.flush().at(path)
    }

    /// Same records, rooted elsewhere (paths stay as written).
    pub fn with_clips(&self, clips: Vec<ClipRecord>) -> Self {
        DatasetManifest { version: self.version, clips, root: self.root.clone() }
    }
}

/// Reads, parses and validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = fs::File::open(path).at(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let classify = |line: usize, e: serde_json::Error| {
        if e.classify() == serde_json::error::Category::Data {
            Error::Schema(format!("{}:{line}: {e}", path.display()))
        } else {
            Error::Parse { path: path.to_path_buf(), line, msg: e.to_string() }
        }
    };

    let mut version = None;
    let mut clips = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if version.is_none() {
            let header: Header = serde_json::from_str(&line).map_err(|e| classify(lineno, e))?;
            version = Some(header.version);
        } else {
            clips.push(serde_json::from_str::<ClipRecord>(&line).map_err(|e| classify(lineno, e))?);
        }
    }
    let version = version.ok_or_else(|| Error::Schema(format!("{}: missing version header", path.display())))?;
    let manifest = DatasetManifest { version, clips, root };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn write_features(dir: &Path, name: &str, t: usize) {
        Payload::Features(Array2::zeros((t, 4))).write(&dir.join(name)).unwrap();
    }

    fn record(id: &str, payload: &str, segments: Vec<[usize; 2]>, state: ConversationalState) -> ClipRecord {
        ClipRecord {
            clip_id: id.into(),
            payload: payload.into(),
            kind: PayloadKind::Features,
            fps: 60.0,
            has_me: !segments.is_empty(),
            state,
            segments,
        }
    }

    fn write_text(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("manifest.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 100);
        let p = write_text(
            dir.path(),
            "{\"version\":1}\n{\"clip_id\":\"a\",\"payload\":\"a.npy\",\"kind\":\"features\",\"fps\":60.0,\
             \"has_me\":true,\"state\":\"listening\",\"segments\":[[10,25]]}\n",
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.clips[0].segments, vec![[10, 25]]);
        let clip = m.load_clip(&m.clips[0]).unwrap();
        assert_eq!(clip.num_frames(), 100);
        assert_eq!(clip.segments[0].state, ConversationalState::Listening);
    }

    #[test]
    fn rejects_reversed_segment() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 100);
        let m =
            DatasetManifest::new(dir.path(), vec![record("a", "a.npy", vec![[30, 20]], ConversationalState::Speaking)]);
        let p = dir.path().join("m.jsonl");
        m.write(&p).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 10);
        let m = DatasetManifest::new(
            dir.path(),
            vec![
                record("a", "a.npy", vec![], ConversationalState::Speaking),
                record("a", "a.npy", vec![], ConversationalState::Listening),
            ],
        );
        let p = dir.path().join("m.jsonl");
        m.write(&p).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_overlap_and_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 10);
        for segs in [vec![[1, 4], [4, 6]], vec![[5, 10]], vec![[6, 8], [1, 2]]] {
            let m = DatasetManifest::new(dir.path(), vec![record("a", "a.npy", segs, ConversationalState::Speaking)]);
            assert!(matches!(m.validate(), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn schema_and_parse_errors_are_distinguished() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 10);
        let p = write_text(dir.path(), "{\"version\":2}\n");
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));
        let p = write_text(dir.path(), "{\"clip_id\":\"a\"}\n");
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));
        let p = write_text(dir.path(), "{\"version\":1}\n{\"clip_id\":\"a\",\"payload\":\"a.npy\"}\n");
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));
        let p = write_text(dir.path(), "{\"version\":1}\n{not json\n");
        assert!(matches!(load_manifest(&p), Err(Error::Parse { line: 2, .. })));
        let p = write_text(dir.path(), "");
        assert!(matches!(load_manifest(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn has_me_must_match_segments() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), "a.npy", 10);
        let mut rec = record("a", "a.npy", vec![], ConversationalState::Speaking);
        rec.has_me = true;
        let m = DatasetManifest::new(dir.path(), vec![rec]);
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(dir.path(), vec![record("a", "nope.npy", vec![], ConversationalState::Speaking)]);
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn frame_mask_examples() {
        assert_eq!(frame_mask(6, &[Span::new(1, 3)]), vec![0., 1., 1., 1., 0., 0.]);
        assert_eq!(frame_mask(5, &[]), vec![0.0; 5]);
        assert_eq!(frame_mask(8, &[Span::new(0, 1), Span::new(5, 7)]), vec![1., 1., 0., 0., 0., 1., 1., 1.]);
    }

    #[test]
    fn boundary_weight_examples() {
        assert_eq!(boundary_weights(5, &[Span::new(1, 3)], 5.0), vec![1., 5., 1., 5., 1.]);
        assert_eq!(boundary_weights(4, &[Span::new(2, 2)], 5.0), vec![1., 1., 5., 1.]);
        assert_eq!(boundary_weights(6, &[], 5.0), vec![1.0; 6]);
    }

    #[test]
    fn clip_sample_requires_two_frames() {
        let r =
            ClipSample::new("x", Payload::Features(Array2::zeros((1, 3))), 30.0, ConversationalState::Speaking, &[]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
