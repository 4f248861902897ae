//! On-disk formats.
//!
//! **Feature file** (`*.feat`): `b"TALF"`, then `u32` version, `u32` T,
//! `u32` channels (all little-endian), then `T x C` row-major `f32` LE.
//!
//! **Annotation file** (`annotations.json`):
//!
//! ```json
//! {
//!   "version": 1,
//!   "classes": ["class_0", "class_1"],
//!   "videos": [
//!     {"id": "video_0000", "features": "video_0000.feat", "num_frames": 128,
//!      "fps": 25.0, "subset": "train",
//!      "instances": [{"start_frame": 10, "end_frame": 31, "label": "class_1"}]}
//!   ]
//! }
//! ```
//!
//! Frames are 0-based and `end_frame` is inclusive.
//!
//! **Proposal file**: UTF-8 text, one header line
//! `# video_id<TAB>t_s<TAB>t_e<TAB>score<TAB>class`, then one tab-separated
//! record per proposal. `class` is a class name or `-`. Records are grouped
//! by video and sorted by descending score within a video.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationSet, FeatureSequence, Instance, Video};
use crate::error::{Error, Result};
use crate::evaluation::{GroundTruth, ProposalMap};
use crate::inference::Proposal;
use crate::synthetic::{Subset, SyntheticSpec};

pub const FEATURE_MAGIC: &[u8; 4] = b"TALF";
pub const FEATURE_VERSION: u32 = 1;
pub const ANNOTATION_VERSION: u32 = 1;
pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROPOSAL_HEADER: &str = "# video_id\tt_s\tt_e\tscore\tclass";

pub fn encode_features(features: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * features.values().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(features.channels() as u32).to_le_bytes());
    for &v in features.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<FeatureSequence> {
    if bytes.len() < 16 {
        return Err(Error::format(origin, "truncated feature header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(origin, "bad magic, not a feature file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(origin, format!("unsupported feature version {version}")));
    }
    let (frames, channels) = (word(8) as usize, word(12) as usize);
    let expected = frames
        .checked_mul(channels)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(origin, "feature dimensions overflow"))?;
    if bytes.len() - 16 != expected {
        return Err(Error::format(
            origin,
            format!("{frames}x{channels} features need {expected} payload bytes, found {}", bytes.len() - 16),
        ));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureSequence::new(frames, channels, values)
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedInstance {
    pub start_frame: usize,
    pub end_frame: usize,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    /// Feature file, relative to the annotation file's directory.
    pub features: String,
    pub num_frames: usize,
    pub fps: f64,
    pub subset: Subset,
    pub instances: Vec<AnnotatedInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: u32,
    pub classes: Vec<String>,
    pub videos: Vec<VideoEntry>,
}

impl AnnotationFile {
    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Annotations of one entry with labels resolved to class ids.
    pub fn annotation_set(&self, entry: &VideoEntry) -> Result<AnnotationSet> {
        let instances = entry
            .instances
            .iter()
            .map(|i| {
                let class = self.class_id(&i.label).ok_or_else(|| {
                    Error::format(ANNOTATION_FILE, format!("video {}: unknown class {:?}", entry.id, i.label))
                })?;
                Ok(Instance::new(i.start_frame, i.end_frame, class))
            })
            .collect::<Result<Vec<_>>>()?;
        AnnotationSet::new(instances, entry.num_frames)
            .map_err(|e| Error::format(ANNOTATION_FILE, format!("video {}: {e}", entry.id)))
    }

    pub fn ground_truth(&self, subset: Option<Subset>) -> Result<GroundTruth> {
        self.videos
            .iter()
            .filter(|v| subset.is_none_or(|s| v.subset == s))
            .map(|v| Ok((v.id.clone(), self.annotation_set(v)?.instances)))
            .collect()
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        if self.version != ANNOTATION_VERSION {
            return Err(Error::format(origin, format!("unsupported annotation version {}", self.version)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(&v.id) {
                return Err(Error::format(origin, format!("duplicate video id {}", v.id)));
            }
            self.annotation_set(v)?;
        }
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display(), e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        detail: e.to_string(),
    })
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let file: AnnotationFile = read_json(path)?;
    file.validate(&path.display().to_string())?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub subset: Subset,
    /// RNG stream the video was generated from.
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub generator: String,
    pub spec: SyntheticSpec,
    pub annotations: String,
    pub videos: Vec<ManifestEntry>,
}

/// A loaded dataset directory: the annotation file plus every video.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub annotations: AnnotationFile,
    pub videos: Vec<(Subset, Video)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let annotations = read_annotations(&root.join(ANNOTATION_FILE))?;
        let videos = annotations
            .videos
            .iter()
            .map(|entry| {
                let path = root.join(&entry.features);
                let features = read_features(&path)?;
                if features.frames() != entry.num_frames {
                    return Err(Error::format(
                        path.display(),
                        format!("{} frames, annotation says {}", features.frames(), entry.num_frames),
                    ));
                }
                Ok((
                    entry.subset,
                    Video {
                        id: entry.id.clone(),
                        features,
                        annotations: annotations.annotation_set(entry)?,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            annotations,
            videos,
        })
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |(s, _)| *s == subset).map(|(_, v)| v)
    }
}

/// Write a synthetic corpus: one feature file per video, the annotation
/// file and the manifest.
pub fn write_synthetic_dataset(root: &Path, spec: &SyntheticSpec, videos: &[Video]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let classes = spec.class_names();
    let mut entries = Vec::with_capacity(videos.len());
    let mut manifest = Vec::with_capacity(videos.len());
    for (i, v) in videos.iter().enumerate() {
        let file = format!("{}.feat", v.id);
        write_features(&root.join(&file), &v.features)?;
        entries.push(VideoEntry {
            id: v.id.clone(),
            features: file.clone(),
            num_frames: v.features.frames(),
            fps: 25.0,
            subset: spec.subset(i),
            instances: v
                .annotations
                .instances
                .iter()
                .map(|inst| AnnotatedInstance {
                    start_frame: inst.start,
                    end_frame: inst.end,
                    label: classes[inst.class_id].clone(),
                })
                .collect(),
        });
        manifest.push(ManifestEntry {
            id: v.id.clone(),
            features: file,
            subset: spec.subset(i),
            stream: i as u64,
        });
    }
    write_json(
        &root.join(ANNOTATION_FILE),
        &AnnotationFile {
            version: ANNOTATION_VERSION,
            classes,
            videos: entries,
        },
    )?;
    write_json(
        &root.join(MANIFEST_FILE),
        &Manifest {
            version: 1,
            generator: "synthetic".into(),
            spec: spec.clone(),
            annotations: ANNOTATION_FILE.into(),
            videos: manifest,
        },
    )
}

pub fn format_proposals(proposals: &ProposalMap, classes: &[String]) -> String {
    let mut out = String::from(PROPOSAL_HEADER);
    out.push('\n');
    for (video, props) in proposals {
        for p in props {
            let class = p.class_id.and_then(|c| classes.get(c)).map_or("-", String::as_str);
            writeln!(out, "{video}\t{}\t{}\t{}\t{class}", p.t_s, p.t_e, p.score).expect("string write");
        }
    }
    out
}

pub fn parse_proposals(text: &str, classes: &[String], origin: &str) -> Result<ProposalMap> {
    let mut out: ProposalMap = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |detail: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            detail,
        };
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [video, t_s, t_e, score, class] = fields[..] else {
            return Err(err(format!("expected 5 tab-separated fields, got {}", fields.len())));
        };
        let num = |name: &str, s: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("{name} {s:?} is not a finite number")))
        };
        let (t_s, t_e, score) = (num("t_s", t_s)?, num("t_e", t_e)?, num("score", score)?);
        if !(t_s < t_e) || t_s < 0.0 {
            return Err(err(format!("segment ({t_s}, {t_e}) is not valid")));
        }
        let class_id = match class {
            "-" => None,
            name => Some(
                classes
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| err(format!("unknown class {name:?}")))?,
            ),
        };
        out.entry(video.to_string()).or_default().push(Proposal {
            t_s,
            t_e,
            score,
            class_id,
        });
    }
    Ok(out)
}

pub fn write_proposals(path: &Path, proposals: &ProposalMap, classes: &[String]) -> Result<()> {
    std::fs::write(path, format_proposals(proposals, classes)).map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path, classes: &[String]) -> Result<ProposalMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_proposals(&text, classes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_round_trip_and_errors() {
        let f = FeatureSequence::new(3, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        let bytes = encode_features(&f);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(decode_features(&bytes, "m").unwrap(), f);
        assert!(decode_features(&bytes[..30], "m").is_err());
        assert!(decode_features(&bytes[..10], "m").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_features(&bad, "m").is_err());
    }

    #[test]
    fn proposal_round_trip() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let mut map = ProposalMap::new();
        map.insert(
            "v1".into(),
            vec![
                Proposal {
                    t_s: 1.5,
                    t_e: 10.0,
                    score: 0.1 + 0.2,
                    class_id: Some(1),
                },
                Proposal::new(0.0, 3.0, 1e-3),
            ],
        );
        let text = format_proposals(&map, &classes);
        assert!(text.starts_with(PROPOSAL_HEADER));
        assert_eq!(parse_proposals(&text, &classes, "p").unwrap(), map);
    }

    #[test]
    fn proposal_parse_errors_name_the_line() {
        let classes = vec!["a".to_string()];
        let text = format!("{PROPOSAL_HEADER}\nv\t1\t2\t0.5\ta\nv\t1\tx\t0.5\ta\n");
        match parse_proposals(&text, &classes, "p.tsv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_proposals("v\t1\t2\t0.5\n", &classes, "p").is_err());
        assert!(parse_proposals("v\t3\t2\t0.5\t-\n", &classes, "p").is_err());
        assert!(parse_proposals("v\t1\t2\t0.5\tzzz\n", &classes, "p").is_err());
    }

    #[test]
    fn synthetic_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_videos: 6,
            num_test: 2,
            ..SyntheticSpec::default()
        };
        let videos = spec.generate().unwrap();
        write_synthetic_dataset(dir.path(), &spec, &videos).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.videos.len(), 6);
        assert_eq!(ds.subset(Subset::Test).count(), 2);
        for ((_, a), b) in ds.videos.iter().zip(&videos) {
            assert_eq!(a, b);
        }
        let manifest: Manifest = read_json(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.spec, spec);
        assert_eq!(ds.annotations.ground_truth(Some(Subset::Train)).unwrap().len(), 4);
    }

    #[test]
    fn annotation_with_unknown_class_is_rejected() {
        let file = AnnotationFile {
            version: 1,
            classes: vec!["a".into()],
            videos: vec![VideoEntry {
                id: "v".into(),
                features: "v.feat".into(),
                num_frames: 10,
                fps: 25.0,
                subset: Subset::Train,
                instances: vec![AnnotatedInstance {
                    start_frame: 1,
                    end_frame: 4,
                    label: "b".into(),
                }],
            }],
        };
        assert!(file.validate("x").is_err());
    }
}
