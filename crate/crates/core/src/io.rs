//! On-disk formats: case files, volumes, dataset directories, predictions.
//!
//! All structured data is JSON. Volumes are a JSON header next to a raw
//! little-endian `f32` payload in x-fastest order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::CenterlineGraph;
use crate::topology::CategoryTopology;
use crate::tree::{build_vessel_tree, Domain, DomainRoot, Segment, VesselTree};
use crate::volume::{BinaryVolume, IntensityVolume};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Deserializes JSON, reporting failures with the file path and byte offset.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(path, &read_text(path)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

/// One case: ostium roots plus either a centerline graph or pre-split
/// segments. Roots index centerline points in the first form and segment ids
/// in the second. Gold classes go with the segment form only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub id: String,
    pub roots: Vec<DomainRoot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centerline: Option<CenterlineGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
    /// Parent->child pairs of segment ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connections: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<String>>,
    /// Volume header path, relative to the case file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<PathBuf>,
}

impl CaseFile {
    /// Segment-form case from a tree with optional gold class indices.
    pub fn from_tree(id: &str, tree: &VesselTree, gold: Option<&[usize]>, topo: &CategoryTopology) -> Self {
        let ids: Vec<usize> = tree.segments.iter().map(|s| s.id).collect();
        Self {
            id: id.to_string(),
            roots: tree
                .roots
                .iter()
                .map(|&(domain, i)| DomainRoot { domain, index: ids[i] })
                .collect(),
            centerline: None,
            segments: Some(tree.segments.clone()),
            connections: Some(tree.connections.iter().map(|&(p, c)| (ids[p], ids[c])).collect()),
            gold: gold.map(|g| g.iter().map(|&c| topo.class_name(c).to_string()).collect()),
            volume: None,
        }
    }

    /// Centerline-form case.
    pub fn from_centerline(id: &str, graph: CenterlineGraph, roots: Vec<DomainRoot>) -> Self {
        Self {
            id: id.to_string(),
            roots,
            centerline: Some(graph),
            segments: None,
            connections: None,
            gold: None,
            volume: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MalformedCase(format!("case {}: {m}", self.id)));
        match (&self.centerline, &self.segments) {
            (Some(_), Some(_)) => return bad("has both a centerline and segments".into()),
            (None, None) => return bad("has neither a centerline nor segments".into()),
            (Some(_), None) if self.connections.is_some() => {
                return bad("connections belong with the segment form".into())
            }
            (Some(_), None) if self.gold.is_some() => {
                return bad("gold classes need the segment form".into())
            }
            (None, Some(segments)) => {
                if let Some(gold) = &self.gold {
                    if gold.len() != segments.len() {
                        return bad(format!(
                            "{} gold classes for {} segments",
                            gold.len(),
                            segments.len()
                        ));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The case's vessel tree, building it from the centerline if needed.
    pub fn to_tree(&self) -> Result<VesselTree> {
        self.validate()?;
        if let Some(graph) = &self.centerline {
            return build_vessel_tree(graph, &self.roots);
        }
        let segments = self.segments.clone().unwrap_or_default();
        if segments.is_empty() {
            return Err(Error::EmptyInput(format!("case {} has no segments", self.id)));
        }
        let mut pos = HashMap::new();
        for (i, s) in segments.iter().enumerate() {
            if pos.insert(s.id, i).is_some() {
                return Err(Error::MalformedCase(format!(
                    "case {}: duplicate segment id {}",
                    self.id, s.id
                )));
            }
        }
        let lookup = |id: usize| {
            pos.get(&id).copied().ok_or_else(|| {
                Error::MalformedCase(format!("case {}: unknown segment id {id}", self.id))
            })
        };
        let connections = self
            .connections
            .iter()
            .flatten()
            .map(|&(p, c)| Ok((lookup(p)?, lookup(c)?)))
            .collect::<Result<_>>()?;
        let roots = self
            .roots
            .iter()
            .map(|r| {
                let i = lookup(r.index).map_err(|_| {
                    Error::InvalidRoot(format!("case {}: root segment {} does not exist", self.id, r.index))
                })?;
                if segments[i].domain != r.domain {
                    return Err(Error::InvalidRoot(format!(
                        "case {}: root segment {} belongs to {}, not {}",
                        self.id, r.index, segments[i].domain, r.domain
                    )));
                }
                Ok((r.domain, i))
            })
            .collect::<Result<Vec<(Domain, usize)>>>()?;
        let tree = VesselTree {
            segments,
            connections,
            roots,
        };
        tree.validate(None)
            .map_err(|e| Error::MalformedCase(format!("case {}: {e}", self.id)))?;
        Ok(tree)
    }

    /// Gold class indices, or `None` when the case carries no labels.
    pub fn gold_indices(&self, topo: &CategoryTopology) -> Result<Option<Vec<usize>>> {
        self.gold
            .as_ref()
            .map(|g| g.iter().map(|name| topo.class_index(name)).collect())
            .transpose()
    }
}

pub fn load_case(path: &Path) -> Result<CaseFile> {
    let case: CaseFile = load_json(path)?;
    case.validate()?;
    Ok(case)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    /// Payload path, relative to the header's directory.
    pub data: PathBuf,
}

pub const VOLUME_DTYPE: &str = "f32le";

/// Writes `header_path` and its payload (same stem, `.raw`). Values are
/// stored as `f32`.
pub fn write_volume(header_path: &Path, volume: &IntensityVolume) -> Result<()> {
    let raw = header_path.with_extension("raw");
    let header = VolumeHeader {
        dims: volume.dims(),
        spacing: volume.spacing(),
        dtype: VOLUME_DTYPE.into(),
        data: PathBuf::from(raw.file_name().expect("file name")),
    };
    let bytes: Vec<u8> = volume
        .values()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_bytes(&raw, &bytes)?;
    save_json(header_path, &header)
}

pub fn read_volume(header_path: &Path) -> Result<IntensityVolume> {
    let header: VolumeHeader = load_json(header_path)?;
    if header.dtype != VOLUME_DTYPE {
        return Err(Error::Input(format!(
            "{}: unsupported dtype {} (expected {VOLUME_DTYPE})",
            header_path.display(),
            header.dtype
        )));
    }
    let raw = header_path.parent().unwrap_or(Path::new("")).join(&header.data);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Input(format!(
            "{}: {} payload bytes for dims {:?} (expected {})",
            raw.display(),
            bytes.len(),
            header.dims,
            4 * n
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    IntensityVolume::new(header.dims, header.spacing, values)
}

/// Mask from an intensity volume: voxels above 0.5 are foreground.
pub fn threshold(volume: &IntensityVolume) -> Result<BinaryVolume> {
    let grid: Vec<bool> = volume.values().iter().map(|&v| v > 0.5).collect();
    BinaryVolume::from_grid(volume.dims(), volume.spacing(), &grid)
}

pub fn mask_to_volume(mask: &BinaryVolume) -> Result<IntensityVolume> {
    let values = mask.to_grid().into_iter().map(|b| f64::from(u8::from(b))).collect();
    IntensityVolume::new(mask.dims(), mask.spacing(), values)
}

/// `manifest.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Free-form provenance (for example the generator configuration).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

pub const MANIFEST: &str = "manifest.json";

pub fn case_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("cases").join(format!("{id}.json"))
}

/// A case file resolved against a topology.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub file: CaseFile,
    pub tree: VesselTree,
    pub gold: Option<Vec<usize>>,
    pub volume: Option<IntensityVolume>,
}

/// Loads one case file, its tree, gold indices, and (if referenced) volume.
pub fn load_resolved(path: &Path, topo: &CategoryTopology) -> Result<LoadedCase> {
    let file = load_case(path)?;
    let tree = file.to_tree()?;
    let gold = file.gold_indices(topo)?;
    let volume = match &file.volume {
        Some(rel) => {
            let p = path.parent().unwrap_or(Path::new("")).join(rel);
            if !p.exists() {
                return Err(Error::Input(format!(
                    "case {}: volume {} does not exist",
                    file.id,
                    p.display()
                )));
            }
            Some(read_volume(&p)?)
        }
        None => None,
    };
    Ok(LoadedCase {
        file,
        tree,
        gold,
        volume,
    })
}

/// Loads the given cases of a dataset directory. Every failing case is
/// reported together in one validation error.
pub fn load_cases(dir: &Path, ids: &[String], topo: &CategoryTopology) -> Result<Vec<LoadedCase>> {
    let mut out = Vec::with_capacity(ids.len());
    let mut failures = Vec::new();
    for id in ids {
        match load_resolved(&case_path(dir, id), topo) {
            Ok(c) => out.push(c),
            Err(e @ (Error::Parse { .. } | Error::Io { .. })) => return Err(e),
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Validation(format!(
            "{} case(s) rejected at load:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub id: usize,
    pub class: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectionRecord {
    /// Parent and child segment ids.
    pub pair: (usize, usize),
    pub classes: (String, String),
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePredictions {
    pub id: String,
    pub segments: Vec<SegmentPrediction>,
    pub connections: Vec<ConnectionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub cases: Vec<CasePredictions>,
}

impl CasePredictions {
    /// Predicted class indices in the order of `tree`'s segments.
    pub fn classes_for(&self, tree: &VesselTree, topo: &CategoryTopology) -> Result<Vec<usize>> {
        let by_id: HashMap<usize, &str> = self.segments.iter().map(|s| (s.id, s.class.as_str())).collect();
        tree.segments
            .iter()
            .map(|s| {
                let name = by_id.get(&s.id).ok_or_else(|| {
                    Error::Input(format!("predictions for case {} miss segment {}", self.id, s.id))
                })?;
                topo.class_index(name)
            })
            .collect()
    }
}
