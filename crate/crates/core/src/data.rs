//! Episodes, steps, actions and reasoning traces, plus their on-disk formats.
//!
//! Episode files are UTF-8 JSON-Lines with one episode per line. Trace files
//! live in a directory, one `<episode_id>.json` per episode, each holding a
//! JSON array indexed by step.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::teacher::parse_trace;

/// Number of components in a [`ContinuousAction`].
pub const ACTION_DIMS: usize = 7;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}, field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("episode {episode_id}: {reason}")]
    Invariant { episode_id: String, reason: String },
    #[error("duplicate episode id {0}")]
    DuplicateEpisode(String),
    #[error("episode {episode_id}: missing trace file {path}")]
    MissingTrace { episode_id: String, path: PathBuf },
    #[error("episode {episode_id}: {steps} steps but {traces} trace entries")]
    StepCountMismatch {
        episode_id: String,
        steps: usize,
        traces: usize,
    },
    #[error("episode {episode_id}: trace entry {step} unparseable: {reason}")]
    UnparseableTrace {
        episode_id: String,
        step: usize,
        reason: String,
    },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// 7-dim normalized action: translation xyz, rotation rpy, gripper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ContinuousAction(pub [f64; ACTION_DIMS]);

impl ContinuousAction {
    pub const HOLD: ContinuousAction = ContinuousAction([0.0; ACTION_DIMS]);

    pub fn new(components: [f64; ACTION_DIMS]) -> Result<Self, String> {
        for (i, c) in components.iter().enumerate() {
            if !c.is_finite() || c.abs() > 1.0 {
                return Err(format!("action component {i} = {c} outside [-1, 1]"));
            }
        }
        Ok(ContinuousAction(components))
    }

    /// Builds an action from a planar move and a gripper command.
    pub fn planar(dx: f64, dy: f64, gripper: f64) -> Self {
        ContinuousAction([dx, dy, 0.0, 0.0, 0.0, 0.0, gripper])
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn rotation(&self) -> [f64; 3] {
        [self.0[3], self.0[4], self.0[5]]
    }

    pub fn gripper(&self) -> f64 {
        self.0[6]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

impl TryFrom<Vec<f64>> for ContinuousAction {
    type Error = String;

    fn try_from(v: Vec<f64>) -> Result<Self, String> {
        let arr: [f64; ACTION_DIMS] = v
            .try_into()
            .map_err(|v: Vec<f64>| format!("action length {} != {ACTION_DIMS}", v.len()))?;
        ContinuousAction::new(arr)
    }
}

impl From<ContinuousAction> for Vec<f64> {
    fn from(a: ContinuousAction) -> Self {
        a.0.to_vec()
    }
}

/// Square grid of small color indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u8>>", into = "Vec<Vec<u8>>")]
pub struct ImageGrid {
    size: usize,
    cells: Vec<u8>,
}

impl ImageGrid {
    pub fn filled(size: usize, color: u8) -> Self {
        ImageGrid {
            size,
            cells: vec![color; size * size],
        }
    }

    pub fn from_cells(size: usize, cells: Vec<u8>) -> Result<Self, String> {
        if size == 0 || cells.len() != size * size {
            return Err(format!("{} cells do not form a {size}x{size} grid", cells.len()));
        }
        Ok(ImageGrid { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.size + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: u8) {
        self.cells[row * self.size + col] = color;
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.cells.chunks(self.size)
    }
}

impl TryFrom<Vec<Vec<u8>>> for ImageGrid {
    type Error = String;

    fn try_from(rows: Vec<Vec<u8>>) -> Result<Self, String> {
        let size = rows.len();
        if size == 0 {
            return Err("image has no rows".into());
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != size) {
            return Err(format!("image row {bad} has {} cells, expected {size}", rows[bad].len()));
        }
        Ok(ImageGrid {
            size,
            cells: rows.into_iter().flatten().collect(),
        })
    }
}

impl From<ImageGrid> for Vec<Vec<u8>> {
    fn from(g: ImageGrid) -> Self {
        g.cells.chunks(g.size).map(<[u8]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub images: Vec<ImageGrid>,
    pub instruction: String,
}

impl Observation {
    pub fn grid_size(&self) -> usize {
        self.images.first().map_or(0, ImageGrid::size)
    }

    fn validate(&self) -> Result<(), String> {
        let first = self.images.first().ok_or("observation has no images")?;
        if self.images.iter().any(|g| g.size() != first.size()) {
            return Err("images differ in size".into());
        }
        if self.instruction.trim().is_empty() {
            return Err("empty instruction".into());
        }
        Ok(())
    }
}

/// Four-section rationale attached to one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub observation: String,
    pub situation_analysis: String,
    pub spatial_reasoning: String,
    pub task_planning: String,
    pub logical_steps: Vec<String>,
    pub sub_action: String,
}

/// One element of a trace file: a parsed trace, or the raw teacher text when
/// parsing failed (empty when the teacher never answered).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceEntry {
    Parsed(ReasoningTrace),
    Raw { raw: String },
}

impl TraceEntry {
    pub fn is_parsed(&self) -> bool {
        matches!(self, TraceEntry::Parsed(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub action: ContinuousAction,
    pub trace: Option<ReasoningTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub task_name: String,
    pub steps: Vec<Step>,
    pub metadata: BTreeMap<String, String>,
}

impl Episode {
    pub fn instruction(&self) -> &str {
        self.steps
            .first()
            .map_or("", |s| s.observation.instruction.as_str())
    }

    pub fn is_enriched(&self) -> bool {
        self.steps.iter().all(|s| s.trace.is_some())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |reason: String| DataError::Invariant {
            episode_id: self.episode_id.clone(),
            reason,
        };
        if self.steps.is_empty() {
            return Err(fail("episode has no steps".into()));
        }
        let instruction = self.instruction();
        for (t, step) in self.steps.iter().enumerate() {
            step.observation
                .validate()
                .map_err(|e| fail(format!("step {t}: {e}")))?;
            if step.observation.instruction != instruction {
                return Err(fail(format!("step {t}: instruction differs from step 0")));
            }
        }
        let traced = self.steps.iter().filter(|s| s.trace.is_some()).count();
        if traced != 0 && traced != self.steps.len() {
            return Err(fail(format!(
                "{traced} of {} steps carry traces",
                self.steps.len()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    images: Vec<ImageGrid>,
    action: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trace: Option<ReasoningTrace>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    episode_id: String,
    task_name: String,
    instruction: String,
    steps: Vec<StepRecord>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

impl EpisodeRecord {
    fn from_episode(ep: &Episode) -> Self {
        EpisodeRecord {
            episode_id: ep.episode_id.clone(),
            task_name: ep.task_name.clone(),
            instruction: ep.instruction().to_string(),
            steps: ep
                .steps
                .iter()
                .map(|s| StepRecord {
                    images: s.observation.images.clone(),
                    action: s.action.0.to_vec(),
                    trace: s.trace.clone(),
                })
                .collect(),
            metadata: ep.metadata.clone(),
        }
    }

    fn into_episode(self) -> Result<Episode, DataError> {
        let id = self.episode_id;
        let mut steps = Vec::with_capacity(self.steps.len());
        for (t, s) in self.steps.into_iter().enumerate() {
            let action = ContinuousAction::try_from(s.action).map_err(|e| DataError::Invariant {
                episode_id: id.clone(),
                reason: format!("step {t}: {e}"),
            })?;
            steps.push(Step {
                observation: Observation {
                    images: s.images,
                    instruction: self.instruction.clone(),
                },
                action,
                trace: s.trace,
            });
        }
        let ep = Episode {
            episode_id: id,
            task_name: self.task_name,
            steps,
            metadata: self.metadata,
        };
        ep.validate()?;
        Ok(ep)
    }
}

/// Reads every episode of a JSON-Lines file, in file order. Blank lines are skipped.
pub fn load_episodes(path: &Path) -> Result<Vec<Episode>, DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut episodes = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let record: EpisodeRecord =
            serde_path_to_error::deserialize(de).map_err(|e| DataError::Malformed {
                line: idx + 1,
                field: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        let ep = record.into_episode()?;
        if !seen.insert(ep.episode_id.clone()) {
            return Err(DataError::DuplicateEpisode(ep.episode_id));
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

pub fn save_episodes(path: &Path, episodes: &[Episode]) -> Result<(), DataError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ep in episodes {
        let line = serde_json::to_string(&EpisodeRecord::from_episode(ep))
            .expect("episode records always serialize");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

pub fn trace_path(traces_dir: &Path, episode_id: &str) -> PathBuf {
    traces_dir.join(format!("{episode_id}.json"))
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        line: e.line(),
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn write_trace_file(path: &Path, entries: &[TraceEntry]) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(entries).expect("trace entries always serialize");
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

fn resolve_entry(episode_id: &str, step: usize, entry: TraceEntry) -> Result<ReasoningTrace, DataError> {
    match entry {
        TraceEntry::Parsed(trace) => Ok(trace),
        TraceEntry::Raw { raw } => parse_trace(&raw).map_err(|e| DataError::UnparseableTrace {
            episode_id: episode_id.to_string(),
            step,
            reason: e.to_string(),
        }),
    }
}

fn enrich(episode: &Episode, traces_dir: &Path) -> Result<Episode, DataError> {
    let path = trace_path(traces_dir, &episode.episode_id);
    if !path.exists() {
        return Err(DataError::MissingTrace {
            episode_id: episode.episode_id.clone(),
            path,
        });
    }
    let entries = read_trace_file(&path)?;
    if entries.len() != episode.steps.len() {
        return Err(DataError::StepCountMismatch {
            episode_id: episode.episode_id.clone(),
            steps: episode.steps.len(),
            traces: entries.len(),
        });
    }
    let mut out = episode.clone();
    for (t, (step, entry)) in out.steps.iter_mut().zip(entries).enumerate() {
        step.trace = Some(resolve_entry(&episode.episode_id, t, entry)?);
    }
    Ok(out)
}

/// Returns copies of `episodes` with a trace on every step, read from
/// `<traces_dir>/<episode_id>.json`. Raw entries are re-parsed; any failure
/// aborts the whole call.
pub fn attach_traces(episodes: &[Episode], traces_dir: &Path) -> Result<Vec<Episode>, DataError> {
    episodes.iter().map(|ep| enrich(ep, traces_dir)).collect()
}

/// Like [`attach_traces`] but drops episodes whose traces are missing or
/// unparseable, returning them with the reason.
pub fn attach_parsed_traces(
    episodes: &[Episode],
    traces_dir: &Path,
) -> (Vec<Episode>, Vec<(String, DataError)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ep in episodes {
        match enrich(ep, traces_dir) {
            Ok(e) => kept.push(e),
            Err(e) => dropped.push((ep.episode_id.clone(), e)),
        }
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(tag: &str) -> ReasoningTrace {
        ReasoningTrace {
            observation: format!("obs {tag}"),
            situation_analysis: "sit".into(),
            spatial_reasoning: "spa".into(),
            task_planning: "plan".into(),
            logical_steps: vec!["a".into(), "b".into()],
            sub_action: "a".into(),
        }
    }

    pub(crate) fn episode(id: &str, steps: usize) -> Episode {
        let mut img = ImageGrid::filled(4, 0);
        img.set(1, 2, 5);
        Episode {
            episode_id: id.into(),
            task_name: "move_near".into(),
            steps: (0..steps)
                .map(|t| Step {
                    observation: Observation {
                        images: vec![img.clone()],
                        instruction: "move the can near the orange".into(),
                    },
                    action: ContinuousAction::planar(if t % 2 == 0 { 1.0 } else { -1.0 }, 0.0, 0.0),
                    trace: None,
                })
                .collect(),
            metadata: BTreeMap::from([("seed".to_string(), "3".to_string())]),
        }
    }

    #[test]
    fn empty_file_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_episodes(&p).unwrap().is_empty());
    }

    #[test]
    fn two_episodes_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let eps = vec![episode("e0", 3), episode("e1", 3)];
        save_episodes(&p, &eps).unwrap();
        let back = load_episodes(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back.iter().all(|e| e.steps.len() == 3));
        assert_eq!(back, eps);
    }

    #[test]
    fn short_action_names_episode() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        let line = r#"{"episode_id":"bad7","task_name":"pick","instruction":"pick up the can","steps":[{"images":[[[0,1],[1,0]]],"action":[0,0,0,0,0,0]}],"metadata":{}}"#;
        fs::write(&p, line).unwrap();
        let err = load_episodes(&p).unwrap_err().to_string();
        assert!(err.contains("bad7"), "{err}");
        assert!(err.contains("action length"), "{err}");
    }

    #[test]
    fn malformed_reports_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        save_episodes(&p, &[episode("e0", 1)]).unwrap();
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{\"episode_id\":\"x\",\"task_name\":3}\n");
        fs::write(&p, text).unwrap();
        match load_episodes(&p).unwrap_err() {
            DataError::Malformed { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "task_name");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_episodes(Path::new("/nonexistent/eps.jsonl")).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }

    #[test]
    fn attach_three_traces() {
        let dir = tempfile::tempdir().unwrap();
        let ep = episode("e0", 3);
        let entries: Vec<_> = (0..3).map(|t| TraceEntry::Parsed(trace(&t.to_string()))).collect();
        write_trace_file(&trace_path(dir.path(), "e0"), &entries).unwrap();
        let out = attach_traces(std::slice::from_ref(&ep), dir.path()).unwrap();
        assert!(out[0].is_enriched());
        assert_eq!(out[0].steps[2].trace.as_ref().unwrap().observation, "obs 2");
        // idempotent
        let again = attach_traces(&out, dir.path()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn attach_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..2).map(|t| TraceEntry::Parsed(trace(&t.to_string()))).collect();
        write_trace_file(&trace_path(dir.path(), "e0"), &entries).unwrap();
        let err = attach_traces(&[episode("e0", 3)], dir.path()).unwrap_err();
        assert!(matches!(err, DataError::StepCountMismatch { steps: 3, traces: 2, .. }));
    }

    #[test]
    fn attach_missing_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(attach_traces(&[], Path::new("/does/not/exist")).unwrap().is_empty());
        let err = attach_traces(&[episode("e9", 1)], dir.path()).unwrap_err();
        assert!(matches!(err, DataError::MissingTrace { .. }));
    }

    #[test]
    fn raw_entry_is_unparseable() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![TraceEntry::Raw { raw: String::new() }];
        write_trace_file(&trace_path(dir.path(), "e0"), &entries).unwrap();
        let err = attach_traces(&[episode("e0", 1)], dir.path()).unwrap_err();
        assert!(matches!(err, DataError::UnparseableTrace { step: 0, .. }));
        let (kept, dropped) = attach_parsed_traces(&[episode("e0", 1)], dir.path());
        assert!(kept.is_empty());
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn trace_entry_json_shapes() {
        let raw: TraceEntry = serde_json::from_str(r#"{"raw": ""}"#).unwrap();
        assert_eq!(raw, TraceEntry::Raw { raw: String::new() });
        let parsed = TraceEntry::Parsed(trace("x"));
        let text = serde_json::to_string(&parsed).unwrap();
        assert!(text.contains("\"situation_analysis\""));
        assert_eq!(serde_json::from_str::<TraceEntry>(&text).unwrap(), parsed);
    }
}
