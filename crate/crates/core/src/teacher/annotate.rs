use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{read_trace_file, trace_path, write_trace_file, DataError, Episode, Step, TraceEntry};

use super::backend::TeacherBackend;
use super::parse::parse_trace;
use super::prompt::build_prompt;
use super::TeacherError;

#[derive(Debug, Clone)]
pub struct AnnotateOptions {
    pub workers: usize,
    /// Retries after the first failed backend call.
    pub max_retries: u32,
    /// Delay before retry `i` is `base_delay * 2^i`.
    pub base_delay: Duration,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            workers: 1,
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepFailure {
    pub episode_id: String,
    pub step_index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AnnotationReport {
    pub episodes_total: usize,
    pub steps_total: usize,
    /// Includes steps found already annotated on disk.
    pub steps_annotated: usize,
    pub steps_failed: usize,
    pub steps_skipped: usize,
    pub failures: Vec<StepFailure>,
}

enum StepOutcome {
    Parsed(TraceEntry),
    Failed(TraceEntry, String),
}

struct EpisodeOutcome {
    skipped: bool,
    steps: Vec<StepOutcome>,
}

fn call_with_retry(
    backend: &dyn TeacherBackend,
    step: &Step,
    prompt: &str,
    opts: &AnnotateOptions,
) -> Result<String, TeacherError> {
    let mut attempt = 0;
    loop {
        match backend.generate(&step.observation.images, &step.observation.instruction, prompt) {
            Ok(text) => return Ok(text),
            Err(e) if attempt >= opts.max_retries => return Err(e),
            Err(_) => {
                thread::sleep(opts.base_delay.saturating_mul(1 << attempt.min(16)));
                attempt += 1;
            }
        }
    }
}

fn annotate_step(backend: &dyn TeacherBackend, step: &Step, opts: &AnnotateOptions) -> StepOutcome {
    let prompt = match build_prompt(&step.observation.instruction) {
        Ok(p) => p,
        Err(e) => return StepOutcome::Failed(TraceEntry::Raw { raw: String::new() }, e.to_string()),
    };
    match call_with_retry(backend, step, &prompt, opts) {
        Ok(text) => match parse_trace(&text) {
            Ok(trace) => StepOutcome::Parsed(TraceEntry::Parsed(trace)),
            Err(e) => StepOutcome::Failed(TraceEntry::Raw { raw: text }, e.to_string()),
        },
        Err(e) => StepOutcome::Failed(TraceEntry::Raw { raw: String::new() }, e.to_string()),
    }
}

fn is_complete(path: &Path, steps: usize) -> bool {
    read_trace_file(path)
        .map(|entries| entries.len() == steps && entries.iter().all(TraceEntry::is_parsed))
        .unwrap_or(false)
}

fn annotate_episode(
    backend: &dyn TeacherBackend,
    episode: &Episode,
    out_dir: &Path,
    opts: &AnnotateOptions,
) -> Result<EpisodeOutcome, DataError> {
    let path = trace_path(out_dir, &episode.episode_id);
    if is_complete(&path, episode.steps.len()) {
        return Ok(EpisodeOutcome {
            skipped: true,
            steps: Vec::new(),
        });
    }
    let steps: Vec<StepOutcome> = episode
        .steps
        .par_iter()
        .map(|s| annotate_step(backend, s, opts))
        .collect();
    let entries: Vec<TraceEntry> = steps
        .iter()
        .map(|o| match o {
            StepOutcome::Parsed(e) | StepOutcome::Failed(e, _) => e.clone(),
        })
        .collect();
    write_trace_file(&path, &entries)?;
    Ok(EpisodeOutcome { skipped: false, steps })
}

/// [`annotate_dataset_with`] using default retry settings.
pub fn annotate_dataset(
    backend: &dyn TeacherBackend,
    episodes: &[Episode],
    out_dir: &Path,
    workers: usize,
) -> Result<AnnotationReport, TeacherError> {
    let opts = AnnotateOptions {
        workers,
        ..AnnotateOptions::default()
    };
    annotate_dataset_with(backend, episodes, out_dir, &opts)
}

/// Writes `<out_dir>/<episode_id>.json` with one entry per step. Files that
/// already hold a parsed entry for every step are left alone. Steps whose
/// backend calls keep failing are stored as `{"raw": ""}`, steps whose text
/// does not parse keep the text under `raw`; both count as failed.
pub fn annotate_dataset_with(
    backend: &dyn TeacherBackend,
    episodes: &[Episode],
    out_dir: &Path,
    opts: &AnnotateOptions,
) -> Result<AnnotationReport, TeacherError> {
    if opts.workers == 0 {
        return Err(TeacherError::NoWorkers);
    }
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| TeacherError::Backend(format!("worker pool: {e}")))?;
    let outcomes: Vec<EpisodeOutcome> = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| annotate_episode(backend, ep, out_dir, opts))
            .collect::<Result<_, _>>()
    })?;

    let mut report = AnnotationReport {
        episodes_total: episodes.len(),
        ..AnnotationReport::default()
    };
    for (ep, outcome) in episodes.iter().zip(outcomes) {
        report.steps_total += ep.steps.len();
        if outcome.skipped {
            report.steps_skipped += ep.steps.len();
            report.steps_annotated += ep.steps.len();
            continue;
        }
        for (i, step) in outcome.steps.into_iter().enumerate() {
            match step {
                StepOutcome::Parsed(_) => report.steps_annotated += 1,
                StepOutcome::Failed(_, reason) => {
                    report.steps_failed += 1;
                    report.failures.push(StepFailure {
                        episode_id: ep.episode_id.clone(),
                        step_index: i,
                        reason,
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Sequential, file-free annotation: copies of `episodes` with every step's
/// trace set. The first step that fails to generate or parse is an error.
pub fn annotate_in_memory(backend: &dyn TeacherBackend, episodes: &[Episode]) -> Result<Vec<Episode>, TeacherError> {
    episodes
        .iter()
        .map(|ep| {
            let mut ep = ep.clone();
            for step in &mut ep.steps {
                let instruction = &step.observation.instruction;
                let prompt = build_prompt(instruction)?;
                let text = backend.generate(&step.observation.images, instruction, &prompt)?;
                step.trace = Some(parse_trace(&text)?);
            }
            Ok(ep)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::data::ImageGrid;
    use crate::sim::{generate_demonstrations, SimConfig, TaskFamily};
    use crate::teacher::RuleBasedTeacher;

    struct Counting(AtomicUsize);

    impl TeacherBackend for Counting {
        fn name(&self) -> &str {
            "counting"
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn generate(&self, images: &[ImageGrid], instruction: &str, prompt: &str) -> Result<String, TeacherError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            RuleBasedTeacher.generate(images, instruction, prompt)
        }
    }

    struct Garbled;

    impl TeacherBackend for Garbled {
        fn name(&self) -> &str {
            "garbled"
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn generate(&self, _: &[ImageGrid], _: &str, _: &str) -> Result<String, TeacherError> {
            Ok("<Observation>: nothing else".into())
        }
    }

    fn episodes(n: usize, max_len: usize) -> Vec<Episode> {
        let cfg = SimConfig { grid_size: 8, ..SimConfig::default() };
        let mut eps = generate_demonstrations(n, &[TaskFamily::MoveNear, TaskFamily::Pick], 3, &cfg).unwrap();
        for ep in &mut eps {
            ep.steps.truncate(max_len);
        }
        eps
    }

    #[test]
    fn two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let eps = episodes(2, 3);
        let r = annotate_dataset(&RuleBasedTeacher, &eps, dir.path(), 2).unwrap();
        assert_eq!(r.episodes_total, 2);
        assert_eq!(r.steps_annotated, 6);
        assert_eq!(r.steps_failed, 0);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn rerun_makes_no_calls() {
        let dir = tempfile::tempdir().unwrap();
        let eps = episodes(3, 100);
        let backend = Counting(AtomicUsize::new(0));
        let first = annotate_dataset(&backend, &eps, dir.path(), 2).unwrap();
        let calls = backend.0.load(Ordering::SeqCst);
        assert_eq!(calls, first.steps_total);
        let second = annotate_dataset(&backend, &eps, dir.path(), 2).unwrap();
        assert_eq!(backend.0.load(Ordering::SeqCst), calls);
        assert_eq!(second.steps_skipped, second.steps_total);
        assert_eq!(second.steps_annotated, second.steps_total);
    }

    #[test]
    fn parse_failures_keep_raw() {
        let dir = tempfile::tempdir().unwrap();
        let eps = episodes(1, 2);
        let r = annotate_dataset(&Garbled, &eps, dir.path(), 1).unwrap();
        assert_eq!(r.steps_failed, 2);
        assert_eq!(r.steps_annotated + r.steps_failed, r.steps_total);
        let entries = read_trace_file(&trace_path(dir.path(), &eps[0].episode_id)).unwrap();
        assert_eq!(entries[0], TraceEntry::Raw { raw: "<Observation>: nothing else".into() });
    }

    #[test]
    fn zero_workers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            annotate_dataset(&RuleBasedTeacher, &[], dir.path(), 0),
            Err(TeacherError::NoWorkers)
        ));
    }
}
