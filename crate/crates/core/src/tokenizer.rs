//! Partitioned vocabulary and sample assembly.
//!
//! Id layout: `[PAD BOS EOS IMG][text words][action bins, dim-major]`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{ContinuousAction, Episode, ImageGrid, Observation, ReasoningTrace, Step, ACTION_DIMS};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const IMG_ID: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;
pub const IGNORE: i32 = -100;
pub const UNK: &str = "<unk>";
pub const DEFAULT_BINS: usize = 32;
pub const DEFAULT_REASONING_BUDGET: usize = 244;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("duplicate word `{0}` in text vocabulary")]
    DuplicateWord(String),
    #[error("bins_per_dim must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("action component {dim} = {value} is outside [-1, 1]")]
    ActionOutOfRange { dim: usize, value: f64 },
    #[error("expected {expected} action ids, got {got}")]
    ActionLength { expected: usize, got: usize },
    #[error("token {id} is not a bin of action dimension {dim}")]
    IdOutsideDim { dim: usize, id: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
}

/// Position tag in an assembled sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Special,
    Image,
    Instruction,
    Reasoning,
    Action,
}

impl Segment {
    pub fn supervised(self) -> bool {
        matches!(self, Segment::Reasoning | Segment::Action)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    bins_per_dim: usize,
    action_dims: usize,
}

#[derive(Serialize, Deserialize)]
struct Ranges {
    special: [u32; 2],
    text: [u32; 2],
    action: [u32; 2],
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    bins_per_dim: usize,
    action_dims: usize,
    ranges: Ranges,
}

/// Lowercased words; punctuation characters become separate tokens.
pub fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Training-time rendering of a trace, sections in fixed order.
pub fn render_trace_for_training(trace: &ReasoningTrace) -> String {
    let mut plan = trace.task_planning.clone();
    for s in &trace.logical_steps {
        plan.push_str(" ; ");
        plan.push_str(s);
    }
    format!(
        "observation: {} situation: {} spatial: {} plan: {} next: {}",
        trace.observation, trace.situation_analysis, trace.spatial_reasoning, plan, trace.sub_action
    )
}

/// Sorted word list covering every instruction and trace in `episodes`.
pub fn corpus_words(episodes: &[Episode]) -> Vec<String> {
    let mut words = BTreeSet::new();
    for ep in episodes {
        for step in &ep.steps {
            words.extend(split_text(&step.observation.instruction));
            if let Some(t) = &step.trace {
                words.extend(split_text(&render_trace_for_training(t)));
            }
        }
    }
    words.remove(UNK);
    words.into_iter().collect()
}

/// `<unk>` is placed first in the text range unless already present.
pub fn build_vocabulary(bins_per_dim: usize, text_vocab: &[String]) -> Result<Vocabulary, TokenizerError> {
    build_with_dims(bins_per_dim, ACTION_DIMS, text_vocab)
}

fn build_with_dims(bins_per_dim: usize, action_dims: usize, text_vocab: &[String]) -> Result<Vocabulary, TokenizerError> {
    if bins_per_dim < 2 {
        return Err(TokenizerError::TooFewBins(bins_per_dim));
    }
    let mut words = Vec::with_capacity(text_vocab.len() + 1);
    if !text_vocab.iter().any(|w| w == UNK) {
        words.push(UNK.to_string());
    }
    words.extend(text_vocab.iter().cloned());
    let mut index = HashMap::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        if index.insert(w.clone(), NUM_SPECIAL + i as u32).is_some() {
            return Err(TokenizerError::DuplicateWord(w.clone()));
        }
    }
    Ok(Vocabulary {
        words,
        index,
        bins_per_dim,
        action_dims,
    })
}

impl Vocabulary {
    pub fn bins_per_dim(&self) -> usize {
        self.bins_per_dim
    }

    pub fn action_dims(&self) -> usize {
        self.action_dims
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len() + self.action_dims * self.bins_per_dim
    }

    pub fn text_range(&self) -> Range<u32> {
        NUM_SPECIAL..NUM_SPECIAL + self.words.len() as u32
    }

    pub fn translation_token_start_idx(&self) -> u32 {
        self.text_range().end
    }

    /// Inclusive upper bound of the action interval.
    pub fn gripper_token_end_idx(&self) -> u32 {
        self.size() as u32 - 1
    }

    pub fn is_action(&self, id: u32) -> bool {
        (self.translation_token_start_idx()..=self.gripper_token_end_idx()).contains(&id)
    }

    pub fn is_text(&self, id: u32) -> bool {
        self.text_range().contains(&id)
    }

    /// Bin ids of action dimension `dim`.
    pub fn dim_range(&self, dim: usize) -> Range<u32> {
        let start = self.translation_token_start_idx() + (dim * self.bins_per_dim) as u32;
        start..start + self.bins_per_dim as u32
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or_else(|| self.unk_id())
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        split_text(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// Human-readable form of any id.
    pub fn token_str(&self, id: u32) -> String {
        match id {
            PAD_ID => "<pad>".into(),
            BOS_ID => "<bos>".into(),
            EOS_ID => "<eos>".into(),
            IMG_ID => "<img>".into(),
            _ if self.is_text(id) => self.words[(id - NUM_SPECIAL) as usize].clone(),
            _ if self.is_action(id) => {
                let off = (id - self.translation_token_start_idx()) as usize;
                format!("<a{}_{}>", off / self.bins_per_dim, off % self.bins_per_dim)
            }
            _ => format!("<oov{id}>"),
        }
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token_str(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn bin_of(&self, value: f64) -> usize {
        let b = ((value + 1.0) / 2.0 * self.bins_per_dim as f64).floor();
        (b.max(0.0) as usize).min(self.bins_per_dim - 1)
    }

    pub fn bin_center(&self, bin: usize) -> f64 {
        -1.0 + (bin as f64 + 0.5) * 2.0 / self.bins_per_dim as f64
    }

    pub fn encode_action(&self, a: &ContinuousAction) -> Result<Vec<u32>, TokenizerError> {
        a.0.iter()
            .enumerate()
            .map(|(dim, &v)| {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(TokenizerError::ActionOutOfRange { dim, value: v });
                }
                Ok(self.dim_range(dim).start + self.bin_of(v) as u32)
            })
            .collect()
    }

    pub fn decode_action(&self, ids: &[u32]) -> Result<ContinuousAction, TokenizerError> {
        if ids.len() != self.action_dims {
            return Err(TokenizerError::ActionLength {
                expected: self.action_dims,
                got: ids.len(),
            });
        }
        let mut out = [0.0; ACTION_DIMS];
        for (dim, &id) in ids.iter().enumerate() {
            out[dim] = self.decode_action_id(dim, id)?;
        }
        Ok(ContinuousAction(out))
    }

    /// Bin center of `id` as a value of dimension `dim`.
    pub fn decode_action_id(&self, dim: usize, id: u32) -> Result<f64, TokenizerError> {
        let r = self.dim_range(dim);
        if !r.contains(&id) {
            return Err(TokenizerError::IdOutsideDim { dim, id });
        }
        Ok(self.bin_center((id - r.start) as usize))
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            words: self.words.clone(),
            bins_per_dim: self.bins_per_dim,
            action_dims: self.action_dims,
            ranges: Ranges {
                special: [0, NUM_SPECIAL],
                text: [self.text_range().start, self.text_range().end],
                action: [self.translation_token_start_idx(), self.gripper_token_end_idx()],
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        let v = build_with_dims(file.bins_per_dim, file.action_dims, &file.words)?;
        if v.words.len() != file.words.len() {
            return Err(TokenizerError::Malformed(format!("text words must include `{UNK}`")));
        }
        let expect = v.to_file().ranges;
        if expect.text != file.ranges.text || expect.action != file.ranges.action || file.ranges.special != expect.special {
            return Err(TokenizerError::Malformed("ranges disagree with word list".into()));
        }
        Ok(v)
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json()).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path).map_err(|e| TokenizerError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedSample {
    pub input_ids: Vec<u32>,
    /// Unshifted: `labels[p]` is the target for position `p` itself.
    pub labels: Vec<i32>,
    pub segments: Vec<Segment>,
    /// Images whose cells fill the IMG positions, view by view, row-major.
    pub images: Vec<ImageGrid>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == seg).count()
    }

    pub fn positions(&self, seg: Segment) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.segments[p] == seg).collect()
    }

    fn push(&mut self, id: u32, seg: Segment) {
        self.input_ids.push(id);
        self.labels.push(if seg.supervised() { id as i32 } else { IGNORE });
        self.segments.push(seg);
    }
}

/// `[BOS][IMG x views*P^2][instruction]`, the inference-time prefix.
pub fn assemble_prompt(obs: &Observation, v: &Vocabulary) -> TokenizedSample {
    let mut s = TokenizedSample {
        input_ids: Vec::new(),
        labels: Vec::new(),
        segments: Vec::new(),
        images: obs.images.clone(),
    };
    s.push(BOS_ID, Segment::Special);
    let n_img: usize = obs.images.iter().map(|g| g.size() * g.size()).sum();
    for _ in 0..n_img {
        s.push(IMG_ID, Segment::Image);
    }
    for id in v.encode_text(&obs.instruction) {
        s.push(id, Segment::Instruction);
    }
    s
}

/// Reasoning token ids of a trace, truncated from the tail to `budget`.
pub fn encode_trace(trace: &ReasoningTrace, v: &Vocabulary, budget: usize) -> Vec<u32> {
    let mut ids = v.encode_text(&render_trace_for_training(trace));
    ids.truncate(budget);
    ids
}

/// `[BOS][IMG...][instruction][trace <= budget][7 action][EOS]`; only
/// reasoning and action positions carry labels.
pub fn assemble_sample(step: &Step, v: &Vocabulary, reasoning_budget: usize) -> Result<TokenizedSample, TokenizerError> {
    let action = v.encode_action(&step.action)?;
    let mut s = assemble_prompt(&step.observation, v);
    if let Some(trace) = &step.trace {
        for id in encode_trace(trace, v, reasoning_budget) {
            s.push(id, Segment::Reasoning);
        }
    }
    for id in action {
        s.push(id, Segment::Action);
    }
    s.push(EOS_ID, Segment::Special);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn words(n: usize) -> Vec<String> {
        let mut w: Vec<String> = (0..n - 1).map(|i| format!("w{i}")).collect();
        w.insert(0, UNK.into());
        w
    }

    #[test]
    fn ten_words_thirty_two_bins() {
        let v = build_vocabulary(32, &words(10)).unwrap();
        assert_eq!(v.translation_token_start_idx(), 14);
        assert_eq!(v.gripper_token_end_idx() - v.translation_token_start_idx() + 1, 224);
        assert_eq!(v.size(), 14 + 224);
        assert_eq!(v, build_vocabulary(32, &words(10)).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(build_vocabulary(1, &words(3)), Err(TokenizerError::TooFewBins(1))));
        let dup = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(build_vocabulary(4, &dup), Err(TokenizerError::DuplicateWord(_))));
    }

    #[test]
    fn unk_inserted_when_missing() {
        let v = build_vocabulary(4, &["cup".to_string()]).unwrap();
        assert_eq!(v.unk_id(), 4);
        assert_eq!(v.word_id("cup"), 5);
        assert_eq!(v.word_id("zebra"), 4);
    }

    #[test]
    fn zero_and_boundaries() {
        let v = build_vocabulary(32, &words(3)).unwrap();
        let zero = v.encode_action(&ContinuousAction::HOLD).unwrap();
        for (d, id) in zero.iter().enumerate() {
            assert_eq!(id - v.dim_range(d).start, 16);
        }
        let back = v.decode_action(&zero).unwrap();
        assert!(back.max_abs() <= 1.0 / 32.0 + 1e-12);
        let lo = v.encode_action(&ContinuousAction([-1.0; 7])).unwrap();
        let hi = v.encode_action(&ContinuousAction([1.0; 7])).unwrap();
        for d in 0..7 {
            assert_eq!(lo[d], v.dim_range(d).start);
            assert_eq!(hi[d], v.dim_range(d).end - 1);
        }
    }

    #[test]
    fn decode_rejects_wrong_dim() {
        let v = build_vocabulary(8, &words(3)).unwrap();
        let mut ids = v.encode_action(&ContinuousAction::HOLD).unwrap();
        ids.swap(0, 1);
        assert!(matches!(v.decode_action(&ids), Err(TokenizerError::IdOutsideDim { dim: 0, .. })));
        assert!(v.decode_action(&ids[..6]).is_err());
        assert!(v.encode_action(&ContinuousAction([1.5, 0., 0., 0., 0., 0., 0.])).is_err());
    }

    #[test]
    fn split_text_punctuation() {
        assert_eq!(split_text("Plan: go, NOW."), vec!["plan", ":", "go", ",", "now", "."]);
    }

    #[test]
    fn json_roundtrip_and_hash() {
        let v = build_vocabulary(8, &words(5)).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let other = build_vocabulary(16, &words(5)).unwrap();
        assert_ne!(other.hash(), v.hash());
    }

    fn trace(len: usize) -> ReasoningTrace {
        ReasoningTrace {
            observation: vec!["x"; len].join(" "),
            situation_analysis: "s".into(),
            spatial_reasoning: "p".into(),
            task_planning: "t".into(),
            logical_steps: vec!["a".into()],
            sub_action: "n".into(),
        }
    }

    fn step(size: usize, with_trace: Option<usize>) -> Step {
        Step {
            observation: Observation {
                images: vec![ImageGrid::filled(size, 0)],
                instruction: "pick up the can".into(),
            },
            action: ContinuousAction::planar(1.0, 0.0, -1.0),
            trace: with_trace.map(trace),
        }
    }

    fn vocab() -> Vocabulary {
        let mut w: Vec<String> = ["pick", "up", "the", "can", "x", "s", "p", "t", "a", "n", ":", ";"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        w.extend(["observation", "situation", "spatial", "plan", "next"].map(String::from));
        build_vocabulary(32, &w).unwrap()
    }

    #[test]
    fn sixteen_grid_layout() {
        let s = assemble_sample(&step(16, Some(10)), &vocab(), 244).unwrap();
        assert_eq!(s.count(Segment::Image), 256);
        assert_eq!(s.count(Segment::Action), 7);
        assert!(s.count(Segment::Reasoning) <= 244);
        assert_eq!(s.input_ids[0], BOS_ID);
        assert_eq!(*s.input_ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn no_trace_means_only_actions_supervised() {
        let s = assemble_sample(&step(8, None), &vocab(), 244).unwrap();
        assert_eq!(s.count(Segment::Reasoning), 0);
        assert_eq!(s.labels.iter().filter(|&&l| l != IGNORE).count(), 7);
    }

    #[test]
    fn long_trace_truncated_from_tail() {
        let v = vocab();
        let st = step(8, Some(500));
        let s = assemble_sample(&st, &v, 244).unwrap();
        assert_eq!(s.count(Segment::Reasoning), 244);
        let full = v.encode_text(&render_trace_for_training(st.trace.as_ref().unwrap()));
        let got: Vec<u32> = s.positions(Segment::Reasoning).iter().map(|&p| s.input_ids[p]).collect();
        assert_eq!(got, full[..244]);
    }

    proptest! {
        #[test]
        fn codec_roundtrip(a in prop::array::uniform7(-1.0f64..=1.0), bins in 2usize..64) {
            let v = build_vocabulary(bins, &words(3)).unwrap();
            let back = v.decode_action(&v.encode_action(&ContinuousAction(a)).unwrap()).unwrap();
            for (b, x) in back.0.iter().zip(&a) {
                prop_assert!((b - x).abs() <= 1.0 / bins as f64 + 1e-12);
            }
        }

        #[test]
        fn labels_follow_segments(trace_len in 0usize..300, budget in 0usize..260, size in 6usize..12) {
            let v = vocab();
            let st = step(size, (trace_len > 0).then_some(trace_len));
            let s = assemble_sample(&st, &v, budget).unwrap();
            prop_assert!(s.count(Segment::Reasoning) <= budget);
            for p in 0..s.len() {
                let supervised = s.segments[p].supervised();
                prop_assert_eq!(s.labels[p] != IGNORE, supervised);
                if s.segments[p] == Segment::Action {
                    prop_assert!(v.is_action(s.labels[p] as u32));
                }
                prop_assert_eq!(v.is_action(s.input_ids[p]), s.segments[p] == Segment::Action);
            }
        }
    }
}
