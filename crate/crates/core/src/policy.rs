//! Closed-loop policy backed by the model: greedy reasoning, then seven
//! action tokens each restricted to its own dimension's bins.

use crate::data::{ContinuousAction, Observation, ACTION_DIMS};
use crate::model::{argmax, AttentionRecord, Decoder, Model, ModelError};
use crate::sim::Policy;
use crate::tokenizer::{assemble_prompt, Segment, Vocabulary, EOS_ID};
use crate::Scalar;

/// Everything produced for one observation.
#[derive(Debug, Clone)]
pub struct PolicyStep<T> {
    pub reasoning_ids: Vec<u32>,
    pub action_ids: Vec<u32>,
    pub action: ContinuousAction,
    /// Position of the first action token in the decoded sequence.
    pub first_action_pos: usize,
    pub record: Option<AttentionRecord<T>>,
}

impl<T> PolicyStep<T> {
    pub fn reasoning_text(&self, v: &Vocabulary) -> String {
        v.decode_text(&self.reasoning_ids)
    }
}

/// Decodes one step. Reasoning ends when the unconstrained argmax is EOS or
/// an action token, or after `reasoning_budget` tokens (capped by the
/// model's context).
pub fn decode_step<T: Scalar>(
    model: &Model<T>,
    v: &Vocabulary,
    obs: &Observation,
    reasoning_budget: usize,
    record: bool,
) -> Result<PolicyStep<T>, ModelError> {
    let prompt = assemble_prompt(obs, v);
    let room = model.cfg.max_seq_len.saturating_sub(prompt.len() + ACTION_DIMS);
    let budget = reasoning_budget.min(room);
    let mut dec = Decoder::new(model, &obs.images, record)?;
    let mut logits = dec.push_many(&prompt.input_ids)?;
    let mut segments = prompt.segments.clone();

    let mut reasoning_ids = Vec::new();
    while reasoning_ids.len() < budget {
        let next = argmax(logits.iter().copied()) as u32;
        if next == EOS_ID || v.is_action(next) {
            break;
        }
        reasoning_ids.push(next);
        segments.push(Segment::Reasoning);
        logits = dec.push(next)?;
    }

    let first_action_pos = dec.len();
    let mut action_ids = Vec::with_capacity(ACTION_DIMS);
    for dim in 0..ACTION_DIMS {
        let range = v.dim_range(dim);
        let slice = logits.slice(ndarray::s![range.start as usize..range.end as usize]);
        let id = range.start + argmax(slice.iter().copied()) as u32;
        action_ids.push(id);
        segments.push(Segment::Action);
        if dim + 1 < ACTION_DIMS || record {
            logits = dec.push(id)?;
        }
    }
    let action = v.decode_action(&action_ids).expect("each id lies in its dimension's range");
    Ok(PolicyStep {
        reasoning_ids,
        action_ids,
        action,
        first_action_pos,
        record: if record { dec.record(&segments) } else { None },
    })
}

/// [`Policy`] adapter around [`decode_step`].
pub struct ModelPolicy<'a, T: Scalar> {
    pub model: &'a Model<T>,
    pub vocab: &'a Vocabulary,
    pub reasoning_budget: usize,
    /// Reasoning text of the most recent step.
    pub last_reasoning: Option<String>,
}

impl<'a, T: Scalar> ModelPolicy<'a, T> {
    pub fn new(model: &'a Model<T>, vocab: &'a Vocabulary, reasoning_budget: usize) -> Self {
        ModelPolicy {
            model,
            vocab,
            reasoning_budget,
            last_reasoning: None,
        }
    }
}

impl<T: Scalar> Policy for ModelPolicy<'_, T> {
    fn act(&mut self, observation: &Observation) -> Result<ContinuousAction, String> {
        let step = decode_step(self.model, self.vocab, observation, self.reasoning_budget, false)
            .map_err(|e| e.to_string())?;
        self.last_reasoning = Some(step.reasoning_text(self.vocab));
        Ok(step.action)
    }
}
