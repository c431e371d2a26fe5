//! Teacher text to [`ReasoningTrace`].
//!
//! Accepted shape (tags case-insensitive, optional `#N` prefixes and
//! `**`/`__` wrappers):
//!
//! ```text
//! <Observation>: ...
//! <Situation Analysis>: ...
//! <Spatial Reasoning>: ...
//! <Task Planning>: ...: <logical_steps><1> ... <2> ... <sub_action> ...
//! ```

use std::sync::LazyLock;

use regex::Regex;

use crate::data::ReasoningTrace;

use super::prompt::SECTION_HEADERS;
use super::TeacherError;

static SECTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)(?:#\s*\d+\s*)?[*_]*\s*<\s*(observation|situation\s+analysis|spatial\s+reasoning|task\s+planning|reasoning)\s*>\s*[*_]*\s*:?",
    )
    .expect("valid regex")
});
static LOGICAL_STEPS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*logical[\s_]*steps\s*>").expect("valid regex"));
static SUB_ACTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*sub[\s_]*action\s*>").expect("valid regex"));
static STEP_NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<\s*\d+\s*>").expect("valid regex"));

fn clean(text: &str) -> String {
    let t = text.replace("**", "").replace("__", "");
    let t = t.trim().trim_start_matches(':').trim();
    let t = t.trim_end_matches(':').trim();
    t.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn section_index(name: &str) -> Option<usize> {
    let norm = name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    SECTION_HEADERS.iter().position(|h| h.to_lowercase() == norm)
}

/// Parses teacher text into a trace. The first occurrence of each section tag wins.
pub fn parse_trace(teacher_text: &str) -> Result<ReasoningTrace, TeacherError> {
    let text = teacher_text.replace("\\_", "_");
    let tags: Vec<_> = SECTION
        .captures_iter(&text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            (section_index(&c[1]), m.start(), m.end())
        })
        .collect();

    let mut sections: [Option<String>; 4] = Default::default();
    for (i, (idx, _, end)) in tags.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        if sections[idx].is_some() {
            continue;
        }
        let stop = tags.get(i + 1).map_or(text.len(), |t| t.1);
        sections[idx] = Some(text[*end..stop].to_string());
    }

    let missing: Vec<&str> = SECTION_HEADERS
        .iter()
        .zip(&sections)
        .filter(|(_, s)| s.as_deref().is_none_or(|s| clean(s).is_empty()))
        .map(|(h, _)| *h)
        .collect();
    if !missing.is_empty() {
        return Err(TeacherError::Parse {
            missing: missing.join(", "),
            raw: teacher_text.to_string(),
        });
    }
    let [observation, situation, spatial, planning] = sections.map(Option::unwrap_or_default);

    let (plan_text, rest) = match LOGICAL_STEPS.find(&planning) {
        Some(m) => (&planning[..m.start()], &planning[m.end()..]),
        None => (planning.as_str(), ""),
    };
    let (plan_text, steps_text, sub_action) = match SUB_ACTION.find(rest) {
        Some(m) => (plan_text, &rest[..m.start()], clean(&rest[m.end()..])),
        None => match SUB_ACTION.find(plan_text) {
            Some(m) => (&plan_text[..m.start()], rest, clean(&plan_text[m.end()..])),
            None => (plan_text, rest, String::new()),
        },
    };
    let logical_steps: Vec<String> = STEP_NUMBER
        .split(steps_text)
        .map(clean)
        .filter(|s| !s.is_empty())
        .collect();
    let task_planning = clean(plan_text);
    if task_planning.is_empty() && logical_steps.is_empty() {
        return Err(TeacherError::Parse {
            missing: "Task Planning".into(),
            raw: teacher_text.to_string(),
        });
    }

    Ok(ReasoningTrace {
        observation: clean(&observation),
        situation_analysis: clean(&situation),
        spatial_reasoning: clean(&spatial),
        task_planning,
        logical_steps,
        sub_action,
    })
}

/// Renders a trace in the tagged teacher format accepted by [`parse_trace`].
pub fn render_trace_text(trace: &ReasoningTrace) -> String {
    let mut out = String::from("<Reasoning>\n");
    out.push_str(&format!("<Observation>: {}\n", trace.observation));
    out.push_str(&format!("<Situation Analysis>: {}\n", trace.situation_analysis));
    out.push_str(&format!("<Spatial Reasoning>: {}\n", trace.spatial_reasoning));
    out.push_str(&format!("<Task Planning>: {}:", trace.task_planning));
    if !trace.logical_steps.is_empty() {
        out.push_str(" <logical_steps>");
        for (i, s) in trace.logical_steps.iter().enumerate() {
            out.push_str(&format!("<{}> {s} ", i + 1));
        }
    }
    out.push_str(&format!("<sub_action> {}\n", trace.sub_action));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SPATULA: &str = "**Task Instruction**: Move the spatula to the bottom left side of the table
**<Reasoning>**
**<Observation>**: I observe a toy kitchen setup with a wooden tabletop. On the tabletop, there is a silver pot, a blue cloth, a green and grey spatula, and a yellow toy corn cob.
**<Situation Analysis>**: The scene shows various toy kitchen items on a table. The task is to move the spatula to the bottom left side of the table.
**<Spatial Reasoning>**: The spatula is currently resting on the blue cloth, which is situated in the center-right of the table. The pot is on the left side of the table, and the corn cob is on the right. The \"bottom left side of the table\" is an empty area where the spatula should be moved.
**<Task Planning>**: The robot needs to pick up the spatula and place it in the designated bottom left area of the table:            <logical\\_steps><1> Identify and locate the spatula <2> Move gripper to spatula <3> Grasp the spatula <4> Lift the spatula <5> Move gripper to target <6> Place the spatula <7> Release the spatula <sub\\_action> Move its arm to a position suitable for grasping the spatula.";

    #[test]
    fn parses_spatula_response() {
        let t = parse_trace(SPATULA).unwrap();
        assert_eq!(t.logical_steps.len(), 7);
        assert_eq!(t.logical_steps.last().unwrap(), "Release the spatula");
        assert_eq!(t.logical_steps[0], "Identify and locate the spatula");
        assert_eq!(
            t.sub_action,
            "Move its arm to a position suitable for grasping the spatula."
        );
        assert!(t.observation.starts_with("I observe a toy kitchen"));
        assert!(t.situation_analysis.ends_with("bottom left side of the table."));
        assert!(t.spatial_reasoning.contains("center-right"));
        assert_eq!(
            t.task_planning,
            "The robot needs to pick up the spatula and place it in the designated bottom left area of the table"
        );
    }

    #[test]
    fn observation_only_fails_with_raw() {
        let text = "<Observation>: a table";
        match parse_trace(text) {
            Err(TeacherError::Parse { raw, missing }) => {
                assert_eq!(raw, text);
                assert!(missing.contains("Situation Analysis"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tolerates_numbering_and_case() {
        let text = "#1 <observation>: cup\n#2 <SITUATION ANALYSIS>: idle\n#3 __<Spatial Reasoning>__: cup left\n#4 <task planning>: grab it <LOGICAL_STEPS> <1> reach <2> grab <SUB_ACTION> reach";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.observation, "cup");
        assert_eq!(t.spatial_reasoning, "cup left");
        assert_eq!(t.logical_steps, vec!["reach", "grab"]);
        assert_eq!(t.sub_action, "reach");
    }

    #[test]
    fn empty_text_fails() {
        assert!(parse_trace("").is_err());
    }

    #[test]
    fn render_parse_roundtrip() {
        let t = parse_trace(SPATULA).unwrap();
        let again = parse_trace(&render_trace_text(&t)).unwrap();
        assert_eq!(again, t);
    }
}
