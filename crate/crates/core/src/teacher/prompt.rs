use super::TeacherError;

/// Section headers in the order the teacher must answer them.
pub const SECTION_HEADERS: [&str; 4] = [
    "Observation",
    "Situation Analysis",
    "Spatial Reasoning",
    "Task Planning",
];

const PREAMBLE: &str = "You are a robot. Given the images from different angles and instructions, \
observe the scene and reason step-by-step about what you see, what each object is, \
and what actions might be possible.";

const QUESTIONS: [&str; 4] = [
    "What do you see in the image?",
    "What is happening in the scene, and what is the task?",
    "How are the objects arranged, and what spatial relationships matter for completing the task?",
    "What are the logical steps to achieve the task, and what should be the robot's next action?",
];

/// Structured reasoning prompt with the instruction substituted verbatim.
pub fn build_prompt(instruction: &str) -> Result<String, TeacherError> {
    if instruction.trim().is_empty() {
        return Err(TeacherError::EmptyInstruction);
    }
    let mut prompt = format!("{PREAMBLE}\nInstruction: {instruction}\nNow think carefully and describe:\n");
    for (i, (header, question)) in SECTION_HEADERS.iter().zip(QUESTIONS).enumerate() {
        prompt.push_str(&format!("#{} <{header}>: {question}\n", i + 1));
    }
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatula_prompt() {
        let instr = "Move the spatula to the bottom left side of the table";
        let p = build_prompt(instr).unwrap();
        assert!(p.contains(instr));
        for (i, h) in SECTION_HEADERS.iter().enumerate() {
            assert!(p.contains(&format!("#{} <{h}>:", i + 1)), "{h}");
        }
        assert_eq!(p, build_prompt(instr).unwrap());
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(matches!(build_prompt(""), Err(TeacherError::EmptyInstruction)));
        assert!(matches!(build_prompt("  "), Err(TeacherError::EmptyInstruction)));
    }
}
