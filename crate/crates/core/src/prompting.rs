//! Stage prompts and their assembly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QUESTION_SLOT: &str = "{question}";
pub const CONCISE_PHRASE: &str = "in one sentence";
pub const STEP_BY_STEP: &str = "Let's think step-by-step.";
pub const ANSWER_DIRECTIVE: &str = "Therefore, the final answer is:";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("caption prompt must contain \"{CONCISE_PHRASE}\"")]
    MissingConcisePhrase,
    #[error("grounding prompt template must contain exactly one {QUESTION_SLOT} slot, found {0}")]
    BadQuestionSlot(usize),
    #[error("context prefix must not be empty")]
    EmptyContextPrefix,
    #[error("task prompt must not be empty")]
    EmptyTaskPrompt,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("caption answer is empty")]
    EmptyCaption,
}

/// Which call of a strategy an assembled prompt belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Overview,
    Localization,
    Observation,
    BaselineDirect,
    ZscotReason,
    ZscotExtract,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Overview => "overview",
            Stage::Localization => "localization",
            Stage::Observation => "observation",
            Stage::BaselineDirect => "baseline_direct",
            Stage::ZscotReason => "zscot_reason",
            Stage::ZscotExtract => "zscot_extract",
        }
    }
}

/// The exact text sent to a backend together with its stage.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub stage: Stage,
    pub text: String,
}

/// Caption, grounding and task prompts plus the caption prefix.
///
/// Deserializing goes through [`PromptSet::new`], so a config file cannot
/// produce a set that violates the invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PromptSetRepr")]
pub struct PromptSet {
    caption_prompt: String,
    grounding_prompt_template: String,
    task_prompt: String,
    context_prefix: String,
}

#[derive(Deserialize)]
#[serde(default)]
struct PromptSetRepr {
    caption_prompt: String,
    grounding_prompt_template: String,
    task_prompt: String,
    context_prefix: String,
}

impl Default for PromptSetRepr {
    fn default() -> Self {
        Self {
            caption_prompt: PromptSet::DEFAULT_CAPTION.into(),
            grounding_prompt_template: PromptSet::DEFAULT_GROUNDING.into(),
            task_prompt: PromptSet::DEFAULT_TASK.into(),
            context_prefix: PromptSet::DEFAULT_CONTEXT_PREFIX.into(),
        }
    }
}

impl TryFrom<PromptSetRepr> for PromptSet {
    type Error = PromptError;

    fn try_from(r: PromptSetRepr) -> Result<Self, Self::Error> {
        PromptSet::new(
            r.caption_prompt,
            r.grounding_prompt_template,
            r.task_prompt,
            r.context_prefix,
        )
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::new(
            Self::DEFAULT_CAPTION,
            Self::DEFAULT_GROUNDING,
            Self::DEFAULT_TASK,
            Self::DEFAULT_CONTEXT_PREFIX,
        )
        .expect("default prompts are valid")
    }
}

impl PromptSet {
    pub const DEFAULT_CAPTION: &'static str = "Describe this image in one sentence.";
    pub const DEFAULT_GROUNDING: &'static str = "Provide the bounding box coordinate of the region that can answer the following question: {question}";
    pub const DEFAULT_TASK: &'static str = "Answer the question using the context above and the image.";
    pub const DEFAULT_CONTEXT_PREFIX: &'static str = "This is the context of the scene:";

    pub fn new(
        caption_prompt: impl Into<String>,
        grounding_prompt_template: impl Into<String>,
        task_prompt: impl Into<String>,
        context_prefix: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let set = Self {
            caption_prompt: caption_prompt.into(),
            grounding_prompt_template: grounding_prompt_template.into(),
            task_prompt: task_prompt.into(),
            context_prefix: context_prefix.into(),
        };
        if !set.caption_prompt.contains(CONCISE_PHRASE) {
            return Err(PromptError::MissingConcisePhrase);
        }
        let slots = set.grounding_prompt_template.matches(QUESTION_SLOT).count();
        if slots != 1 {
            return Err(PromptError::BadQuestionSlot(slots));
        }
        if set.context_prefix.trim().is_empty() {
            return Err(PromptError::EmptyContextPrefix);
        }
        if set.task_prompt.trim().is_empty() {
            return Err(PromptError::EmptyTaskPrompt);
        }
        Ok(set)
    }

    pub fn caption_prompt(&self) -> &str {
        &self.caption_prompt
    }

    pub fn grounding_prompt_template(&self) -> &str {
        &self.grounding_prompt_template
    }

    pub fn task_prompt(&self) -> &str {
        &self.task_prompt
    }

    pub fn context_prefix(&self) -> &str {
        &self.context_prefix
    }
}

fn non_empty_question(question: &str) -> Result<&str, PromptError> {
    let q = question.trim();
    if q.is_empty() {
        Err(PromptError::EmptyQuestion)
    } else {
        Ok(q)
    }
}

/// Stage 1: the caption prompt, verbatim.
pub fn assemble_overview(prompts: &PromptSet) -> AssembledPrompt {
    AssembledPrompt {
        stage: Stage::Overview,
        text: prompts.caption_prompt.clone(),
    }
}

/// Stage 2: the grounding template with the question substituted.
pub fn assemble_localization(prompts: &PromptSet, question: &str) -> Result<AssembledPrompt, PromptError> {
    let q = non_empty_question(question)?;
    // `replacen` does not rescan the inserted text, so braces in the
    // question survive untouched.
    let text = prompts.grounding_prompt_template.replacen(QUESTION_SLOT, q, 1);
    Ok(AssembledPrompt {
        stage: Stage::Localization,
        text,
    })
}

/// Stage 3: `prefix + " " + caption`, then the task prompt, then the
/// question, one per line.
pub fn assemble_observation(
    prompts: &PromptSet,
    caption_answer: &str,
    question: &str,
) -> Result<AssembledPrompt, PromptError> {
    let q = non_empty_question(question)?;
    let caption = caption_answer.trim();
    if caption.is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    let text = format!(
        "{} {}\n{}\n{}",
        prompts.context_prefix.trim(),
        caption,
        prompts.task_prompt.trim(),
        q
    );
    Ok(AssembledPrompt {
        stage: Stage::Observation,
        text,
    })
}

/// The bare question, as used by the direct baseline and by stage 3 when
/// the caption is disabled.
pub fn assemble_direct(question: &str) -> Result<AssembledPrompt, PromptError> {
    let q = non_empty_question(question)?;
    Ok(AssembledPrompt {
        stage: Stage::BaselineDirect,
        text: q.to_string(),
    })
}

/// Reasoning turn of zero-shot chain of thought.
pub fn assemble_zscot_reason(question: &str) -> Result<AssembledPrompt, PromptError> {
    let q = non_empty_question(question)?;
    Ok(AssembledPrompt {
        stage: Stage::ZscotReason,
        text: format!("{q}\n{STEP_BY_STEP}"),
    })
}

/// Answer-extraction turn: the reasoning is fed back verbatim.
pub fn assemble_zscot_extract(question: &str, reasoning: &str) -> Result<AssembledPrompt, PromptError> {
    let q = non_empty_question(question)?;
    Ok(AssembledPrompt {
        stage: Stage::ZscotExtract,
        text: format!("{q}\n{STEP_BY_STEP}\n{reasoning}\n{ANSWER_DIRECTIVE}"),
    })
}

/// Append grounded coordinates to a stage-3 prompt, for the ablation that
/// grounds without cropping.
pub fn with_region_hint(mut prompt: AssembledPrompt, region: &crate::geometry::PixelBox) -> AssembledPrompt {
    prompt.text = format!(
        "{}\nThe answer is located in the region {} (pixel coordinates x1, y1, x2, y2).",
        prompt.text, region
    );
    prompt
}

#[cfg(test)]
mod tests {
    use super::*;

    fn custom(template: &str) -> PromptSet {
        PromptSet::new(
            PromptSet::DEFAULT_CAPTION,
            template,
            PromptSet::DEFAULT_TASK,
            PromptSet::DEFAULT_CONTEXT_PREFIX,
        )
        .unwrap()
    }

    #[test]
    fn overview_is_caption_prompt() {
        let p = assemble_overview(&PromptSet::default());
        assert_eq!(p.stage, Stage::Overview);
        assert!(p.text.contains("in one sentence"));

        let set = PromptSet::new(
            "Summarize the scene in one sentence, please.",
            PromptSet::DEFAULT_GROUNDING,
            PromptSet::DEFAULT_TASK,
            PromptSet::DEFAULT_CONTEXT_PREFIX,
        )
        .unwrap();
        assert_eq!(
            assemble_overview(&set).text,
            "Summarize the scene in one sentence, please."
        );
    }

    #[test]
    fn caption_prompt_must_be_concise() {
        let err = PromptSet::new(
            "Describe this image.",
            PromptSet::DEFAULT_GROUNDING,
            PromptSet::DEFAULT_TASK,
            PromptSet::DEFAULT_CONTEXT_PREFIX,
        );
        assert_eq!(err, Err(PromptError::MissingConcisePhrase));
    }

    #[test]
    fn grounding_template_needs_one_slot() {
        let mk = |t: &str| {
            PromptSet::new(
                PromptSet::DEFAULT_CAPTION,
                t,
                PromptSet::DEFAULT_TASK,
                PromptSet::DEFAULT_CONTEXT_PREFIX,
            )
        };
        assert_eq!(mk("Where?"), Err(PromptError::BadQuestionSlot(0)));
        assert_eq!(
            mk("{question} and {question}"),
            Err(PromptError::BadQuestionSlot(2))
        );
    }

    #[test]
    fn localization_substitution() {
        let set = custom("Locate the region answering: {question}");
        let p = assemble_localization(&set, "What is the plate number?").unwrap();
        assert_eq!(p.text, "Locate the region answering: What is the plate number?");
        assert_eq!(p.stage, Stage::Localization);

        let p = assemble_localization(&set, "What is in {} or {question}?").unwrap();
        assert_eq!(p.text, "Locate the region answering: What is in {} or {question}?");

        assert_eq!(
            assemble_localization(&set, "  "),
            Err(PromptError::EmptyQuestion)
        );
    }

    #[test]
    fn observation_composition() {
        let set = PromptSet::default();
        let p = assemble_observation(&set, "A busy street with shops.", "What does the sign say?")
            .unwrap();
        assert_eq!(
            p.text,
            format!(
                "This is the context of the scene: A busy street with shops.\n{}\nWhat does the sign say?",
                PromptSet::DEFAULT_TASK
            )
        );
        let trimmed = assemble_observation(&set, "A busy street with shops.  \n", "What does the sign say?")
            .unwrap();
        assert_eq!(trimmed, p);
        assert_eq!(
            assemble_observation(&set, " ", "Q?"),
            Err(PromptError::EmptyCaption)
        );
        assert_eq!(
            assemble_observation(&set, "cap", ""),
            Err(PromptError::EmptyQuestion)
        );
    }

    #[test]
    fn prompt_set_from_partial_toml() {
        let set: PromptSet = toml::from_str("task_prompt = \"Answer briefly.\"").unwrap();
        assert_eq!(set.task_prompt(), "Answer briefly.");
        assert_eq!(set.caption_prompt(), PromptSet::DEFAULT_CAPTION);
        let bad: Result<PromptSet, _> = toml::from_str("caption_prompt = \"Describe.\"");
        assert!(bad.is_err());
    }

    #[test]
    fn zscot_prompts() {
        let r = assemble_zscot_reason("Q?").unwrap();
        assert_eq!(r.text, "Q?\nLet's think step-by-step.");
        let e = assemble_zscot_extract("Q?", "because X").unwrap();
        assert!(e.text.contains("\nbecause X\n"));
        assert_eq!(e.stage, Stage::ZscotExtract);
    }
}
