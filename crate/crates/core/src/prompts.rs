//! Elicitation prompt templates and dialogue assembly.
//!
//! Template wording is part of the measurement: confidence keywords, clause
//! order, and even the original typos ("ceratin", "sequnce", "Following",
//! "Your judgement") are preserved byte-for-byte, with LaTeX-style ``…''
//! quotes normalized to ASCII `"`. The catalog also ships as
//! `prompts.toml` next to this crate's manifest so the exact wording can be
//! audited without reading source code.

use crate::data::Variant;
use crate::gateway::{ChatMessage, Role};

/// Single-step: answer and confidence in one turn.
pub const SINGLE_VANILLA: &str = "Answer the question based on your internal knowledge and the image. If you are sure the answer is accurate and correct, please say \"certain\" after the answer. If you are not confident with the answer, please say \"uncertain\".\nQuestion: [Question]\nAnswer:";

/// Single-step with step-by-step reasoning.
pub const SINGLE_COT: &str = "Answer the question based on your internal knowledge and the image. Analyse step by step. If you are sure the answer is accurate and correct, please say \"certain\" after the answer. If you are not confident with the answer, please say \"uncertain\".\nQuestion: [Question]\nAnswer:";

/// Single-step with an image description before reasoning.
pub const SINGLE_IMG_COT: &str = "Answer the question based on your internal knowledge and the image. First, describe the image, then analyse step by step. If you are sure the answer is accurate and correct, please say \"certain\" after the answer. If you are not confident with the answer, please say \"uncertain\".\nQuestion: [Question]\nAnswer:";

/// Single-step with an overconfidence penalty clause.
pub const SINGLE_PUNISH: &str = "Answer the question based on your internal knowledge and the image. If you are sure the answer is accurate and correct, please say \"certain\" after the answer. If you are not confident with the answer, please say \"uncertain\". You will be punished if the answer is not right but you say \"certain\".\nQuestion: [Question]\nAnswer:";

/// Single-step asking for an explanation alongside the answer.
pub const SINGLE_EXPLAIN: &str = "Answer the question based on your internal knowledge and the image, explain why you give this answer. If you are sure the answer is accurate and correct, please say \"certain\" after the answer. If you are not confident with the answer, please say \"uncertain\".\nQuestion: [Question]\nAnswer:";

/// First turn of every double-step dialogue (and the plain answer prompt for
/// perplexity and consistency sampling, which have no dedicated template).
pub const DOUBLE_FIRST_ROUND: &str = "Answer the question based on your internal knowledge and the image.\nQuestion: [Question]\nAnswer:";

/// Second turn: plain self-judgement.
pub const DOUBLE_SELF_JUDGING: &str = "If you are sure your previous answer is accurate and correct, please say \"certain\", If you are not confident with the answer, please say \"uncertain\".";

/// Second turn: self-judgement with step-by-step reasoning.
pub const DOUBLE_COT: &str = "If you are sure your previous answer is accurate and correct, please say \"certain\", If you are not confident with the answer, please say \"uncertain\". Analyse step by step, then provide Your judgement.";

/// Second turn: challenge the first answer ("ceratin" typo preserved).
pub const DOUBLE_CHALLENGE: &str = "I don't think your answer is right, if you still think your answer is right, please say \"ceratin\". Otherwise, say \"uncertain\".";

/// Second turn: self-judgement with the penalty clause.
pub const DOUBLE_PUNISH: &str = "If you are sure your previous answer is accurate and correct, please say \"certain\", If you are not confident with the answer, please say \"uncertain\". You will be punished if the answer is not right but you say \"certain\".";

/// Second turn: ask for a correctness probability instead of a keyword.
pub const DOUBLE_PROB_THR: &str = "Provide the probability that your answer is correct (0.0 to 1.0). Give ONLY the probability, no other words or explanation.";

/// Request for semantically equivalent question paraphrases.
pub const REPHRASE_REQUEST: &str = "Based on the Following question, generate [number of semantical equivalent questions] semantically equivalent questions. your output should be a list of strings and add a sequnce number with a dot at the start of each output question, like [1.\"question1\",2.\"question2\",...].\nQuestion: [The original question]\nSemantically equivalent questions:";

/// Yes/no semantic-equivalence judgement between two answers.
pub const EQUIVALENCE_JUDGE: &str = "Question: <q>\nAnswer A: <ref>\nAnswer B: <cand>\nDo A and B convey the same answer to the question? Reply only yes or no.";

/// Every template with its catalog name, in catalog order.
pub const ALL_TEMPLATES: [(&str, &str); 13] = [
    ("single_vanilla", SINGLE_VANILLA),
    ("single_cot", SINGLE_COT),
    ("single_img_cot", SINGLE_IMG_COT),
    ("single_punish", SINGLE_PUNISH),
    ("single_explain", SINGLE_EXPLAIN),
    ("double_first_round", DOUBLE_FIRST_ROUND),
    ("double_self_judging", DOUBLE_SELF_JUDGING),
    ("double_cot", DOUBLE_COT),
    ("double_challenge", DOUBLE_CHALLENGE),
    ("double_punish", DOUBLE_PUNISH),
    ("double_prob_thr", DOUBLE_PROB_THR),
    ("rephrase_request", REPHRASE_REQUEST),
    ("equivalence_judge", EQUIVALENCE_JUDGE),
];

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("variant {0:?} has no single-step template")]
    NotSingleStep(Variant),
    #[error("variant {0:?} has no second-round template")]
    NotDoubleStep(Variant),
    #[error("rephrase count must be at least 1, got {0}")]
    BadRephraseCount(usize),
}

/// The single-step template for `variant`, unrendered.
pub fn single_template(variant: Variant) -> Result<&'static str, PromptError> {
    match variant {
        Variant::Vanilla => Ok(SINGLE_VANILLA),
        Variant::Cot => Ok(SINGLE_COT),
        Variant::ImgCot => Ok(SINGLE_IMG_COT),
        Variant::Punish => Ok(SINGLE_PUNISH),
        Variant::Explain => Ok(SINGLE_EXPLAIN),
        other => Err(PromptError::NotSingleStep(other)),
    }
}

/// The second-round template for `variant`, unrendered.
pub fn second_round_template(variant: Variant) -> Result<&'static str, PromptError> {
    match variant {
        Variant::SelfJud => Ok(DOUBLE_SELF_JUDGING),
        Variant::Cot => Ok(DOUBLE_COT),
        Variant::Challenge => Ok(DOUBLE_CHALLENGE),
        Variant::Punish => Ok(DOUBLE_PUNISH),
        Variant::ProbThr => Ok(DOUBLE_PROB_THR),
        other => Err(PromptError::NotDoubleStep(other)),
    }
}

/// One user turn asking for answer plus confidence in a single interaction.
/// The caller attaches any image to the returned message.
pub fn render_single(variant: Variant, question: &str) -> Result<Vec<ChatMessage>, PromptError> {
    let template = single_template(variant)?;
    Ok(vec![ChatMessage::text(
        Role::User,
        template.replace("[Question]", question),
    )])
}

/// The three-message double-step dialogue: first-round question, the model's
/// first answer, then the variant's confidence request.
pub fn render_double(
    variant: Variant,
    question: &str,
    first_answer: &str,
) -> Result<Vec<ChatMessage>, PromptError> {
    let second = second_round_template(variant)?;
    Ok(vec![
        ChatMessage::text(Role::User, DOUBLE_FIRST_ROUND.replace("[Question]", question)),
        ChatMessage::text(Role::Assistant, first_answer.to_string()),
        ChatMessage::text(Role::User, second.to_string()),
    ])
}

/// The plain first-round answer request as a standalone turn (used for
/// perplexity and for consistency sampling).
pub fn render_first_round(question: &str) -> Vec<ChatMessage> {
    vec![ChatMessage::text(
        Role::User,
        DOUBLE_FIRST_ROUND.replace("[Question]", question),
    )]
}

/// Asks for `n` semantically equivalent rephrasings of `question`.
pub fn render_rephrase_request(question: &str, n: usize) -> Result<Vec<ChatMessage>, PromptError> {
    if n < 1 {
        return Err(PromptError::BadRephraseCount(n));
    }
    let text = REPHRASE_REQUEST
        .replace("[number of semantical equivalent questions]", &n.to_string())
        .replace("[The original question]", question);
    Ok(vec![ChatMessage::text(Role::User, text)])
}

/// Asks the judge model whether two answers convey the same answer.
pub fn render_equivalence_judge(
    question: &str,
    reference: &str,
    candidate: &str,
) -> Vec<ChatMessage> {
    let text = EQUIVALENCE_JUDGE
        .replace("<q>", question)
        .replace("<ref>", reference)
        .replace("<cand>", candidate);
    vec![ChatMessage::text(Role::User, text)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rendering_substitutes_the_question() {
        let messages = render_single(Variant::Vanilla, "Q?").unwrap();
        assert_eq!(messages.len(), 1);
        assert!(messages[0]
            .text
            .contains("If you are sure the answer is accurate and correct, please say \"certain\""));
        assert!(messages[0].text.contains("Question: Q?"));
        assert!(messages[0].text.ends_with("Answer:"));
        assert!(!messages[0].text.contains("[Question]"));
    }

    #[test]
    fn img_cot_contains_the_describe_clause() {
        let messages = render_single(Variant::ImgCot, "Q?").unwrap();
        assert!(messages[0]
            .text
            .contains("First, describe the image, then analyse step by step"));
    }

    #[test]
    fn empty_question_is_allowed_in_the_slot() {
        let messages = render_single(Variant::Cot, "").unwrap();
        assert!(messages[0].text.contains("Question: \nAnswer:"));
    }

    #[test]
    fn double_rendering_builds_three_turns() {
        let messages = render_double(Variant::Challenge, "Q?", "A.").unwrap();
        assert_eq!(messages.len(), 3);
        assert_eq!(messages[0].role, Role::User);
        assert_eq!(messages[1].role, Role::Assistant);
        assert_eq!(messages[1].text, "A.");
        assert_eq!(messages[2].role, Role::User);
        assert!(messages[2].text.starts_with("I don't think your answer is right"));
    }

    #[test]
    fn prob_thr_second_turn_asks_for_a_probability() {
        let messages = render_double(Variant::ProbThr, "Q?", "A.").unwrap();
        assert!(messages[2]
            .text
            .contains("Provide the probability that your answer is correct (0.0 to 1.0)"));
    }

    #[test]
    fn self_jud_second_turn_includes_the_keyword_request() {
        let messages = render_double(Variant::SelfJud, "Q?", "A.").unwrap();
        assert!(messages[2].text.contains("please say \"certain\""));
    }

    #[test]
    fn rephrase_request_substitutes_count_and_question() {
        let messages = render_rephrase_request("Q?", 10).unwrap();
        assert!(messages[0].text.contains("generate 10 semantically equivalent questions"));
        assert!(messages[0].text.contains("Question: Q?"));
        assert!(messages[0].text.contains("like [1.\"question1\",2.\"question2\",...]"));
        let one = render_rephrase_request("Q?", 1).unwrap();
        assert!(one[0].text.contains("generate 1 semantically equivalent"));
        assert!(render_rephrase_request("Q?", 0).is_err());
    }

    #[test]
    fn wrong_family_variants_are_rejected() {
        assert!(render_single(Variant::SelfJud, "Q?").is_err());
        assert!(render_double(Variant::Vanilla, "Q?", "A.").is_err());
    }

    // Rendering with the placeholder text itself must reproduce the stored
    // template byte-for-byte (rendering replaces exactly the placeholder).
    #[test]
    fn rendering_placeholder_recovers_template() {
        for variant in [Variant::Vanilla, Variant::Cot, Variant::ImgCot, Variant::Punish, Variant::Explain] {
            let messages = render_single(variant, "[Question]").unwrap();
            assert_eq!(messages[0].text, single_template(variant).unwrap());
        }
        let messages = render_first_round("[Question]");
        assert_eq!(messages[0].text, DOUBLE_FIRST_ROUND);
    }

    // The shipped TOML catalog and the in-code constants stay in lockstep.
    #[test]
    fn toml_catalog_matches_constants() {
        let catalog: toml::Value = include_str!("../prompts.toml").parse().unwrap();
        let lookup = |section: &str, key: &str| -> String {
            catalog[section][key].as_str().unwrap().to_string()
        };
        assert_eq!(lookup("single_step", "vanilla"), SINGLE_VANILLA);
        assert_eq!(lookup("single_step", "cot"), SINGLE_COT);
        assert_eq!(lookup("single_step", "img_cot"), SINGLE_IMG_COT);
        assert_eq!(lookup("single_step", "punish"), SINGLE_PUNISH);
        assert_eq!(lookup("single_step", "explain"), SINGLE_EXPLAIN);
        assert_eq!(lookup("double_step", "first_round"), DOUBLE_FIRST_ROUND);
        assert_eq!(lookup("double_step", "self_judging"), DOUBLE_SELF_JUDGING);
        assert_eq!(lookup("double_step", "cot"), DOUBLE_COT);
        assert_eq!(lookup("double_step", "challenge"), DOUBLE_CHALLENGE);
        assert_eq!(lookup("double_step", "punish"), DOUBLE_PUNISH);
        assert_eq!(lookup("double_step", "probability_threshold"), DOUBLE_PROB_THR);
        assert_eq!(lookup("consistency", "rephrasing"), REPHRASE_REQUEST);
        assert_eq!(lookup("judging", "equivalence"), EQUIVALENCE_JUDGE);
    }
}
