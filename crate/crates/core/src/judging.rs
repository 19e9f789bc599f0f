//! Answer grading and semantic equivalence.
//!
//! Three interchangeable strategies: `exact` (literal string equality),
//! `normalized` (the default: normalize, then containment), and `llm` (ask a
//! judge model a yes/no equivalence question). Each is used in two places —
//! grading an answer against gold answers, and deciding whether a sampled
//! answer agrees with the reference answer when scoring answer consistency.

use std::sync::Arc;

use crate::gateway::{Gateway, GatewayError, SamplingParams};
use crate::prompts::render_equivalence_judge;

/// Maximum reply length for yes/no judgements.
const JUDGE_MAX_TOKENS: u32 = 16;

/// Canonical answer form: lowercase, alphanumeric and whitespace only,
/// standalone articles removed, whitespace collapsed.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let filtered: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    filtered
        .split_whitespace()
        .filter(|token| !matches!(*token, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whether `candidate` matches `reference` under the normalized strategy:
/// after normalization, the candidate must equal or contain the reference.
/// Containment is one-directional on purpose — a verbose candidate ("The
/// capital is Paris.") matches the short reference ("Paris"), not vice
/// versa. Empty candidates match nothing; answers that normalize to nothing
/// (articles/punctuation only) fall back to literal equality.
pub fn answers_match(candidate: &str, reference: &str) -> bool {
    if candidate.is_empty() || reference.is_empty() {
        return false;
    }
    let cand = normalize_answer(candidate);
    let reference_norm = normalize_answer(reference);
    if cand.is_empty() || reference_norm.is_empty() {
        return candidate == reference;
    }
    cand.contains(&reference_norm)
}

/// Normalized-strategy grade: does `answer` match any gold answer?
pub fn grade_answer(answer: &str, golds: &[String]) -> bool {
    golds.iter().any(|gold| answers_match(answer, gold))
}

/// Reads a yes/no verdict from the first token of a judge reply.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let first = reply.split_whitespace().next()?;
    let trimmed: String = first
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match trimmed.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeStrategy {
    /// Literal string equality.
    Exact,
    /// Containment after normalization (default).
    #[default]
    Normalized,
    /// Model-backed yes/no equivalence judgement.
    Llm,
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("model-backed judging requested but no judge endpoint configured")]
    MissingGateway,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("judge reply did not start with yes or no (after one retry): {reply:?}")]
    Unparseable { reply: String },
}

/// A grading/equivalence judge with a fixed strategy.
pub struct Judge {
    strategy: JudgeStrategy,
    gateway: Option<Arc<Gateway>>,
    seed: i64,
}

impl Judge {
    pub fn exact() -> Self {
        Judge {
            strategy: JudgeStrategy::Exact,
            gateway: None,
            seed: 0,
        }
    }

    pub fn normalized() -> Self {
        Judge {
            strategy: JudgeStrategy::Normalized,
            gateway: None,
            seed: 0,
        }
    }

    pub fn llm(gateway: Arc<Gateway>, seed: i64) -> Self {
        Judge {
            strategy: JudgeStrategy::Llm,
            gateway: Some(gateway),
            seed,
        }
    }

    pub fn new(
        strategy: JudgeStrategy,
        gateway: Option<Arc<Gateway>>,
        seed: i64,
    ) -> Result<Self, JudgeError> {
        if strategy == JudgeStrategy::Llm && gateway.is_none() {
            return Err(JudgeError::MissingGateway);
        }
        Ok(Judge {
            strategy,
            gateway,
            seed,
        })
    }

    pub fn strategy(&self) -> JudgeStrategy {
        self.strategy
    }

    /// Whether `candidate` conveys the same answer to `question` as
    /// `reference`. An empty candidate is never equivalent (and is not an
    /// error).
    pub async fn equivalent(
        &self,
        question: &str,
        reference: &str,
        candidate: &str,
    ) -> Result<bool, JudgeError> {
        if candidate.is_empty() || reference.is_empty() {
            return Ok(false);
        }
        match self.strategy {
            JudgeStrategy::Exact => Ok(candidate == reference),
            JudgeStrategy::Normalized => Ok(answers_match(candidate, reference)),
            JudgeStrategy::Llm => self.ask_equivalence(question, reference, candidate).await,
        }
    }

    /// Whether `answer` is a correct answer to `question` given the gold
    /// answers (logical OR across golds).
    pub async fn grade(
        &self,
        question: &str,
        answer: &str,
        golds: &[String],
    ) -> Result<bool, JudgeError> {
        match self.strategy {
            JudgeStrategy::Exact => Ok(golds.iter().any(|gold| answer == gold)),
            JudgeStrategy::Normalized => Ok(grade_answer(answer, golds)),
            JudgeStrategy::Llm => {
                for gold in golds {
                    if self.ask_equivalence(question, gold, answer).await? {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
        }
    }

    /// One greedy yes/no query; an unparseable reply is retried once at the
    /// next sample index before giving up.
    async fn ask_equivalence(
        &self,
        question: &str,
        reference: &str,
        candidate: &str,
    ) -> Result<bool, JudgeError> {
        let gateway = self.gateway.as_ref().ok_or(JudgeError::MissingGateway)?;
        let messages = render_equivalence_judge(question, reference, candidate);
        let params = SamplingParams::greedy(JUDGE_MAX_TOKENS, self.seed);
        let first = gateway.complete(&messages, params, false).await?;
        if let Some(verdict) = parse_yes_no(&first.response_text) {
            return Ok(verdict);
        }
        log::warn!(
            "judge reply {:?} is not yes/no; retrying once",
            first.response_text
        );
        let retry = gateway
            .complete_indexed(&messages, params, false, Some(1))
            .await?;
        parse_yes_no(&retry.response_text).ok_or(JudgeError::Unparseable {
            reply: retry.response_text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{EndpointSpec, MockScript};
    use tokio::sync::Semaphore;

    #[test]
    fn normalization_lowercases_strips_punctuation_and_articles() {
        assert_eq!(normalize_answer("The Capital is Paris."), "capital is paris");
        assert_eq!(normalize_answer("A dog, an apple, the end"), "dog apple end");
        assert_eq!(normalize_answer("  many \t spaces  "), "many spaces");
        assert_eq!(normalize_answer("it's"), "its");
        assert_eq!(normalize_answer("THE"), "");
        assert_eq!(normalize_answer("42!"), "42");
    }

    #[test]
    fn matching_is_containment_of_the_reference() {
        assert!(answers_match("The capital is Paris.", "Paris"));
        assert!(answers_match("paris", "Paris"));
        assert!(answers_match("It is Paris", "Paris"));
        assert!(answers_match("It's the Eiffel Tower!", "eiffel tower"));
        // The reference is longer than the candidate: no match.
        assert!(!answers_match("Paris", "Paris, France"));
        assert!(!answers_match("", "Paris"));
        assert!(!answers_match("Paris", ""));
        assert!(!answers_match("London", "Paris"));
    }

    #[test]
    fn substring_matches_cross_word_boundaries() {
        // Normalized containment is plain substring containment, so "art"
        // inside "part" counts; gold answers are expected to be standalone
        // phrases where this is the desired generosity.
        assert!(answers_match("apart", "part"));
    }

    #[test]
    fn degenerate_answers_fall_back_to_literal_equality() {
        // "the" normalizes to nothing; only the literal string matches it.
        assert!(answers_match("the", "the"));
        assert!(!answers_match("an", "the"));
        assert!(!answers_match("The capital", "the"));
    }

    #[test]
    fn grading_ors_across_gold_answers() {
        let golds = vec!["Paris".to_string(), "City of Light".to_string()];
        assert!(grade_answer("the city of light", &golds));
        assert!(grade_answer("Paris.", &golds));
        assert!(!grade_answer("Lyon", &golds));
        assert!(!grade_answer("anything", &[]));
    }

    #[tokio::test]
    async fn exact_strategy_is_literal_equality() {
        let judge = Judge::exact();
        assert!(judge.grade("Q?", "0", &["0".into(), "zero".into()]).await.unwrap());
        assert!(!judge.grade("Q?", "Paris.", &["Paris".into()]).await.unwrap());
        assert!(judge.equivalent("Q?", "Paris", "Paris").await.unwrap());
        assert!(!judge.equivalent("Q?", "Paris", "paris").await.unwrap());
    }

    #[tokio::test]
    async fn exact_match_implies_normalized_match() {
        // Whenever exact says true, normalized must too.
        for (cand, reference) in [("Paris", "Paris"), ("two words", "two words"), ("the", "the")] {
            assert!(Judge::exact().equivalent("q", reference, cand).await.unwrap());
            assert!(Judge::normalized().equivalent("q", reference, cand).await.unwrap());
        }
    }

    #[tokio::test]
    async fn self_equivalence_holds_for_non_empty_answers() {
        for text in ["Paris", "42", "The Eiffel Tower!", "the"] {
            assert!(Judge::exact().equivalent("q", text, text).await.unwrap());
            assert!(Judge::normalized().equivalent("q", text, text).await.unwrap());
        }
        // Empty candidate is false, not an error.
        assert!(!Judge::normalized().equivalent("q", "", "").await.unwrap());
    }

    #[test]
    fn yes_no_parsing_reads_only_the_first_token() {
        assert_eq!(parse_yes_no("yes"), Some(true));
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("  YES, they match"), Some(true));
        assert_eq!(parse_yes_no("No"), Some(false));
        assert_eq!(parse_yes_no("no, different"), Some(false));
        assert_eq!(parse_yes_no("The answer is yes"), None);
        assert_eq!(parse_yes_no(""), None);
        assert_eq!(parse_yes_no("maybe"), None);
    }

    #[test]
    fn llm_strategy_requires_a_gateway() {
        assert!(matches!(
            Judge::new(JudgeStrategy::Llm, None, 0),
            Err(JudgeError::MissingGateway)
        ));
        assert!(Judge::new(JudgeStrategy::Normalized, None, 0).is_ok());
    }

    fn mock_judge(script_toml: &str) -> (Judge, tempfile::TempDir) {
        let script: MockScript = toml::from_str(script_toml).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::with_mock_script(
            EndpointSpec::mock("judge", "judge-model", "inline"),
            script,
            dir.path(),
            Arc::new(Semaphore::new(4)),
        )
        .unwrap();
        (Judge::llm(Arc::new(gateway), 0), dir)
    }

    #[tokio::test]
    async fn llm_judge_reads_yes_and_no_verdicts() {
        let (judge, _dir) = mock_judge(
            r#"
            fallback_answer = "no"

            [[rules]]
            match = "Answer B: The capital is Paris."
            answers = [{ text = "Yes." }]
            "#,
        );
        assert!(judge
            .equivalent("What is the capital?", "Paris", "The capital is Paris.")
            .await
            .unwrap());
        assert!(!judge
            .equivalent("What is the capital?", "Paris", "Lyon")
            .await
            .unwrap());
    }

    #[tokio::test]
    async fn llm_grading_ors_across_golds() {
        let (judge, _dir) = mock_judge(
            r#"
            fallback_answer = "no"

            [[rules]]
            match = "Answer A: City of Light"
            answers = [{ text = "yes" }]
            "#,
        );
        let golds = vec!["Paris".to_string(), "City of Light".to_string()];
        assert!(judge.grade("Q?", "the luminous city", &golds).await.unwrap());
        let golds_without = vec!["Paris".to_string()];
        assert!(!judge.grade("Q?", "the luminous city", &golds_without).await.unwrap());
    }

    #[tokio::test]
    async fn unparseable_judge_reply_errors_after_one_retry() {
        let (judge, _dir) = mock_judge(
            r#"
            fallback_answer = "I cannot decide that."
            "#,
        );
        let err = judge.equivalent("Q?", "a", "b").await.unwrap_err();
        assert!(matches!(err, JudgeError::Unparseable { .. }));
    }
}
