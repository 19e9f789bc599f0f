//! Confidence elicitation: every method family, from prompt to signal.
//!
//! Verbalized methods read a "certain"/"uncertain" keyword (single- or
//! double-step dialogues), the probabilistic method computes answer
//! perplexity from token log-probabilities, and consistency methods compare
//! a greedy reference answer against temperature samples under input
//! perturbations (or against other models). Binary methods yield a verdict
//! directly; score methods yield a real value that calibration later
//! binarizes.

use std::sync::Arc;

use sha2::Digest as _;

use crate::data::{Family, MethodSpec, Variant};
use crate::gateway::{ChatMessage, Gateway, GatewayError, SamplingParams, Transcript};
use crate::judging::Judge;
use crate::perturb::{
    noise_schedule, noised_png, rephrase_questions, sample_noise_seed, ImageCache, PerturbError,
};
use crate::prompts::{
    render_double, render_first_round, render_single, PromptError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    Binary,
    Score,
}

/// The outcome of eliciting one method on one record: the answer the model
/// committed to, plus either a binary confidence verdict or a raw score.
#[derive(Debug, Clone)]
pub struct ConfidenceSignal {
    pub record_id: String,
    pub method: MethodSpec,
    pub answer_text: String,
    pub kind: SignalKind,
    pub binary_value: Option<bool>,
    pub score_value: Option<f64>,
    /// Consistency samples whose equivalence judgement failed and were
    /// excluded from the score (soft-flagged upstream).
    pub judge_dropped: u32,
    pub raw_transcripts: Vec<Transcript>,
}

impl ConfidenceSignal {
    fn binary(
        record_id: &str,
        method: &MethodSpec,
        answer_text: String,
        confident: bool,
        raw_transcripts: Vec<Transcript>,
    ) -> Self {
        ConfidenceSignal {
            record_id: record_id.to_string(),
            method: method.clone(),
            answer_text,
            kind: SignalKind::Binary,
            binary_value: Some(confident),
            score_value: None,
            judge_dropped: 0,
            raw_transcripts,
        }
    }

    fn score(
        record_id: &str,
        method: &MethodSpec,
        answer_text: String,
        score: f64,
        raw_transcripts: Vec<Transcript>,
    ) -> Self {
        ConfidenceSignal {
            record_id: record_id.to_string(),
            method: method.clone(),
            answer_text,
            kind: SignalKind::Score,
            binary_value: None,
            score_value: Some(score),
            judge_dropped: 0,
            raw_transcripts,
        }
    }
}

/// Modality-resolved input for one record: the question text placed into
/// templates (empty for image-only runs), the question as judges see it,
/// and the PNG to attach, if any.
#[derive(Debug, Clone)]
pub struct ModalInput {
    pub question: String,
    pub judge_question: String,
    pub image_png: Option<Vec<u8>>,
}

impl ModalInput {
    pub fn text_only(question: &str) -> Self {
        ModalInput {
            question: question.to_string(),
            judge_question: question.to_string(),
            image_png: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ElicitError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("no confidence keyword (certain/uncertain) in reply: {response:?}")]
    UnparsedConfidence { response: String },
    #[error("no probability in [0,1] found in reply: {response:?}")]
    UnparsedProbability { response: String },
    #[error("perplexity needs a non-empty log-probability list")]
    EmptyLogprobs,
    #[error("log-probability {0} is positive or NaN")]
    InvalidLogprob(f64),
    #[error("method {method} requires an image but the input has none")]
    MissingImage { method: &'static str },
    #[error("method rephr/reph-nois requires a rephraser endpoint")]
    MissingRephraser,
    #[error("cross-model requires exactly 2 other endpoints, got {got}")]
    WrongOtherCount { got: usize },
    #[error("method {method} cannot be handled by {handler}")]
    WrongFamily {
        method: &'static str,
        handler: &'static str,
    },
}

/// Strips the confidence-keyword clause: everything from the final keyword
/// occurrence onward goes, then trailing separators are tidied away.
fn clean_answer(prefix: &str) -> String {
    prefix
        .trim_end()
        .trim_end_matches(['"', '\'', ',', ';', ':', '-', '(', '*'])
        .trim()
        .to_string()
}

/// Splits a verbalized reply into (answer, confident). "uncertain" anywhere
/// means unconfident — it is checked first because "certain" is a substring
/// of it. The Challenge template's "ceratin" spelling is honoured too.
/// Replies with no keyword are an error; policy for them lives in the
/// runner.
pub fn parse_verbalized(response: &str) -> Result<(String, bool), ElicitError> {
    let lower = response.to_ascii_lowercase();
    if let Some(idx) = lower.rfind("uncertain") {
        return Ok((clean_answer(&response[..idx]), false));
    }
    if let Some(idx) = lower.rfind("certain") {
        return Ok((clean_answer(&response[..idx]), true));
    }
    if let Some(idx) = lower.rfind("ceratin") {
        return Ok((clean_answer(&response[..idx]), true));
    }
    Err(ElicitError::UnparsedConfidence {
        response: response.to_string(),
    })
}

/// First decimal literal in [0,1] scanning left to right; larger literals
/// are skipped, not errors.
pub fn parse_probability(text: &str) -> Result<f64, ElicitError> {
    let literal = regex::Regex::new(r"\d+\.\d+|\.\d+|\d+").expect("static regex");
    for m in literal.find_iter(text) {
        if let Ok(value) = m.as_str().parse::<f64>() {
            if (0.0..=1.0).contains(&value) {
                return Ok(value);
            }
        }
    }
    Err(ElicitError::UnparsedProbability {
        response: text.to_string(),
    })
}

/// Perplexity of a token sequence: `exp(−mean log p)`. Always ≥ 1 for valid
/// log-probabilities, 1 exactly when every token was certain.
pub fn compute_perplexity(logprobs: &[f64]) -> Result<f64, ElicitError> {
    if logprobs.is_empty() {
        return Err(ElicitError::EmptyLogprobs);
    }
    if let Some(bad) = logprobs.iter().find(|lp| **lp > 0.0 || lp.is_nan()) {
        return Err(ElicitError::InvalidLogprob(*bad));
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Everything an elicitation needs besides the record itself.
pub struct Elicitor<'a> {
    /// The model under evaluation.
    pub subject: &'a Gateway,
    /// Equivalence judge for consistency scoring.
    pub judge: &'a Judge,
    /// Rephraser endpoint (required by rephr/reph-nois).
    pub rephraser: Option<&'a Gateway>,
    /// The two pool endpoints for cross-model consistency.
    pub others: &'a [Arc<Gateway>],
    /// Optional disk cache for derived images.
    pub image_cache: Option<&'a ImageCache>,
    /// Run-level seed; per-sample seeds derive from it.
    pub run_seed: u64,
    /// Added to every schedule sigma (schedule starts at 0 by default).
    pub sigma_offset: f64,
    /// Token budget for answer generation.
    pub max_tokens: u32,
}

impl<'a> Elicitor<'a> {
    fn greedy(&self) -> SamplingParams {
        SamplingParams::greedy(self.max_tokens, self.run_seed as i64)
    }

    fn sampling(&self, method: &MethodSpec) -> SamplingParams {
        SamplingParams {
            temperature: method.sample_temperature,
            max_tokens: self.max_tokens,
            seed: Some(self.run_seed as i64),
            top_p: 1.0,
        }
    }

    fn attach_image(messages: &mut [ChatMessage], png: Option<&Vec<u8>>) {
        if let Some(png) = png {
            if let Some(first) = messages.first_mut() {
                first.images.push(png.clone());
            }
        }
    }

    /// Dispatches `method` to the right elicitation protocol.
    pub async fn elicit(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        match method.family {
            Family::VerbalizedSingle => self.verbalized_single(record_id, input, method).await,
            Family::VerbalizedDouble => self.verbalized_double(record_id, input, method).await,
            Family::Probabilistic => self.perplexity(record_id, input, method).await,
            Family::Consistency => {
                if method.variant == Variant::CrossModel {
                    self.cross_model(record_id, input, method).await
                } else {
                    self.consistency(record_id, input, method).await
                }
            }
        }
    }

    /// One greedy call with the variant's single-step template; answer and
    /// confidence both come from the reply.
    pub async fn verbalized_single(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        let mut messages = render_single(method.variant, &input.question)?;
        Self::attach_image(&mut messages, input.image_png.as_ref());
        let transcript = self.subject.complete(&messages, self.greedy(), false).await?;
        let (answer, confident) = parse_verbalized(&transcript.response_text)?;
        Ok(ConfidenceSignal::binary(
            record_id,
            method,
            answer,
            confident,
            vec![transcript],
        ))
    }

    /// Two greedy turns: a plain answer, then the variant's confidence
    /// request over the dialogue. The answer is the first-turn reply; the
    /// verdict (keyword or probability) is read from the second reply only.
    pub async fn verbalized_double(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        let mut first_messages = render_first_round(&input.question);
        Self::attach_image(&mut first_messages, input.image_png.as_ref());
        let first = self
            .subject
            .complete(&first_messages, self.greedy(), false)
            .await?;
        let first_answer = first.response_text.trim().to_string();

        let mut dialogue = render_double(method.variant, &input.question, &first_answer)?;
        Self::attach_image(&mut dialogue, input.image_png.as_ref());
        let second = self.subject.complete(&dialogue, self.greedy(), false).await?;

        if method.variant == Variant::ProbThr {
            let probability = parse_probability(&second.response_text)?;
            Ok(ConfidenceSignal::score(
                record_id,
                method,
                first_answer,
                probability,
                vec![first, second],
            ))
        } else {
            let (_, confident) = parse_verbalized(&second.response_text)?;
            Ok(ConfidenceSignal::binary(
                record_id,
                method,
                first_answer,
                confident,
                vec![first, second],
            ))
        }
    }

    /// One greedy answer with token log-probabilities; the score is the
    /// answer perplexity.
    pub async fn perplexity(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        let mut messages = render_first_round(&input.question);
        Self::attach_image(&mut messages, input.image_png.as_ref());
        let transcript = self.subject.complete(&messages, self.greedy(), true).await?;
        let logprobs = transcript
            .token_logprobs
            .as_deref()
            .ok_or(ElicitError::EmptyLogprobs)?;
        let ppl = compute_perplexity(logprobs)?;
        let answer = transcript.response_text.trim().to_string();
        Ok(ConfidenceSignal::score(
            record_id,
            method,
            answer,
            ppl,
            vec![transcript],
        ))
    }

    /// Two-phase consistency: a greedy reference answer on the clean input,
    /// then `n_samples` temperature samples whose inputs vary per variant —
    /// clean (random), noised image with the sigma schedule (noised-img),
    /// rephrased question (rephr), or both paired by sample index
    /// (reph-nois). The score counts samples judged equivalent to the
    /// reference; failed judgements drop the sample.
    pub async fn consistency(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        let variant = method.variant;
        if !matches!(
            variant,
            Variant::Random | Variant::NoisedImg | Variant::Rephr | Variant::RephNois
        ) {
            return Err(ElicitError::WrongFamily {
                method: method.name(),
                handler: "consistency",
            });
        }
        let needs_noise = matches!(variant, Variant::NoisedImg | Variant::RephNois);
        let needs_rephrase = matches!(variant, Variant::Rephr | Variant::RephNois);
        if needs_noise && input.image_png.is_none() {
            return Err(ElicitError::MissingImage {
                method: method.name(),
            });
        }

        // Phase 1: greedy reference on the clean input.
        let mut reference_messages = render_first_round(&input.question);
        Self::attach_image(&mut reference_messages, input.image_png.as_ref());
        let reference = self
            .subject
            .complete(&reference_messages, self.greedy(), false)
            .await?;
        let reference_answer = reference.response_text.trim().to_string();

        // Per-sample inputs.
        let n = method.n_samples;
        let sigmas: Vec<f64> = if needs_noise {
            noise_schedule(n, method.sigma_step)?
                .into_iter()
                .map(|s| s + self.sigma_offset)
                .collect()
        } else {
            vec![0.0; n]
        };
        let rephrasings: Vec<String> = if needs_rephrase {
            let rephraser = self.rephraser.ok_or(ElicitError::MissingRephraser)?;
            rephrase_questions(rephraser, &input.question, n, self.run_seed as i64).await?
        } else {
            Vec::new()
        };

        let sample_messages = |k: usize| -> Result<Vec<ChatMessage>, ElicitError> {
            let question = if needs_rephrase {
                rephrasings[k].as_str()
            } else {
                input.question.as_str()
            };
            let mut messages = render_first_round(question);
            if let Some(clean_png) = &input.image_png {
                let png = if needs_noise && sigmas[k] > 0.0 {
                    let seed = sample_noise_seed(self.run_seed, record_id, k as u32);
                    match self.image_cache {
                        Some(cache) => {
                            let source_hash = hex::encode(sha2::Sha256::digest(clean_png));
                            cache.get_or_insert_with(
                                &source_hash,
                                &ImageCache::noise_tag(sigmas[k], seed),
                                || noised_png(clean_png, sigmas[k], seed),
                            )?
                        }
                        None => noised_png(clean_png, sigmas[k], seed)?,
                    }
                } else {
                    clean_png.clone()
                };
                messages[0].images.push(png);
            }
            Ok(messages)
        };

        // Phase 2: n temperature samples, then equivalence judging.
        let params = self.sampling(method);
        let mut futures = Vec::with_capacity(n);
        for k in 0..n {
            let messages = sample_messages(k)?;
            futures.push(async move {
                self.subject
                    .complete_indexed(&messages, params, false, Some(k as u32))
                    .await
            });
        }
        let samples = futures::future::try_join_all(futures).await?;

        let mut matches = 0u32;
        let mut dropped = 0u32;
        let mut transcripts = vec![reference];
        for sample in samples {
            match self
                .judge
                .equivalent(
                    &input.judge_question,
                    &reference_answer,
                    sample.response_text.trim(),
                )
                .await
            {
                Ok(true) => matches += 1,
                Ok(false) => {}
                Err(err) => {
                    dropped += 1;
                    log::warn!(
                        "equivalence judgement failed for record {record_id} ({err}); sample dropped"
                    );
                }
            }
            transcripts.push(sample);
        }

        let mut signal = ConfidenceSignal::score(
            record_id,
            method,
            reference_answer,
            f64::from(matches),
            transcripts,
        );
        signal.judge_dropped = dropped;
        Ok(signal)
    }

    /// Cross-model consistency: the subject's greedy answer is compared to a
    /// pool of 4 subject samples plus 3 from each of the two other models,
    /// all prompted with the plain answer template.
    pub async fn cross_model(
        &self,
        record_id: &str,
        input: &ModalInput,
        method: &MethodSpec,
    ) -> Result<ConfidenceSignal, ElicitError> {
        if method.variant != Variant::CrossModel {
            return Err(ElicitError::WrongFamily {
                method: method.name(),
                handler: "cross_model",
            });
        }
        if self.others.len() != 2 {
            return Err(ElicitError::WrongOtherCount {
                got: self.others.len(),
            });
        }
        let mut messages = render_first_round(&input.question);
        Self::attach_image(&mut messages, input.image_png.as_ref());

        let reference = self
            .subject
            .complete(&messages, self.greedy(), false)
            .await?;
        let reference_answer = reference.response_text.trim().to_string();

        let params = self.sampling(method);
        let subject_pool = self.subject.sample_n(&messages, params, 4, false);
        let other_a = self.others[0].sample_n(&messages, params, 3, false);
        let other_b = self.others[1].sample_n(&messages, params, 3, false);
        let (subject_pool, other_a, other_b) =
            futures::future::try_join3(subject_pool, other_a, other_b).await?;

        let mut matches = 0u32;
        let mut dropped = 0u32;
        let mut transcripts = vec![reference];
        for sample in subject_pool.into_iter().chain(other_a).chain(other_b) {
            match self
                .judge
                .equivalent(
                    &input.judge_question,
                    &reference_answer,
                    sample.response_text.trim(),
                )
                .await
            {
                Ok(true) => matches += 1,
                Ok(false) => {}
                Err(err) => {
                    dropped += 1;
                    log::warn!(
                        "equivalence judgement failed for record {record_id} ({err}); sample dropped"
                    );
                }
            }
            transcripts.push(sample);
        }

        let mut signal = ConfidenceSignal::score(
            record_id,
            method,
            reference_answer,
            f64::from(matches),
            transcripts,
        );
        signal.judge_dropped = dropped;
        Ok(signal)
    }
}
