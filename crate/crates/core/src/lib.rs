//! A harness for measuring how well chat models know their own knowledge
//! boundaries on (visual) question answering.
//!
//! The pipeline elicits three families of confidence signals — verbalized
//! ("certain"/"uncertain" declarations, single- or double-step), probabilistic
//! (answer perplexity from token log-probabilities), and answer-consistency
//! (agreement between a greedy reference answer and temperature samples under
//! input perturbations) — binarizes score-valued signals with a threshold
//! fitted on a held-out split, grades answers against gold, and aggregates
//! everything into five confusion-derived metrics (uncertain-rate, accuracy,
//! alignment, conservativeness, overconfidence).
//!
//! Modules mirror the pipeline stages: [`data`] (records and splits),
//! [`gateway`] (endpoint client, cache, mock backend), [`prompts`] (exact
//! elicitation templates), [`perturb`] (image noise, rephrasing, question-on-
//! image composition), [`judging`] (correctness and equivalence), [`elicit`]
//! (the method implementations), [`calibrate`] (threshold fitting),
//! [`metrics`]/[`report`] (aggregation and emission), and [`runner`]
//! (orchestration, ledger, CLI-facing config).

pub mod calibrate;
pub mod data;
pub mod elicit;
pub mod gateway;
pub mod judging;
pub mod metrics;
pub mod perturb;
pub mod prompts;
pub mod report;
pub mod runner;
