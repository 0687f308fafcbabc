use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    parse_bin_answer, render_answer_prompt_with, render_rationale_prompt, AblationFlags, Gateway, GatewayError,
    ParseError, PromptBundle, PromptError, Rationale, Stage, TEMPLATE_VERSION,
};
use crate::binning::{BinLabel, BinScale};
use crate::retrieval::GeoContext;
use crate::task::IndicatorTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    /// Attach the street-view image to the answer stage as well as the
    /// rationale stage.
    pub answer_stage_images: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { answer_stage_images: true }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("sample {sample_id}: {source}")]
    Gateway { sample_id: String, source: GatewayError },
    #[error("sample {sample_id}: {source}")]
    Parse { sample_id: String, source: ParseError },
    #[error("sample {sample_id}: {source}")]
    Prompt { sample_id: String, source: PromptError },
}

impl PredictError {
    pub fn sample_id(&self) -> &str {
        match self {
            PredictError::Gateway { sample_id, .. }
            | PredictError::Parse { sample_id, .. }
            | PredictError::Prompt { sample_id, .. } => sample_id,
        }
    }
}

/// One request/response exchange, persisted for audit and replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub sample_id: String,
    pub task: IndicatorTask,
    pub stage: Stage,
    pub prompt_hash: String,
    pub system_text: String,
    pub user_text: String,
    pub image_attachments: Vec<String>,
    pub response_text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub attempts: u32,
}

impl TranscriptEntry {
    fn new(bundle: &PromptBundle, resp: &super::ModelResponse) -> Self {
        Self {
            sample_id: bundle.sample_id.clone(),
            task: bundle.task,
            stage: bundle.stage,
            prompt_hash: bundle.hash(),
            system_text: bundle.system_text.clone(),
            user_text: bundle.user_text.clone(),
            image_attachments: bundle.image_attachments.clone(),
            response_text: resp.text.clone(),
            model_id: resp.model_id.clone(),
            latency_ms: resp.latency_ms,
            attempts: resp.attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFragment {
    pub sample_id: String,
    pub task: IndicatorTask,
    pub flags: AblationFlags,
    pub rationale: Rationale,
    pub answer_text: String,
    pub label: BinLabel,
    pub prompt_hashes: Vec<String>,
    pub template_version: String,
    pub model_id: String,
    pub gateway_calls: usize,
    pub transcript: Vec<TranscriptEntry>,
}

/// Runs the rationale stage (when enabled) and the answer stage for one
/// sample and parses the returned rating.
pub fn predict_sample(
    ctx: &GeoContext,
    task: IndicatorTask,
    scale: &BinScale,
    flags: AblationFlags,
    gateway: &Gateway,
    opts: PredictOptions,
) -> Result<PredictionFragment, PredictError> {
    let sample_id = ctx.point.id.clone();
    let gw_err = |source| PredictError::Gateway { sample_id: sample_id.clone(), source };
    let mut transcript = Vec::new();

    let rationale = if flags.use_cot {
        let bundle = render_rationale_prompt(ctx, task, flags)
            .map_err(|source| PredictError::Prompt { sample_id: sample_id.clone(), source })?;
        let resp = gateway.complete(&bundle).map_err(gw_err)?;
        transcript.push(TranscriptEntry::new(&bundle, &resp));
        Rationale {
            token_count: resp.completion_tokens,
            text: resp.text,
            model_id: resp.model_id,
            latency_ms: resp.latency_ms,
        }
    } else {
        Rationale::empty()
    };

    let bundle = render_answer_prompt_with(ctx, &rationale, task, scale, flags, opts.answer_stage_images);
    let resp = gateway.complete(&bundle).map_err(gw_err)?;
    transcript.push(TranscriptEntry::new(&bundle, &resp));
    let label =
        parse_bin_answer(&resp.text).map_err(|source| PredictError::Parse { sample_id: sample_id.clone(), source })?;

    Ok(PredictionFragment {
        sample_id,
        task,
        flags,
        rationale,
        answer_text: resp.text,
        label,
        prompt_hashes: transcript.iter().map(|t| t.prompt_hash.clone()).collect(),
        template_version: TEMPLATE_VERSION.to_string(),
        model_id: resp.model_id,
        gateway_calls: transcript.len(),
        transcript,
    })
}
