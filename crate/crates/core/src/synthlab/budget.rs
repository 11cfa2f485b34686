use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Coefficients of the stage-wise information model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformationBudgetParams {
    /// Channel gain per stage.
    pub beta: f64,
    /// Spatial decay per squared downsampling count.
    pub alpha: f64,
    /// Gain of the prompt encoder.
    pub gamma: f64,
    /// Stage of interest.
    pub stage: usize,
    /// Downsampling count of that stage.
    pub downsample: f64,
    /// Deepest stage index.
    pub stages: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StageValue {
    pub stage: usize,
    pub downsample: f64,
    pub value: f64,
    /// Same stage with downsampling removed.
    pub undecayed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Budget {
    /// Stages `0..=M`, with stage `j` downsampled `j` times.
    pub per_stage: Vec<StageValue>,
    /// Value at the requested `(stage, downsample)`.
    pub focus: f64,
    /// Sum over stages, the decoder input without prompts.
    pub decoder_input: f64,
    /// Sum over stages with downsampling removed.
    pub undecayed_input: f64,
    /// Prompt-encoder value.
    pub prompt: f64,
}

pub fn stage_value(beta: f64, alpha: f64, stage: usize, downsample: f64, signal: f64) -> f64 {
    (beta * stage as f64).exp() * (-alpha * downsample * downsample).exp() * signal
}

pub fn information_budget(p: &InformationBudgetParams, signal: f64) -> Result<Budget> {
    let finite = [p.beta, p.alpha, p.gamma, p.downsample, signal].iter().all(|v| v.is_finite());
    if !finite || p.stage > p.stages {
        return Err(Error::InvalidConfig(format!(
            "budget parameters must be finite with stage <= stages, got {p:?}"
        )));
    }
    let per_stage: Vec<StageValue> = (0..=p.stages)
        .map(|j| StageValue {
            stage: j,
            downsample: j as f64,
            value: stage_value(p.beta, p.alpha, j, j as f64, signal),
            undecayed: stage_value(p.beta, 0.0, j, 0.0, signal),
        })
        .collect();
    Ok(Budget {
        focus: stage_value(p.beta, p.alpha, p.stage, p.downsample, signal),
        decoder_input: per_stage.iter().map(|s| s.value).sum(),
        undecayed_input: per_stage.iter().map(|s| s.undecayed).sum(),
        prompt: p.gamma.exp() * signal,
        per_stage,
    })
}
