//! JSON bodies of the HTTP interface.

use boxprompt_core::mask::Rle;
use serde::{Deserialize, Serialize};

/// Upload body for clients that cannot send multipart forms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSessionJson {
    pub image_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub width: usize,
    pub height: usize,
}

/// Boxes as `[x_min, y_min, x_max, y_max]` in image pixels.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub boxes: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    /// Refined box the mask is laid over.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: usize,
    pub category_name: String,
    pub score: f64,
    /// Box-relative mask grid.
    pub mask_rle: Rle,
    /// The request box reached outside the image and was clamped.
    pub clamped: bool,
    /// An automatic run would have dropped this result.
    pub below_threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub results: Vec<PromptResult>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub ok: bool,
    pub checkpoint_fingerprint: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub backbone_invocations: u64,
    pub sessions_created: u64,
    pub sessions_evicted: u64,
    pub live_sessions: u64,
    pub prompt_requests: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}
