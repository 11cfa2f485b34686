//! Encode-once, prompt-many session logic, independent of the transport.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime};

use boxprompt_core::checkpoint::{self, Checkpoint};
use boxprompt_core::config::ServeConfig;
use boxprompt_core::geometry::{AnnotationFrame, BBox};
use boxprompt_core::image::Image;
use boxprompt_core::pipeline::Model;
use boxprompt_core::synthlab::CATEGORIES;
use tracing::info;

use crate::api::{Counters, Health, PromptRequest, PromptResponse, PromptResult, SessionCreated};
use crate::error::{ServiceError, ServiceResult};
use crate::session::{Session, SessionStore};

pub struct Service {
    model: Arc<Model>,
    fingerprint: String,
    sessions: SessionStore,
    max_side: usize,
    prompt_requests: AtomicU64,
}

impl Service {
    pub fn new(model: Model, fingerprint: String, cfg: &ServeConfig) -> Self {
        Self {
            model: Arc::new(model),
            fingerprint,
            sessions: SessionStore::new(cfg.max_sessions),
            max_side: cfg.max_image_side,
            prompt_requests: AtomicU64::new(0),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint, cfg: &ServeConfig) -> Self {
        Self::new(ckpt.model, ckpt.fingerprint, cfg)
    }

    /// Service over an in-memory model; the fingerprint is that of its serialized form.
    pub fn from_model(model: Model, seed: u64, cfg: &ServeConfig) -> Self {
        let fp = checkpoint::fingerprint(&checkpoint::encode(&model, seed, 0));
        Self::new(model, fp, cfg)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> ServiceResult<SessionCreated> {
        let image = Image::decode(bytes).map_err(|e| match e {
            boxprompt_core::Error::Codec(m) => ServiceError::ImageDecode(m),
            other => ServiceError::ImageDecode(other.to_string()),
        })?;
        self.encode_image(image)
    }

    /// Runs the backbone once and stores the features under a fresh id.
    pub fn encode_image(&self, image: Image) -> ServiceResult<SessionCreated> {
        let (width, height) = (image.width(), image.height());
        if width == 0 || height == 0 {
            return Err(ServiceError::ImageDecode("image has no pixels".into()));
        }
        if width > self.max_side || height > self.max_side {
            return Err(ServiceError::ImageTooLarge {
                width,
                height,
                max: self.max_side,
            });
        }
        let features = self.model.encode(&image)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let evicted = self.sessions.insert(Session {
            id: id.clone(),
            features,
            width,
            height,
            created_at: SystemTime::now(),
            checkpoint_fingerprint: self.fingerprint.clone(),
        });
        info!(session = %id, width, height, evicted = evicted.len(), "session created");
        Ok(SessionCreated {
            session_id: id,
            width,
            height,
        })
    }

    /// Box-prompted segmentation on a session's cached features.
    pub fn prompt(&self, id: &str, req: &PromptRequest) -> ServiceResult<PromptResponse> {
        let start = Instant::now();
        let session = self
            .sessions
            .get(id)
            .ok_or_else(|| ServiceError::UnknownSession(id.to_string()))?;
        self.prompt_requests.fetch_add(1, Ordering::SeqCst);
        let prepared = prepare_boxes(&req.boxes, session.width, session.height)?;
        let boxes: Vec<BBox> = prepared.iter().map(|(b, _)| *b).collect();
        let instances = self.model.promptable_segment(&session.features, &boxes)?;
        let results = instances
            .into_iter()
            .zip(&prepared)
            .map(|(r, (_, clamped))| PromptResult {
                bbox: r.bbox.to_array(),
                category: r.category,
                category_name: CATEGORIES.get(r.category).copied().unwrap_or("unknown").to_string(),
                score: r.score,
                mask_rle: r.mask.to_rle(),
                clamped: *clamped,
                below_threshold: r.below_threshold,
            })
            .collect();
        Ok(PromptResponse {
            results,
            latency_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn health(&self) -> Health {
        Health {
            ok: true,
            checkpoint_fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn counters(&self) -> Counters {
        let (created, evicted) = self.sessions.totals();
        Counters {
            backbone_invocations: self.model.backbone_invocations(),
            sessions_created: created,
            sessions_evicted: evicted,
            live_sessions: self.sessions.len() as u64,
            prompt_requests: self.prompt_requests.load(Ordering::SeqCst),
        }
    }
}

/// Clamps request boxes to the image. A box is malformed when a coordinate is not
/// finite, its corners are inverted, or nothing of it is left inside the image.
pub fn prepare_boxes(boxes: &[[f64; 4]], width: usize, height: usize) -> ServiceResult<Vec<(BBox, bool)>> {
    let frame = AnnotationFrame::of_size(width, height);
    boxes
        .iter()
        .enumerate()
        .map(|(index, &[x0, y0, x1, y1])| {
            let bad = |reason: &str| ServiceError::MalformedBox {
                index,
                reason: reason.to_string(),
            };
            let b = BBox::try_new(x0, y0, x1, y1).ok_or_else(|| bad("coordinates must be finite with min <= max"))?;
            let c = b.clamp_to(&frame);
            if c.x_min >= c.x_max || c.y_min >= c.y_max {
                return Err(bad("no area left inside the image"));
            }
            Ok((c, c != b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamping_is_flagged() {
        let out = prepare_boxes(&[[2.0, 3.0, 10.0, 12.0], [-4.0, 5.0, 70.0, 9.0]], 64, 48).unwrap();
        assert_eq!(out[0], (BBox::new(2.0, 3.0, 10.0, 12.0), false));
        assert_eq!(out[1], (BBox::new(0.0, 5.0, 64.0, 9.0), true));
    }

    #[test]
    fn malformed_boxes_name_their_index() {
        let e = prepare_boxes(&[[0.0, 0.0, 4.0, 4.0], [9.0, 0.0, 3.0, 4.0]], 16, 16).unwrap_err();
        assert!(matches!(e, ServiceError::MalformedBox { index: 1, .. }));
        assert_eq!(e.code(), "malformed_box");
        assert!(prepare_boxes(&[[f64::NAN, 0.0, 1.0, 1.0]], 16, 16).is_err());
        assert!(prepare_boxes(&[[20.0, 0.0, 30.0, 4.0]], 16, 16).is_err());
    }
}
