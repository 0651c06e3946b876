//! Deterministic stand-in backend.
//!
//! Responses are chosen per stage from a candidate pool. At temperature 0 the
//! choice is a pure function of the image digest and prompt text; above 0 it
//! is drawn from a generator seeded by the request seed and that same hash.
//! A script queue, when loaded, takes precedence and is consumed in order.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BackendError, Completion, VisionBackend, VisionRequest};
use crate::geometry::BboxConvention;
use crate::prompting::Stage;
use crate::store::Digest;

#[derive(Debug)]
pub struct MockBackend {
    model_id: String,
    convention: BboxConvention,
    pools: HashMap<Stage, Vec<String>>,
    script: Mutex<VecDeque<String>>,
}

impl Default for MockBackend {
    fn default() -> Self {
        let mut pools = HashMap::new();
        let mut set = |stage, text: &str| {
            pools.insert(stage, vec![text.to_string()]);
        };
        set(Stage::Overview, "A photo of a scene that contains printed text.");
        set(Stage::Localization, "[0.25, 0.25, 0.75, 0.75]");
        set(Stage::Observation, "The text is not legible to me.");
        set(Stage::BaselineDirect, "The text is not legible to me.");
        set(
            Stage::ZscotReason,
            "First I look for text in the image, then I read the part the question asks about.",
        );
        set(Stage::ZscotExtract, "The text is not legible to me.");
        Self {
            model_id: "mock-v1".into(),
            convention: BboxConvention::Fraction,
            pools,
            script: Mutex::new(VecDeque::new()),
        }
    }
}

impl MockBackend {
    pub fn with_responses<I, S>(mut self, stage: Stage, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let pool: Vec<String> = responses.into_iter().map(Into::into).collect();
        assert!(!pool.is_empty(), "a stage needs at least one response");
        self.pools.insert(stage, pool);
        self
    }

    /// Queue responses returned verbatim, ahead of the pools, one per call.
    pub fn scripted<I, S>(self, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.script
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .extend(responses.into_iter().map(Into::into));
        self
    }

    pub fn with_convention(mut self, convention: BboxConvention) -> Self {
        self.convention = convention;
        self
    }

    pub fn with_model_id(mut self, model_id: impl Into<String>) -> Self {
        self.model_id = model_id.into();
        self
    }

    fn request_hash(request: &VisionRequest) -> u64 {
        let mut buf = Vec::with_capacity(32 + request.prompt.text.len());
        buf.extend_from_slice(&request.image.digest().0);
        buf.extend_from_slice(request.prompt.text.as_bytes());
        let d = Digest::of(&buf);
        u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
    }
}

impl VisionBackend for MockBackend {
    fn backend_id(&self) -> &str {
        "mock"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn bbox_convention(&self) -> BboxConvention {
        self.convention
    }

    fn complete(&self, request: &VisionRequest) -> Result<Completion, BackendError> {
        if let Some(text) = self.script.lock().unwrap_or_else(|e| e.into_inner()).pop_front() {
            return Ok(Completion { text, latency_ms: 0 });
        }
        let pool = self
            .pools
            .get(&request.prompt.stage)
            .ok_or_else(|| BackendError::Config(format!("no mock responses for {:?}", request.prompt.stage)))?;
        let hash = Self::request_hash(request);
        let index = if request.params.temperature > 0.0 {
            let seed = request.params.seed.unwrap_or(0) ^ hash;
            ChaCha8Rng::seed_from_u64(seed).random_range(0..pool.len())
        } else {
            (hash % pool.len() as u64) as usize
        };
        Ok(Completion {
            text: pool[index].clone(),
            latency_ms: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{GenParams, ImagePayload};
    use crate::geometry::RasterImage;
    use crate::prompting::AssembledPrompt;

    fn request(stage: Stage, text: &str, params: GenParams) -> VisionRequest {
        VisionRequest {
            image: ImagePayload::from_rgb(&RasterImage::from_pixel(2, 2, image::Rgb([1, 1, 1]))),
            prompt: AssembledPrompt {
                stage,
                text: text.into(),
            },
            params,
            backend_id: "mock".into(),
            model_id: "mock-v1".into(),
        }
    }

    #[test]
    fn greedy_is_pure() {
        let mock = MockBackend::default().with_responses(Stage::Observation, ["a", "b", "c"]);
        let req = request(Stage::Observation, "q", GenParams::default());
        let first = mock.complete(&req).unwrap();
        for _ in 0..10 {
            assert_eq!(mock.complete(&req).unwrap(), first);
        }
    }

    #[test]
    fn script_takes_precedence() {
        let mock = MockBackend::default().scripted(["one", "two"]);
        let req = request(Stage::Overview, "x", GenParams::default());
        assert_eq!(mock.complete(&req).unwrap().text, "one");
        assert_eq!(mock.complete(&req).unwrap().text, "two");
        assert_eq!(
            mock.complete(&req).unwrap().text,
            "A photo of a scene that contains printed text."
        );
    }

    #[test]
    fn seeds_spread_over_pool() {
        let pool: Vec<String> = (0..8).map(|i| format!("r{i}")).collect();
        let mock = MockBackend::default().with_responses(Stage::ZscotReason, pool);
        let distinct: std::collections::HashSet<String> = (0..64)
            .map(|s| {
                let req = request(Stage::ZscotReason, "q", GenParams::sampling(512, Some(s)));
                mock.complete(&req).unwrap().text
            })
            .collect();
        assert!(distinct.len() > 1);
    }
}
