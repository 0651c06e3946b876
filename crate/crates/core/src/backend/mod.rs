//! Vision-language backends and the caching, retrying client in front of them.

mod http;
mod limiter;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::ImageEncoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BboxConvention, PixelBox, RasterImage};
use crate::prompting::AssembledPrompt;
use crate::store::{CacheKey, Digest, ResponseStore};

pub use http::{HttpBackend, HttpConfig};
pub use limiter::Limiter;
pub use mock::MockBackend;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;
pub const SELF_CONSISTENCY_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused the request (HTTP {status}): {body}")]
    Refusal { status: u16, body: String },
    #[error("image could not be decoded: {0}")]
    ImageDecode(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("image {0} is not known to this backend")]
    UnknownImage(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// Sampling settings for one call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed: None,
        }
    }
}

impl GenParams {
    pub fn sampling(max_output_tokens: u32, seed: Option<u64>) -> Self {
        Self {
            temperature: SELF_CONSISTENCY_TEMPERATURE,
            max_output_tokens,
            seed,
        }
    }
}

/// Where a cropped view came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Digest,
    pub region: PixelBox,
}

/// An image as sent to a backend: canonical PNG bytes plus their digest.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    png: Arc<Vec<u8>>,
    digest: Digest,
    width: u32,
    height: u32,
    provenance: Option<Provenance>,
}

impl std::fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImagePayload")
            .field("digest", &self.digest)
            .field("width", &self.width)
            .field("height", &self.height)
            .field("bytes", &self.png.len())
            .field("provenance", &self.provenance)
            .finish()
    }
}

/// Encode RGB pixels to PNG with fixed settings so equal pixels always give
/// equal bytes.
pub fn encode_canonical_png(image: &RasterImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new_with_quality(&mut out, CompressionType::Fast, FilterType::Sub)
        .write_image(
            image.as_raw(),
            image.width(),
            image.height(),
            image::ExtendedColorType::Rgb8,
        )
        .expect("in-memory PNG encoding cannot fail");
    out
}

impl ImagePayload {
    pub fn from_rgb(image: &RasterImage) -> Self {
        Self::from_canonical_png(encode_canonical_png(image), image.width(), image.height())
    }

    /// Wrap bytes already produced by [`encode_canonical_png`].
    pub fn from_canonical_png(png: Vec<u8>, width: u32, height: u32) -> Self {
        Self {
            digest: Digest::of(&png),
            png: Arc::new(png),
            width,
            height,
            provenance: None,
        }
    }

    /// Decode arbitrary PNG/JPEG bytes and re-encode canonically.
    pub fn from_encoded(bytes: &[u8]) -> Result<Self, BackendError> {
        let decoded = image::load_from_memory(bytes)
            .map_err(|e| BackendError::ImageDecode(e.to_string()))?
            .to_rgb8();
        Ok(Self::from_rgb(&decoded))
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn png(&self) -> &[u8] {
        &self.png
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn describe(&self) -> ImageRef {
        ImageRef {
            digest: self.digest,
            width: self.width,
            height: self.height,
            provenance: self.provenance,
        }
    }
}

/// Serializable stand-in for an image inside traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub digest: Digest,
    pub width: u32,
    pub height: u32,
    pub provenance: Option<Provenance>,
}

/// One image, one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionRequest {
    pub image: ImagePayload,
    pub prompt: AssembledPrompt,
    pub params: GenParams,
    pub backend_id: String,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionResponse {
    pub text: String,
    pub latency_ms: u64,
    /// Served from the response store. Not serialized, so traces do not
    /// depend on cache state.
    #[serde(skip_serializing, default)]
    pub cached: bool,
}

/// What an adapter returns for a single completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub latency_ms: u64,
}

/// A model that answers a prompt about one image.
pub trait VisionBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn bbox_convention(&self) -> BboxConvention;
    fn complete(&self, request: &VisionRequest) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCounters {
    pub backend_calls: u64,
    pub cache_hits: u64,
}

/// Front door for every model call: cache lookup, retries, counters.
pub struct Client {
    backend: Arc<dyn VisionBackend>,
    store: Option<ResponseStore>,
    retry: RetryPolicy,
    max_output_tokens: u32,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl Client {
    pub fn new(backend: Arc<dyn VisionBackend>) -> Self {
        Self {
            backend,
            store: None,
            retry: RetryPolicy::default(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn with_store(mut self, store: ResponseStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_output_tokens(mut self, tokens: u32) -> Self {
        self.max_output_tokens = tokens;
        self
    }

    pub fn backend(&self) -> &dyn VisionBackend {
        self.backend.as_ref()
    }

    pub fn bbox_convention(&self) -> BboxConvention {
        self.backend.bbox_convention()
    }

    pub fn counters(&self) -> CallCounters {
        CallCounters {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    pub fn greedy_params(&self) -> GenParams {
        GenParams {
            max_output_tokens: self.max_output_tokens,
            ..GenParams::default()
        }
    }

    pub fn sampling_params(&self, seed: Option<u64>) -> GenParams {
        GenParams::sampling(self.max_output_tokens, seed)
    }

    pub fn request(&self, image: &ImagePayload, prompt: AssembledPrompt, params: GenParams) -> VisionRequest {
        VisionRequest {
            image: image.clone(),
            prompt,
            params,
            backend_id: self.backend.backend_id().to_string(),
            model_id: self.backend.model_id().to_string(),
        }
    }

    pub fn generate(&self, request: &VisionRequest) -> Result<VisionResponse, BackendError> {
        if request.prompt.text.is_empty() {
            return Err(BackendError::InvalidParams("prompt is empty".into()));
        }
        if request.params.temperature.is_nan() || request.params.temperature < 0.0 {
            return Err(BackendError::InvalidParams("temperature must be >= 0".into()));
        }
        let key = CacheKey::for_request(request);
        if let Some(store) = &self.store {
            match store.get(&key) {
                Ok(Some(mut hit)) => {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    hit.cached = true;
                    return Ok(hit);
                }
                Ok(None) => {}
                Err(e) => log::warn!("ignoring cache entry: {e}"),
            }
        }

        let mut attempt = 0u32;
        let completion = loop {
            attempt += 1;
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(request) {
                Ok(c) => break c,
                Err(e) if e.is_transient() && attempt <= self.retry.max_retries => {
                    let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1).min(16));
                    log::debug!("transient backend error (attempt {attempt}): {e}; retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                }
                Err(BackendError::Transport { message, .. }) => {
                    return Err(BackendError::Transport {
                        attempts: attempt,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        };

        let response = VisionResponse {
            text: completion.text,
            latency_ms: completion.latency_ms,
            cached: false,
        };
        if let Some(store) = &self.store {
            if let Err(e) = store.put(&key, &response) {
                log::warn!("failed to cache response {key}: {e}");
            }
        }
        Ok(response)
    }

    /// Draw `n` completions. Path `i` uses seed `seed + i` so each path has
    /// its own cache key; path 0 is exactly `generate(request)`.
    pub fn sample_n(&self, request: &VisionRequest, n: usize) -> Result<Vec<VisionResponse>, BackendError> {
        if n == 0 {
            return Err(BackendError::InvalidParams("n must be at least 1".into()));
        }
        if n > 1 && request.params.temperature <= 0.0 {
            return Err(BackendError::InvalidParams(
                "sampling several paths requires temperature > 0".into(),
            ));
        }
        (0..n as u64)
            .map(|i| {
                let mut req = request.clone();
                req.params.seed = path_seed(request.params.seed, i);
                self.generate(&req)
            })
            .collect()
    }
}

pub fn path_seed(base: Option<u64>, path: u64) -> Option<u64> {
    match (base, path) {
        (base, 0) => base,
        (Some(s), i) => Some(s.wrapping_add(i)),
        (None, i) => Some(i),
    }
}
