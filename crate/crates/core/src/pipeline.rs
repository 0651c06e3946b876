//! Answering strategies: the three-stage zoom-in chain, its ablations, and
//! the direct / zero-shot CoT / self-consistency baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{path_seed, BackendError, Client, GenParams, ImagePayload, ImageRef, Provenance, VisionResponse};
use crate::geometry::{
    compute_crop, extract_crop, load_rgb, parse_bbox_text, CropConfig, CropMode, CropRegion, GeometryError,
    ImageDims, PixelBox, RasterImage,
};
use crate::prompting::{self, AssembledPrompt, PromptError, PromptSet, Stage};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SC_PATHS: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("image error: {0}")]
    Image(#[from] GeometryError),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TextCotOptions {
    pub use_crop: bool,
    pub use_caption: bool,
    pub crop_mode: CropMode,
}

impl Default for TextCotOptions {
    fn default() -> Self {
        Self {
            use_crop: true,
            use_caption: true,
            crop_mode: CropMode::SquareScaled,
        }
    }
}

/// How a sample is answered. Serializes as its label, e.g. `"direct"`,
/// `"cot_sc:5"`, `"textcot"`, `"textcot:no-caption,mode=strict_rect"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Direct,
    ZsCot,
    CotSc { paths: usize },
    TextCot(TextCotOptions),
}

impl Strategy {
    pub fn textcot() -> Self {
        Strategy::TextCot(TextCotOptions::default())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Direct => f.write_str("direct"),
            Strategy::ZsCot => f.write_str("zscot"),
            Strategy::CotSc { paths } => write!(f, "cot_sc:{paths}"),
            Strategy::TextCot(o) => {
                let mut opts = Vec::new();
                if !o.use_crop {
                    opts.push("no-crop".to_string());
                }
                if !o.use_caption {
                    opts.push("no-caption".to_string());
                }
                if o.use_crop && o.crop_mode != CropMode::SquareScaled {
                    opts.push(format!("mode={}", o.crop_mode));
                }
                if opts.is_empty() {
                    f.write_str("textcot")
                } else {
                    write!(f, "textcot:{}", opts.join(","))
                }
            }
        }
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, opts) = match s.split_once(':') {
            Some((k, o)) => (k, Some(o)),
            None => (s, None),
        };
        match (kind, opts) {
            ("direct", None) => Ok(Strategy::Direct),
            ("zscot", None) => Ok(Strategy::ZsCot),
            ("cot_sc", None) => Ok(Strategy::CotSc {
                paths: DEFAULT_SC_PATHS,
            }),
            ("cot_sc", Some(n)) => match n.parse::<usize>() {
                Ok(paths) if paths >= 1 => Ok(Strategy::CotSc { paths }),
                _ => Err(format!("bad path count in '{s}'")),
            },
            ("textcot", opts) => {
                let mut o = TextCotOptions::default();
                for opt in opts.into_iter().flat_map(|o| o.split(',')).filter(|o| !o.is_empty()) {
                    match opt {
                        "no-crop" => o.use_crop = false,
                        "no-caption" => o.use_caption = false,
                        _ => match opt.strip_prefix("mode=") {
                            Some(mode) => o.crop_mode = mode.parse()?,
                            None => return Err(format!("unknown textcot option '{opt}'")),
                        },
                    }
                }
                Ok(Strategy::TextCot(o))
            }
            _ => Err(format!("unknown strategy '{s}'")),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FallbackEvent {
    /// Grounding output had no usable box; stage 3 ran on the full image.
    BboxParseFailed { reason: String },
    /// Caption came back empty; stage 3 ran without context.
    EmptyCaption,
    /// A reasoning turn came back empty; that path was answered directly.
    EmptyReasoning { path: usize },
}

/// One backend call as it happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub prompt: AssembledPrompt,
    pub image: ImageRef,
    pub params: GenParams,
    pub response: VisionResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub schema_version: u32,
    #[serde(default)]
    pub dataset: String,
    pub sample_id: String,
    pub strategy: Strategy,
    pub question: String,
    pub caption_answer: Option<String>,
    pub grounding_raw: Option<String>,
    pub parsed_box: Option<PixelBox>,
    pub crop_region: Option<CropRegion>,
    pub calls: Vec<CallRecord>,
    pub final_answer: String,
    pub fallback_events: Vec<FallbackEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PipelineTrace {
    fn new(sample_id: &str, question: &str, strategy: Strategy) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            dataset: String::new(),
            sample_id: sample_id.to_string(),
            strategy,
            question: question.to_string(),
            caption_answer: None,
            grounding_raw: None,
            parsed_box: None,
            crop_region: None,
            calls: Vec::new(),
            final_answer: String::new(),
            fallback_events: Vec::new(),
            error: None,
        }
    }

    /// Record for a sample that could not be answered at all.
    pub fn failed(sample_id: &str, question: &str, strategy: Strategy, error: String) -> Self {
        let mut t = Self::new(sample_id, question, strategy);
        t.error = Some(error);
        t
    }

    pub fn prompt_for(&self, stage: Stage) -> Option<&AssembledPrompt> {
        self.calls.iter().map(|c| &c.prompt).find(|p| p.stage == stage)
    }
}

/// A decoded global image and its canonical payload.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub pixels: RasterImage,
    pub payload: ImagePayload,
}

impl LoadedImage {
    pub fn open(path: &Path) -> Result<Self, GeometryError> {
        Ok(Self::from_rgb(load_rgb(path)?))
    }

    pub fn from_rgb(pixels: RasterImage) -> Self {
        let payload = ImagePayload::from_rgb(&pixels);
        Self { pixels, payload }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims::of(&self.pixels)
    }
}

/// Runs strategies against one client with fixed prompts and crop settings.
pub struct Pipeline<'a> {
    client: &'a Client,
    prompts: PromptSet,
    crop: CropConfig,
    seed: u64,
}

impl<'a> Pipeline<'a> {
    pub fn new(client: &'a Client, prompts: PromptSet, crop: CropConfig) -> Self {
        Self {
            client,
            prompts,
            crop,
            seed: 0,
        }
    }

    /// Base seed for sampled strategies.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn run(
        &self,
        sample_id: &str,
        question: &str,
        image: &LoadedImage,
        strategy: &Strategy,
    ) -> Result<PipelineTrace, PipelineError> {
        match *strategy {
            Strategy::Direct => self.run_direct(sample_id, question, image),
            Strategy::ZsCot => self.run_zscot(sample_id, question, image),
            Strategy::CotSc { paths } => self.run_cot_sc(sample_id, question, image, paths),
            Strategy::TextCot(opts) => self.run_textcot(sample_id, question, image, opts),
        }
    }

    fn call(
        &self,
        trace: &mut PipelineTrace,
        image: &ImagePayload,
        prompt: AssembledPrompt,
        params: GenParams,
    ) -> Result<String, PipelineError> {
        let request = self.client.request(image, prompt, params);
        let response = self.client.generate(&request)?;
        let text = response.text.clone();
        trace.calls.push(CallRecord {
            prompt: request.prompt,
            image: image.describe(),
            params,
            response,
        });
        Ok(text)
    }

    /// One call: global image plus the bare question.
    pub fn run_direct(&self, sample_id: &str, question: &str, image: &LoadedImage) -> Result<PipelineTrace, PipelineError> {
        let mut trace = PipelineTrace::new(sample_id, question, Strategy::Direct);
        let prompt = prompting::assemble_direct(question)?;
        trace.final_answer = self.call(&mut trace, &image.payload, prompt, self.client.greedy_params())?;
        Ok(trace)
    }

    /// Reason, then extract. Returns the extracted answer, or the direct
    /// answer when the reasoning turn is empty.
    fn zscot_path(
        &self,
        trace: &mut PipelineTrace,
        question: &str,
        image: &LoadedImage,
        reasoning: &str,
        params: GenParams,
        path: usize,
    ) -> Result<String, PipelineError> {
        if reasoning.trim().is_empty() {
            trace.fallback_events.push(FallbackEvent::EmptyReasoning { path });
            let prompt = prompting::assemble_direct(question)?;
            return self.call(trace, &image.payload, prompt, params);
        }
        let prompt = prompting::assemble_zscot_extract(question, reasoning)?;
        self.call(trace, &image.payload, prompt, params)
    }

    pub fn run_zscot(&self, sample_id: &str, question: &str, image: &LoadedImage) -> Result<PipelineTrace, PipelineError> {
        let mut trace = PipelineTrace::new(sample_id, question, Strategy::ZsCot);
        let params = self.client.greedy_params();
        let reasoning = self.call(
            &mut trace,
            &image.payload,
            prompting::assemble_zscot_reason(question)?,
            params,
        )?;
        trace.final_answer = self.zscot_path(&mut trace, question, image, &reasoning, params, 0)?;
        Ok(trace)
    }

    /// `paths` sampled reason/extract chains, then a majority vote.
    pub fn run_cot_sc(
        &self,
        sample_id: &str,
        question: &str,
        image: &LoadedImage,
        paths: usize,
    ) -> Result<PipelineTrace, PipelineError> {
        if paths == 0 {
            return Err(PipelineError::InvalidStrategy("cot_sc needs at least one path".into()));
        }
        let mut trace = PipelineTrace::new(sample_id, question, Strategy::CotSc { paths });
        let base = self.client.sampling_params(Some(self.seed));
        let request = self
            .client
            .request(&image.payload, prompting::assemble_zscot_reason(question)?, base);
        let reasonings = self.client.sample_n(&request, paths)?;
        for (i, response) in reasonings.iter().enumerate() {
            let params = GenParams {
                seed: path_seed(base.seed, i as u64),
                ..base
            };
            trace.calls.push(CallRecord {
                prompt: request.prompt.clone(),
                image: image.payload.describe(),
                params,
                response: response.clone(),
            });
        }
        let mut answers = Vec::with_capacity(paths);
        for (i, response) in reasonings.iter().enumerate() {
            let params = GenParams {
                seed: path_seed(base.seed, i as u64),
                ..base
            };
            answers.push(self.zscot_path(&mut trace, question, image, &response.text, params, i)?);
        }
        trace.final_answer = majority_vote(&answers).expect("at least one path");
        Ok(trace)
    }

    pub fn run_textcot(
        &self,
        sample_id: &str,
        question: &str,
        image: &LoadedImage,
        opts: TextCotOptions,
    ) -> Result<PipelineTrace, PipelineError> {
        let mut trace = PipelineTrace::new(sample_id, question, Strategy::TextCot(opts));
        let params = self.client.greedy_params();
        let dims = image.dims();
        // validate before spending any calls
        let localization = prompting::assemble_localization(&self.prompts, question)?;

        // 1. overview
        if opts.use_caption {
            let caption = self.call(
                &mut trace,
                &image.payload,
                prompting::assemble_overview(&self.prompts),
                params,
            )?;
            trace.caption_answer = Some(caption);
        }

        // 2. coarse localization
        let grounding = self.call(&mut trace, &image.payload, localization, params)?;
        match parse_bbox_text(&grounding, self.client.bbox_convention()) {
            Ok(parsed) => trace.parsed_box = Some(parsed.to_pixel(dims)),
            Err(e) => trace.fallback_events.push(FallbackEvent::BboxParseFailed { reason: e.to_string() }),
        }
        trace.grounding_raw = Some(grounding);

        let mut view = image.payload.clone();
        if opts.use_crop {
            let region = match &trace.parsed_box {
                Some(b) => compute_crop(b, dims, &self.crop.with_mode(opts.crop_mode))?,
                None => CropRegion::full(dims),
            };
            if !region.is_full(dims) {
                let local = extract_crop(&image.pixels, &region)?;
                view = ImagePayload::from_rgb(&local).with_provenance(Provenance {
                    source: image.payload.digest(),
                    region: region.region,
                });
            }
            trace.crop_region = Some(region);
        }

        // 3. fine-grained observation
        let caption = trace.caption_answer.as_deref().map(str::trim).filter(|c| !c.is_empty());
        if opts.use_caption && caption.is_none() {
            trace.fallback_events.push(FallbackEvent::EmptyCaption);
        }
        let mut prompt = match caption {
            Some(c) => prompting::assemble_observation(&self.prompts, c, question)?,
            None => AssembledPrompt {
                stage: Stage::Observation,
                text: prompting::assemble_direct(question)?.text,
            },
        };
        if !opts.use_crop {
            if let Some(b) = &trace.parsed_box {
                prompt = prompting::with_region_hint(prompt, b);
            }
        }
        trace.final_answer = self.call(&mut trace, &view, prompt, params)?;
        Ok(trace)
    }
}

fn vote_key(answer: &str) -> String {
    answer.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Most frequent answer after case-folding and whitespace collapse; ties go
/// to the lexicographically smallest normalized form. Returns the first
/// original spelling of the winner.
pub fn majority_vote(answers: &[String]) -> Option<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(vote_key(a)).or_default() += 1;
    }
    // BTreeMap iterates in key order, so the first max is the smallest key.
    let mut best: Option<(&String, usize)> = None;
    for (key, &count) in &counts {
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((key, count));
        }
    }
    let (winner, _) = best?;
    answers.iter().find(|a| &vote_key(a) == winner).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use std::sync::Arc;

    fn image() -> LoadedImage {
        let mut px = RasterImage::from_pixel(800, 600, image::Rgb([240, 240, 240]));
        px.put_pixel(400, 300, image::Rgb([0, 0, 0]));
        LoadedImage::from_rgb(px)
    }

    fn pipeline(client: &Client) -> Pipeline<'_> {
        Pipeline::new(client, PromptSet::default(), CropConfig::default())
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn strategy_labels_round_trip() {
        for label in [
            "direct",
            "zscot",
            "cot_sc:5",
            "cot_sc:1",
            "textcot",
            "textcot:no-caption",
            "textcot:no-crop,no-caption",
            "textcot:mode=strict_rect",
            "textcot:no-caption,mode=full_image",
        ] {
            let parsed: Strategy = label.parse().unwrap();
            assert_eq!(parsed.to_string(), label);
        }
        assert_eq!("cot_sc".parse::<Strategy>().unwrap(), Strategy::CotSc { paths: 5 });
        assert!("cot_sc:0".parse::<Strategy>().is_err());
        assert!("textcot:zoom".parse::<Strategy>().is_err());
        assert!("vote".parse::<Strategy>().is_err());
    }

    #[test]
    fn votes() {
        assert_eq!(majority_vote(&s(&["A", "A", "B", "A", "C"])).unwrap(), "A");
        assert_eq!(majority_vote(&s(&["B", "B", "A", "A", "C"])).unwrap(), "A");
        assert_eq!(majority_vote(&s(&["x  Y", "X y", "z"])).unwrap(), "x  Y");
        assert_eq!(majority_vote(&[]), None);
    }

    #[test]
    fn direct_is_one_call() {
        let client = Client::new(Arc::new(MockBackend::default().scripted(["Seven"])));
        let t = pipeline(&client).run_direct("s1", "What number?", &image()).unwrap();
        assert_eq!(t.calls.len(), 1);
        assert_eq!(t.final_answer, "Seven");
        assert!(t.caption_answer.is_none() && t.parsed_box.is_none());
        assert!(matches!(
            pipeline(&client).run_direct("s1", " ", &image()),
            Err(PipelineError::Prompt(PromptError::EmptyQuestion))
        ));
    }

    #[test]
    fn zscot_feeds_reasoning_back() {
        let reasoning = "Step 1: find the sign. Step 2: read it.";
        let client = Client::new(Arc::new(MockBackend::default().scripted([reasoning, "OPEN"])));
        let t = pipeline(&client).run_zscot("s", "What does it say?", &image()).unwrap();
        assert_eq!(t.calls.len(), 2);
        assert!(t.calls[0].prompt.text.ends_with("Let's think step-by-step."));
        assert!(t.calls[1].prompt.text.contains(reasoning));
        assert_eq!(t.calls[1].prompt.stage, Stage::ZscotExtract);
        assert_eq!(t.final_answer, "OPEN");
        assert!(t.calls.iter().all(|c| c.params.temperature == 0.0));
    }

    #[test]
    fn zscot_empty_reasoning_falls_back() {
        let client = Client::new(Arc::new(MockBackend::default().scripted(["   ", "direct answer"])));
        let t = pipeline(&client).run_zscot("s", "Q?", &image()).unwrap();
        assert_eq!(t.fallback_events, vec![FallbackEvent::EmptyReasoning { path: 0 }]);
        assert_eq!(t.calls[1].prompt.stage, Stage::BaselineDirect);
        assert_eq!(t.final_answer, "direct answer");
    }

    #[test]
    fn cot_sc_majority_and_tie() {
        let reasons = ["r1", "r2", "r3", "r4", "r5"];
        let run = |answers: [&str; 5]| {
            let script: Vec<&str> = reasons.iter().copied().chain(answers).collect();
            let client = Client::new(Arc::new(MockBackend::default().scripted(script)));
            pipeline(&client).run_cot_sc("s", "Q?", &image(), 5).unwrap()
        };
        let t = run(["A", "A", "B", "A", "C"]);
        assert_eq!(t.final_answer, "A");
        assert_eq!(t.calls.len(), 10);
        assert!(t.calls.iter().all(|c| c.params.temperature == 0.7));
        let seeds: Vec<Option<u64>> = t.calls[..5].iter().map(|c| c.params.seed).collect();
        assert_eq!(seeds, vec![Some(0), Some(1), Some(2), Some(3), Some(4)]);
        assert_eq!(run(["B", "B", "A", "A", "C"]).final_answer, "A");
    }

    #[test]
    fn cot_sc_single_path_matches_zscot() {
        let mock = || {
            MockBackend::default()
                .with_responses(Stage::ZscotReason, ["thinking"])
                .with_responses(Stage::ZscotExtract, ["42"])
        };
        let a = Client::new(Arc::new(mock()));
        let b = Client::new(Arc::new(mock()));
        let sc = pipeline(&a).run_cot_sc("s", "Q?", &image(), 1).unwrap();
        let zs = pipeline(&b).run_zscot("s", "Q?", &image()).unwrap();
        assert_eq!(sc.final_answer, zs.final_answer);
        assert_eq!(sc.calls.len(), zs.calls.len());
    }

    #[test]
    fn textcot_three_calls_with_crop() {
        let client = Client::new(Arc::new(
            MockBackend::default().scripted(["A street at night.", "[0.45, 0.45, 0.55, 0.55]", "EXIT"]),
        ));
        let q = "What does the sign say?";
        let t = pipeline(&client).run_textcot("s", q, &image(), TextCotOptions::default()).unwrap();
        assert_eq!(t.calls.len(), 3);
        assert_eq!(t.caption_answer.as_deref(), Some("A street at night."));
        assert_eq!(t.parsed_box, Some(PixelBox::new(360, 270, 440, 330).unwrap()));
        let crop = t.crop_region.unwrap();
        assert_eq!(crop.region.width(), 448);
        assert_eq!(t.calls[2].image.width, 448);
        assert_eq!(t.calls[2].image.provenance.unwrap().region, crop.region);
        let obs = &t.calls[2].prompt.text;
        assert!(obs.starts_with("This is the context of the scene: A street at night.\n"));
        assert!(obs.ends_with(q));
        assert!(t.calls[1].prompt.text.contains(q));
        assert_eq!(t.final_answer, "EXIT");
    }

    #[test]
    fn textcot_parse_failure_falls_back_to_full_image() {
        let client = Client::new(Arc::new(MockBackend::default().scripted([
            "no box",
            "FALLBACK",
        ])));
        let opts = TextCotOptions {
            use_caption: false,
            ..TextCotOptions::default()
        };
        let t = pipeline(&client).run_textcot("s", "Q?", &image(), opts).unwrap();
        assert!(matches!(t.fallback_events[..], [FallbackEvent::BboxParseFailed { .. }]));
        assert_eq!(t.crop_region, Some(CropRegion::full(ImageDims::new(800, 600).unwrap())));
        assert_eq!(t.calls[1].image.digest, image().payload.digest());
        assert_eq!(t.calls[1].prompt.text, "Q?");
        assert_eq!(t.final_answer, "FALLBACK");
    }

    #[test]
    fn ground_without_crop_appends_region() {
        let client = Client::new(Arc::new(
            MockBackend::default().scripted(["[0.5, 0.5, 0.75, 0.75]", "ans"]),
        ));
        let opts = TextCotOptions {
            use_crop: false,
            use_caption: false,
            ..TextCotOptions::default()
        };
        let t = pipeline(&client).run_textcot("s", "Q?", &image(), opts).unwrap();
        assert_eq!(t.calls.len(), 2);
        assert!(t.crop_region.is_none());
        assert!(t.calls[1].prompt.text.starts_with("Q?\n"));
        assert!(t.calls[1].prompt.text.contains("[400, 300, 600, 450]"));
        assert_eq!(t.calls[1].image.width, 800);
    }

    #[test]
    fn trace_json_round_trip() {
        let client = Client::new(Arc::new(MockBackend::default()));
        let t = pipeline(&client)
            .run_textcot("s", "Q?", &image(), TextCotOptions::default())
            .unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: PipelineTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }
}
