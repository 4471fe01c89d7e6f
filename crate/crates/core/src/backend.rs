//! Pluggable model backends.
//!
//! Each foundation model the pipeline consults sits behind a small trait.
//! Every trait has a deterministic mock, and an HTTP client that speaks a
//! JSON protocol with base64 PNG payloads. Mocks that need to know what is
//! in the scene read it from the synthetic generator's oracle.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::assets::hull::{visual_hull, HullConfig};
use crate::collision::CollisionMesh;
use crate::error::{Error, Result};
use crate::raster::{
    decode_pfm, decode_png_mask, decode_png_rgb, encode_png_mask, encode_png_rgb, Mask, RgbImage, ScalarImage,
};
use crate::render::{render, RenderOptions};
use crate::restore::diffusion_fill;
use crate::scene::ply::{decode_scene, encode_scene};
use crate::scene::{CameraFrame, GaussianScene};
use crate::synth::SynthScene;

pub const API_KEY_ENV: &str = "WORLDACT_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmTask {
    Discover,
    ScoreView,
}

#[derive(Clone, Debug)]
pub struct VlmRequest {
    pub task: VlmTask,
    pub prompt: String,
    /// Frames the images come from, in order.
    pub frames: Vec<u32>,
    pub images: Vec<RgbImage>,
}

/// Vision-language model answering with a JSON document as text.
pub trait Vlm: Send + Sync {
    fn complete(&self, request: &VlmRequest) -> Result<String>;
}

/// Text-prompted video segmenter.
pub trait Segmenter: Send + Sync {
    fn segment(&self, prompt: &str, frame: u32, rgb: &RgbImage, threshold: f64) -> Result<Mask>;
}

pub trait Inpainter: Send + Sync {
    fn inpaint(&self, frame: u32, rgb: &RgbImage, mask: &Mask) -> Result<RgbImage>;
}

/// Monocular depth; returns camera-space z per pixel.
pub trait DepthEstimator: Send + Sync {
    fn depth(&self, frame: u32, rgb: &RgbImage) -> Result<ScalarImage>;
}

#[derive(Clone, Debug)]
pub struct AssetRequest {
    pub object_id: u32,
    pub frame: u32,
    pub rgb: RgbImage,
    pub mask: Mask,
    /// Rendered depth of the source view; only the mock uses it.
    pub depth: ScalarImage,
    pub camera: CameraFrame,
    pub up: [f64; 3],
}

/// Raw generator output in its own frame.
#[derive(Clone, Debug)]
pub struct GeneratedAsset {
    pub gaussians: GaussianScene,
    pub mesh: CollisionMesh,
    /// Pose predicted by the service, kept as metadata only.
    pub pose: Option<Vec<f64>>,
}

/// Single-image object generator.
pub trait AssetGenerator: Send + Sync {
    fn generate(&self, request: &AssetRequest) -> Result<GeneratedAsset>;
}

/// Image feature extractor.
pub trait Embedder: Send + Sync {
    fn embed(&self, rgb: &RgbImage) -> Result<Vec<f64>>;
}

/// `mock` or an endpoint URL for one backend.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Http(String),
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mock" => Ok(BackendKind::Mock),
            url if url.starts_with("http://") || url.starts_with("https://") => Ok(BackendKind::Http(url.to_string())),
            other => Err(Error::Config(format!("backend must be `mock` or an http(s) URL, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub vlm: BackendKind,
    /// Model name sent to a hosted VLM.
    pub vlm_model: String,
    pub segmenter: BackendKind,
    pub inpainter: BackendKind,
    pub depth: BackendKind,
    pub asset: BackendKind,
    pub embedder: BackendKind,
    pub timeout_s: f64,
    pub retries: u32,
    /// Concurrent backend calls per stage.
    pub max_in_flight: usize,
    /// Iterations of the mock inpainter's smoothing.
    pub mock_inpaint_iterations: usize,
    pub hull: HullConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            vlm: BackendKind::Mock,
            vlm_model: "gpt-4o".into(),
            segmenter: BackendKind::Mock,
            inpainter: BackendKind::Mock,
            depth: BackendKind::Mock,
            asset: BackendKind::Mock,
            embedder: BackendKind::Mock,
            timeout_s: 120.0,
            retries: 2,
            max_in_flight: 4,
            mock_inpaint_iterations: 200,
            hull: HullConfig::default(),
        }
    }
}

impl BackendsConfig {
    /// Apply a `name=mock|url` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (name, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected name=mock|url, got `{assignment}`")))?;
        let kind: BackendKind = value.parse()?;
        let slot = match name.trim() {
            "vlm" => &mut self.vlm,
            "segmenter" => &mut self.segmenter,
            "inpainter" => &mut self.inpainter,
            "depth" => &mut self.depth,
            "asset" => &mut self.asset,
            "embedder" => &mut self.embedder,
            other => return Err(Error::Config(format!("unknown backend `{other}`"))),
        };
        *slot = kind;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::Config("backend timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        self.hull.validate()
    }

    fn any_mock_needs_oracle(&self) -> bool {
        [&self.vlm, &self.segmenter, &self.depth].iter().any(|k| **k == BackendKind::Mock)
    }
}

/// The full set of clients used by a pipeline run.
#[derive(Clone)]
pub struct Backends {
    pub vlm: Arc<dyn Vlm>,
    pub segmenter: Arc<dyn Segmenter>,
    pub inpainter: Arc<dyn Inpainter>,
    pub depth: Arc<dyn DepthEstimator>,
    pub asset: Arc<dyn AssetGenerator>,
    pub embedder: Arc<dyn Embedder>,
    pub max_in_flight: usize,
}

impl Backends {
    /// All mocks, backed by a generated scene.
    pub fn mock(oracle: Arc<SynthScene>) -> Self {
        Self::from_config(&BackendsConfig::default(), Some(oracle)).expect("mocks with an oracle always build")
    }

    pub fn from_config(cfg: &BackendsConfig, oracle: Option<Arc<SynthScene>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.any_mock_needs_oracle() && oracle.is_none() {
            return Err(Error::Config(
                "mock vlm, segmenter and depth backends need the scene's oracle.json".into(),
            ));
        }
        let http = |url: &String| HttpClient::new(url, cfg.timeout_s, cfg.retries);
        let need = || oracle.clone().expect("checked above");
        let vlm: Arc<dyn Vlm> = match &cfg.vlm {
            BackendKind::Mock => Arc::new(MockVlm { oracle: need() }),
            BackendKind::Http(u) => Arc::new(HttpVlm {
                client: http(u),
                model: cfg.vlm_model.clone(),
            }),
        };
        let segmenter: Arc<dyn Segmenter> = match &cfg.segmenter {
            BackendKind::Mock => Arc::new(MockSegmenter { oracle: need() }),
            BackendKind::Http(u) => Arc::new(http(u)),
        };
        let inpainter: Arc<dyn Inpainter> = match &cfg.inpainter {
            BackendKind::Mock => Arc::new(MockInpainter {
                iterations: cfg.mock_inpaint_iterations,
            }),
            BackendKind::Http(u) => Arc::new(http(u)),
        };
        let depth: Arc<dyn DepthEstimator> = match &cfg.depth {
            BackendKind::Mock => Arc::new(MockDepth { oracle: need() }),
            BackendKind::Http(u) => Arc::new(http(u)),
        };
        let asset: Arc<dyn AssetGenerator> = match &cfg.asset {
            BackendKind::Mock => Arc::new(MockAsset { cfg: cfg.hull.clone() }),
            BackendKind::Http(u) => Arc::new(http(u)),
        };
        let embedder: Arc<dyn Embedder> = match &cfg.embedder {
            BackendKind::Mock => Arc::new(MockEmbedder),
            BackendKind::Http(u) => Arc::new(http(u)),
        };
        Ok(Self {
            vlm,
            segmenter,
            inpainter,
            depth,
            asset,
            embedder,
            max_in_flight: cfg.max_in_flight,
        })
    }
}

/// Map `f` over `items` with at most `limit` calls running at once. Results
/// keep the input order; the first error (in input order) is returned.
pub fn bounded_map<T, R, F>(items: &[T], limit: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<R>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

// ---------------------------------------------------------------- mocks

/// Names what the oracle shows in each frame and scores views with a
/// coverage heuristic.
pub struct MockVlm {
    pub oracle: Arc<SynthScene>,
}

impl Vlm for MockVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String> {
        match request.task {
            VlmTask::Discover => {
                let mut objects = Vec::new();
                for o in &self.oracle.objects {
                    if !o.discoverable {
                        continue;
                    }
                    let stack = &self.oracle.masks[(o.id - 1) as usize];
                    let seen = request.frames.iter().any(|f| stack.get(*f).is_some_and(Mask::any));
                    if seen {
                        objects.push(json!({
                            "name": o.name,
                            "category": if o.portable { "portable" } else { "fixed" },
                            "count": 1,
                            "recognizability": "precise",
                        }));
                    }
                }
                Ok(json!({ "objects": objects }).to_string())
            }
            VlmTask::ScoreView => {
                let mask_img = request
                    .images
                    .get(1)
                    .ok_or_else(|| Error::Argument("view scoring needs a frame and a mask image".into()))?;
                let mask = mask_img.map(|c| c[0] > 0.5);
                let score = coverage_score(&mask);
                Ok(json!({
                    "score": score,
                    "rationale": format!("covers {:.1}% of the frame", 100.0 * mask.count() as f64 / mask.len() as f64),
                })
                .to_string())
            }
        }
    }
}

/// round(100 × area fraction × fraction of the outline not cut by the image border).
pub fn coverage_score(mask: &Mask) -> i64 {
    let (w, h) = mask.dims();
    let (mut outline, mut clipped) = (0usize, 0usize);
    for row in 0..h {
        for col in 0..w {
            if !*mask.get(row, col) {
                continue;
            }
            let sides = [
                (row as isize - 1, col as isize),
                (row as isize + 1, col as isize),
                (row as isize, col as isize - 1),
                (row as isize, col as isize + 1),
            ];
            for (r, c) in sides {
                if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                    outline += 1;
                    clipped += 1;
                } else if !*mask.get(r as usize, c as usize) {
                    outline += 1;
                }
            }
        }
    }
    if outline == 0 {
        return 0;
    }
    let area = mask.count() as f64 / mask.len() as f64;
    let unclipped = 1.0 - clipped as f64 / outline as f64;
    (100.0 * area * unclipped).round() as i64
}

/// Returns the oracle's visible silhouette of whichever object the prompt names.
pub struct MockSegmenter {
    pub oracle: Arc<SynthScene>,
}

impl Segmenter for MockSegmenter {
    fn segment(&self, prompt: &str, frame: u32, rgb: &RgbImage, _threshold: f64) -> Result<Mask> {
        let empty = Mask::filled(rgb.width(), rgb.height(), false);
        let Some(o) = self.oracle.object_by_prompt(prompt) else {
            return Ok(empty);
        };
        Ok(self.oracle.masks[(o.id - 1) as usize].get(frame).cloned().unwrap_or(empty))
    }
}

/// Fills holes by diffusing the surrounding colours inward.
pub struct MockInpainter {
    pub iterations: usize,
}

impl Inpainter for MockInpainter {
    fn inpaint(&self, _frame: u32, rgb: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        diffusion_fill(rgb, mask, self.iterations)
    }
}

/// Expected depth of the empty room as seen from the frame's camera.
pub struct MockDepth {
    pub oracle: Arc<SynthScene>,
}

impl DepthEstimator for MockDepth {
    fn depth(&self, frame: u32, _rgb: &RgbImage) -> Result<ScalarImage> {
        let cam = self
            .oracle
            .trajectory
            .get(frame)
            .ok_or_else(|| Error::Data(format!("mock depth: no camera for frame {frame}")))?;
        Ok(render(&self.oracle.background, cam, &RenderOptions::default()).depth)
    }
}

/// Closed visual hull extruded from the view's depth.
pub struct MockAsset {
    pub cfg: HullConfig,
}

impl AssetGenerator for MockAsset {
    fn generate(&self, r: &AssetRequest) -> Result<GeneratedAsset> {
        let (gaussians, mesh) = visual_hull(&r.rgb, &r.mask, &r.depth, &r.camera, &r.up.into(), &self.cfg)?;
        Ok(GeneratedAsset {
            gaussians,
            mesh,
            pose: None,
        })
    }
}

/// 16×16 grayscale thumbnail, mean-centred.
pub struct MockEmbedder;

pub const EMBED_SIDE: usize = 16;

impl Embedder for MockEmbedder {
    fn embed(&self, rgb: &RgbImage) -> Result<Vec<f64>> {
        let (w, h) = rgb.dims();
        if w == 0 || h == 0 {
            return Err(Error::Argument("cannot embed an empty image".into()));
        }
        let mut out = vec![0.0; EMBED_SIDE * EMBED_SIDE];
        let mut counts = vec![0usize; EMBED_SIDE * EMBED_SIDE];
        for row in 0..h {
            for col in 0..w {
                let c = rgb.get(row, col);
                let cell = (row * EMBED_SIDE / h) * EMBED_SIDE + col * EMBED_SIDE / w;
                out[cell] += 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
                counts[cell] += 1;
            }
        }
        for (v, n) in out.iter_mut().zip(counts) {
            if n > 0 {
                *v /= n as f64;
            }
        }
        Ok(out)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

// ---------------------------------------------------------------- http

/// JSON-over-HTTP client with retries.
#[derive(Clone)]
pub struct HttpClient {
    url: String,
    agent: ureq::Agent,
    retries: u32,
    api_key: Option<String>,
}

impl HttpClient {
    pub fn new(url: &str, timeout_s: f64, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.trim_end_matches('/').to_string(),
            agent,
            retries,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POST `body` to `url` + `path`; transport failures, 429 and 5xx are
    /// retried, other statuses and malformed JSON are not.
    pub fn post(&self, path: &str, body: &Value, frame: Option<u32>) -> Result<Value> {
        let url = format!("{}{}", self.url, path);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body, frame) {
                Err(Error::Transport {
                    message,
                    frame,
                    retryable: true,
                }) if attempt < self.retries => {
                    attempt += 1;
                    log::warn!("{url}: {message}; retry {attempt}/{}", self.retries);
                    std::thread::sleep(Duration::from_millis(50 * (1 << attempt.min(6))));
                    let _ = frame;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, url: &str, body: &Value, frame: Option<u32>) -> Result<Value> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| Error::transport(format!("{url}: {e}"), frame))?;
        let status = resp.status().as_u16();
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(1 << 30)
            .read_to_vec()
            .map_err(|e| Error::transport(format!("{url}: reading body: {e}"), frame))?;
        if status == 429 || status >= 500 {
            return Err(Error::transport(format!("{url}: status {status}"), frame));
        }
        if !(200..300).contains(&status) {
            return Err(Error::Transport {
                message: format!("{url}: status {status}: {}", String::from_utf8_lossy(&bytes)),
                frame,
                retryable: false,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| Error::Protocol {
            message: format!("{url}: response is not JSON: {e}"),
            raw: String::from_utf8_lossy(&bytes).into_owned(),
        })
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Protocol {
        message: format!("response lacks `{key}`"),
        raw: v.to_string(),
    })
}

fn field_str<'a>(v: &'a Value, key: &str) -> Result<&'a str> {
    field(v, key)?.as_str().ok_or_else(|| Error::Protocol {
        message: format!("`{key}` is not a string"),
        raw: v.to_string(),
    })
}

fn field_b64(v: &Value, key: &str) -> Result<Vec<u8>> {
    B64.decode(field_str(v, key)?).map_err(|e| Error::Protocol {
        message: format!("`{key}` is not base64: {e}"),
        raw: v.to_string(),
    })
}

fn b64_rgb(image: &RgbImage) -> Result<String> {
    Ok(B64.encode(encode_png_rgb(image)?))
}

fn b64_mask(mask: &Mask) -> Result<String> {
    Ok(B64.encode(encode_png_mask(mask)?))
}

fn check_dims(what: &str, got: (usize, usize), want: (usize, usize), raw: &Value) -> Result<()> {
    if got != want {
        return Err(Error::Protocol {
            message: format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1),
            raw: raw.to_string(),
        });
    }
    Ok(())
}

impl Segmenter for HttpClient {
    fn segment(&self, prompt: &str, frame: u32, rgb: &RgbImage, threshold: f64) -> Result<Mask> {
        let body = json!({ "frame_index": frame, "image": b64_rgb(rgb)?, "prompt": prompt, "threshold": threshold });
        let v = self.post("", &body, Some(frame))?;
        let mask = decode_png_mask(&field_b64(&v, "mask")?)?;
        check_dims("mask", mask.dims(), rgb.dims(), &v)?;
        Ok(mask)
    }
}

impl Inpainter for HttpClient {
    fn inpaint(&self, frame: u32, rgb: &RgbImage, mask: &Mask) -> Result<RgbImage> {
        let body = json!({ "frame_index": frame, "image": b64_rgb(rgb)?, "mask": b64_mask(mask)? });
        let v = self.post("", &body, Some(frame))?;
        let out = decode_png_rgb(&field_b64(&v, "image")?)?;
        check_dims("inpainted frame", out.dims(), rgb.dims(), &v)?;
        Ok(out)
    }
}

impl DepthEstimator for HttpClient {
    fn depth(&self, frame: u32, rgb: &RgbImage) -> Result<ScalarImage> {
        let body = json!({ "frame_index": frame, "image": b64_rgb(rgb)? });
        let v = self.post("", &body, Some(frame))?;
        let d = decode_pfm(&field_b64(&v, "depth")?)?;
        check_dims("depth", d.dims(), rgb.dims(), &v)?;
        Ok(d)
    }
}

impl AssetGenerator for HttpClient {
    fn generate(&self, r: &AssetRequest) -> Result<GeneratedAsset> {
        let body = json!({
            "object_id": r.object_id,
            "frame_index": r.frame,
            "image": b64_rgb(&r.rgb)?,
            "mask": b64_mask(&r.mask)?,
        });
        let v = self.post("", &body, Some(r.frame))?;
        let gaussians = decode_scene(&field_b64(&v, "gaussians_ply")?)?;
        let mesh = CollisionMesh::from_obj(field_str(&v, "mesh_obj")?)?;
        let pose = v
            .get("pose")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_f64).collect());
        Ok(GeneratedAsset { gaussians, mesh, pose })
    }
}

impl Embedder for HttpClient {
    fn embed(&self, rgb: &RgbImage) -> Result<Vec<f64>> {
        let v = self.post("", &json!({ "image": b64_rgb(rgb)? }), None)?;
        let arr = field(&v, "embedding")?.as_array().ok_or_else(|| Error::Protocol {
            message: "`embedding` is not an array".into(),
            raw: v.to_string(),
        })?;
        arr.iter()
            .map(|x| {
                x.as_f64().ok_or_else(|| Error::Protocol {
                    message: "embedding entry is not a number".into(),
                    raw: v.to_string(),
                })
            })
            .collect()
    }
}

/// OpenAI-compatible chat completion endpoint.
pub struct HttpVlm {
    pub client: HttpClient,
    pub model: String,
}

impl Vlm for HttpVlm {
    fn complete(&self, request: &VlmRequest) -> Result<String> {
        let mut content = vec![json!({ "type": "text", "text": request.prompt })];
        for img in &request.images {
            content.push(json!({
                "type": "image_url",
                "image_url": { "url": format!("data:image/png;base64,{}", b64_rgb(img)?) },
            }));
        }
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": content }],
            "response_format": { "type": "json_object" },
            "temperature": 0,
        });
        let v = self.client.post("/chat/completions", &body, request.frames.first().copied())?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Protocol {
                message: "chat completion has no choices[0].message.content".into(),
                raw: v.to_string(),
            })
    }
}

/// Encode a Gaussian scene and mesh the way the asset service returns them;
/// used by test servers.
pub fn asset_response(gaussians: &GaussianScene, mesh: &CollisionMesh) -> Result<Value> {
    Ok(json!({
        "gaussians_ply": B64.encode(encode_scene(gaussians)?),
        "mesh_obj": mesh.to_obj(),
    }))
}

/// Frame → depth map helper for callers holding several frames.
pub fn depth_for_frames(
    depth: &dyn DepthEstimator,
    frames: &BTreeMap<u32, RgbImage>,
    keys: &[u32],
    limit: usize,
) -> Result<BTreeMap<u32, ScalarImage>> {
    let maps = bounded_map(keys, limit, |k| {
        let rgb = frames
            .get(k)
            .ok_or_else(|| Error::Data(format!("no frame {k} to estimate depth for")))?;
        depth.depth(*k, rgb)
    })?;
    Ok(keys.iter().copied().zip(maps).collect())
}
