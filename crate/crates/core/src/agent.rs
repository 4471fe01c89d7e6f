//! Object discovery and mask collection driven by a VLM and a prompted
//! segmenter.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{score_views, select_best_view, ViewScore};
use crate::backend::{bounded_map, Backends, Segmenter, Vlm, VlmRequest, VlmTask};
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::scene::{Label, Trajectory};
use crate::segment::MaskStack;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Portable,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recognizability {
    Precise,
    Subtle,
    Unrecognizable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    Discovered,
    Masked,
    Scored,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub name: String,
    pub category: Category,
    pub count: u32,
    pub recognizability: Recognizability,
    pub state: EntryState,
}

impl InventoryEntry {
    /// Move forward in the state order; going back or staying put is an error.
    pub fn advance(&mut self, to: EntryState) -> Result<()> {
        if to <= self.state {
            return Err(Error::Argument(format!(
                "inventory entry `{}` cannot go from {:?} to {:?}",
                self.name, self.state, to
            )));
        }
        self.state = to;
        Ok(())
    }
}

/// Prompts of the prompt-free baseline.
pub const GENERIC_PROMPTS: [&str; 20] = [
    "chair", "table", "cup", "bottle", "book", "lamp", "box", "bowl", "plate", "vase", "pillow", "bag", "plant",
    "laptop", "phone", "remote", "clock", "shoe", "toy", "basket",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    /// Ask the VLM which objects the keyframes show.
    #[default]
    Agent,
    /// Segment a fixed list of generic prompts instead.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub mode: DiscoveryMode,
    /// Discovery looks at this many evenly spaced keyframes at most.
    pub discovery_keyframes: usize,
    /// Segmenter confidence threshold, passed through to the backend.
    pub segmenter_threshold: f64,
    /// Mask stacks with at least this mean IoU are duplicates.
    pub dedup_iou: f64,
    pub baseline_prompts: Vec<String>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            mode: DiscoveryMode::Agent,
            discovery_keyframes: 12,
            segmenter_threshold: 0.5,
            dedup_iou: 0.8,
            baseline_prompts: GENERIC_PROMPTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.discovery_keyframes == 0 {
            return Err(Error::Config("agent: discovery_keyframes must be positive".into()));
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config("agent: dedup_iou must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.segmenter_threshold) {
            return Err(Error::Config("agent: segmenter_threshold must lie in [0, 1]".into()));
        }
        if self.mode == DiscoveryMode::Baseline && self.baseline_prompts.is_empty() {
            return Err(Error::Config("agent: baseline mode needs prompts".into()));
        }
        Ok(())
    }
}

/// One backend call as recorded in `agent.log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub stage: String,
    pub request: String,
    pub response: String,
    pub latency_ms: f64,
    pub ok: bool,
}

/// Call records kept in a deterministic order: by stage sequence, then by
/// the item's position within the stage.
#[derive(Default)]
pub struct CallLog {
    records: Mutex<Vec<((usize, usize), CallRecord)>>,
}

impl CallLog {
    fn push(&self, key: (usize, usize), record: CallRecord) {
        self.records.lock().expect("log lock").push((key, record));
    }

    pub fn records(&self) -> Vec<CallRecord> {
        let mut r = self.records.lock().expect("log lock").clone();
        r.sort_by_key(|(k, _)| *k);
        r.into_iter().map(|(_, r)| r).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in self.records() {
            out += &serde_json::to_string(&r)?;
            out.push('\n');
        }
        Ok(out)
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..12])
}

fn image_bytes(img: &RgbImage) -> Vec<u8> {
    img.data().iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect()
}

fn mask_bytes(m: &Mask) -> Vec<u8> {
    m.data().iter().map(|&b| b as u8).collect()
}

fn logged<T>(
    log: &CallLog,
    key: (usize, usize),
    stage: &str,
    request: String,
    call: impl FnOnce() -> Result<T>,
    describe: impl FnOnce(&T) -> String,
) -> Result<T> {
    let start = Instant::now();
    let out = call();
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let response = match &out {
        Ok(v) => describe(v),
        Err(e) => digest(&[e.to_string().as_bytes()]),
    };
    log.push(
        key,
        CallRecord {
            stage: stage.into(),
            request,
            response,
            latency_ms,
            ok: out.is_ok(),
        },
    );
    out.map_err(|e| e.in_stage(stage))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryReply {
    objects: Vec<InventoryItem>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InventoryItem {
    name: String,
    category: Category,
    count: u32,
    recognizability: Recognizability,
}

/// Strict parse of a discovery reply; anything but the expected JSON is a
/// protocol error carrying the raw text.
pub fn parse_inventory(raw: &str) -> Result<Vec<InventoryEntry>> {
    let protocol = |message: String| Error::Protocol {
        message,
        raw: raw.to_string(),
    };
    let reply: InventoryReply =
        serde_json::from_str(raw).map_err(|e| protocol(format!("discovery reply is not the expected JSON: {e}")))?;
    reply
        .objects
        .into_iter()
        .map(|o| {
            let name = o.name.trim().to_lowercase();
            if name.is_empty() {
                return Err(protocol("discovery reply names an object with an empty name".into()));
            }
            if o.count == 0 {
                return Err(protocol(format!("object `{name}` has count 0")));
            }
            Ok(InventoryEntry {
                name,
                category: o.category,
                count: o.count,
                recognizability: o.recognizability,
                state: EntryState::Discovered,
            })
        })
        .collect()
}

/// Evenly spaced keyframes: every max(1, T / n)-th frame.
pub fn discovery_keyframes(frames: &[u32], n: usize) -> Vec<u32> {
    let step = (frames.len() / n.max(1)).max(1);
    frames.iter().step_by(step).copied().collect()
}

/// Merge per-keyframe inventories: one entry per name, in first-seen order.
/// Counts take the maximum, since one keyframe can show every instance.
pub fn merge_inventories(lists: Vec<Vec<InventoryEntry>>) -> Vec<InventoryEntry> {
    let mut out: Vec<InventoryEntry> = Vec::new();
    for e in lists.into_iter().flatten() {
        match out.iter_mut().find(|o| o.name == e.name) {
            Some(o) => {
                o.count = o.count.max(e.count);
                if e.category == Category::Portable {
                    o.category = Category::Portable;
                }
            }
            None => out.push(e),
        }
    }
    out
}

const DISCOVER_PROMPT: &str = "List every distinct physical object visible in this image that a person could \
interact with. For each give its common name, whether it is portable (can be picked up and moved) or fixed, \
how many instances are visible, and how recognizable it is (precise, subtle or unrecognizable). Answer with \
JSON only: {\"objects\": [{\"name\": str, \"category\": \"portable\"|\"fixed\", \"count\": int, \
\"recognizability\": \"precise\"|\"subtle\"|\"unrecognizable\"}]}.";

pub fn discover_objects(
    frames: &BTreeMap<u32, RgbImage>,
    vlm: &dyn Vlm,
    cfg: &AgentConfig,
    max_in_flight: usize,
    log: &CallLog,
) -> Result<Vec<InventoryEntry>> {
    let ids: Vec<u32> = frames.keys().copied().collect();
    if ids.is_empty() {
        return Err(Error::Argument("discovery needs at least one keyframe".into()));
    }
    let keys = discovery_keyframes(&ids, cfg.discovery_keyframes);
    let lists = bounded_map(&keys.iter().enumerate().collect::<Vec<_>>(), max_in_flight, |&(i, f)| {
        let request = VlmRequest {
            task: VlmTask::Discover,
            prompt: DISCOVER_PROMPT.into(),
            frames: vec![*f],
            images: vec![frames[f].clone()],
        };
        let req_digest = digest(&[DISCOVER_PROMPT.as_bytes(), &f.to_le_bytes(), &image_bytes(&frames[f])]);
        let raw = logged(log, (0, i), "discover", req_digest, || vlm.complete(&request), |r| digest(&[r.as_bytes()]))?;
        parse_inventory(&raw).map_err(|e| e.in_stage("discover"))
    })?;
    Ok(merge_inventories(lists))
}

/// Segment one prompt in every frame; `None` when every mask is empty.
pub fn acquire_masks(
    prompt: &str,
    object_id: Label,
    frames: &BTreeMap<u32, RgbImage>,
    trajectory: &Trajectory,
    segmenter: &dyn Segmenter,
    threshold: f64,
    log: &CallLog,
    log_key: usize,
) -> Result<Option<MaskStack>> {
    let mut masks = BTreeMap::new();
    for (i, (&f, rgb)) in frames.iter().enumerate() {
        let req = digest(&[prompt.as_bytes(), &f.to_le_bytes(), &image_bytes(rgb)]);
        let m = logged(
            log,
            (1, log_key * 100_000 + i),
            "segment",
            req,
            || segmenter.segment(prompt, f, rgb, threshold),
            |m| digest(&[&mask_bytes(m)]),
        )?;
        masks.insert(f, m);
    }
    let stack = MaskStack::new(object_id, masks)?;
    stack.validate(trajectory)?;
    Ok((!stack.view_set().is_empty()).then_some(stack))
}

/// Drop stacks that duplicate a larger one. Larger total area wins, ties go
/// to the earlier stack; survivors keep their input order.
pub fn dedup_masks(stacks: &[MaskStack], iou_threshold: f64) -> Result<Vec<usize>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Argument("dedup threshold must lie in (0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..stacks.len()).collect();
    order.sort_by(|&a, &b| stacks[b].total_area().cmp(&stacks[a].total_area()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| stacks[k].mean_iou(&stacks[i]) < iou_threshold) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// One extracted object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObject {
    pub object_id: Label,
    pub prompt: String,
    pub best_view: u32,
    pub scores: Vec<ViewScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub prompt: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub mode: DiscoveryMode,
    pub inventory: Vec<InventoryEntry>,
    pub objects: Vec<AgentObject>,
    /// Prompts that produced nothing or duplicated another object.
    pub skipped: Vec<SkippedPrompt>,
    /// Background completion runs later on the fused masks of all objects.
    pub inpainting: String,
    #[serde(skip)]
    pub masks: Vec<MaskStack>,
}

/// Discover, segment, score, deduplicate. Object ids are assigned 1.. in
/// inventory order among the survivors.
pub fn run_agent(
    frames: &BTreeMap<u32, RgbImage>,
    trajectory: &Trajectory,
    backends: &Backends,
    cfg: &AgentConfig,
    log: &CallLog,
) -> Result<AgentOutput> {
    cfg.validate()?;
    // parse the scene into an inventory, which initialises the memory
    let mut inventory = match cfg.mode {
        DiscoveryMode::Agent => discover_objects(frames, backends.vlm.as_ref(), cfg, backends.max_in_flight, log)?,
        DiscoveryMode::Baseline => merge_inventories(vec![cfg
            .baseline_prompts
            .iter()
            .map(|p| InventoryEntry {
                name: p.trim().to_lowercase(),
                category: Category::Portable,
                count: 1,
                recognizability: Recognizability::Precise,
                state: EntryState::Discovered,
            })
            .collect()]),
    };

    // masks for every portable entry
    let portable: Vec<usize> = (0..inventory.len())
        .filter(|&i| inventory[i].category == Category::Portable)
        .collect();
    let stacks = bounded_map(&portable, backends.max_in_flight, |&i| {
        acquire_masks(
            &inventory[i].name,
            i as Label + 1,
            frames,
            trajectory,
            backends.segmenter.as_ref(),
            cfg.segmenter_threshold,
            log,
            i,
        )
    })?;
    let mut skipped = Vec::new();
    let mut found: Vec<(usize, MaskStack)> = Vec::new();
    for (&i, stack) in portable.iter().zip(stacks) {
        match stack {
            Some(s) => {
                inventory[i].advance(EntryState::Masked)?;
                found.push((i, s));
            }
            None => {
                log::info!("prompt `{}` produced no mask in any frame", inventory[i].name);
                skipped.push(SkippedPrompt {
                    prompt: inventory[i].name.clone(),
                    reason: "empty in every frame".into(),
                });
            }
        }
    }

    // score views and pick the best one per entry
    let mut scored = Vec::new();
    for (i, stack) in &found {
        let scores = score_views(stack, frames, backends.vlm.as_ref(), backends.max_in_flight)
            .map_err(|e| e.in_stage("score views"))?;
        let best = select_best_view(&scores)?;
        inventory[*i].advance(EntryState::Scored)?;
        scored.push((*i, stack.clone(), scores, best));
    }

    // the stack over all frames is the aggregated mask; now deduplicate
    let all: Vec<MaskStack> = scored.iter().map(|s| s.1.clone()).collect();
    let keep = dedup_masks(&all, cfg.dedup_iou)?;
    let mut objects = Vec::new();
    let mut masks = Vec::new();
    for (k, (i, stack, scores, best)) in scored.into_iter().enumerate() {
        if !keep.contains(&k) {
            skipped.push(SkippedPrompt {
                prompt: inventory[i].name.clone(),
                reason: "duplicate of a larger mask".into(),
            });
            continue;
        }
        let id = objects.len() as Label + 1;
        let renumbered = MaskStack::new(id, stack.iter().map(|(f, m)| (f, m.clone())).collect())?;
        objects.push(AgentObject {
            object_id: id,
            prompt: inventory[i].name.clone(),
            best_view: best,
            scores: scores
                .into_iter()
                .map(|s| ViewScore { object_id: id, ..s })
                .collect(),
        });
        masks.push(renumbered);
    }
    Ok(AgentOutput {
        mode: cfg.mode,
        inventory,
        objects,
        skipped,
        inpainting: "deferred to the restore stage".into(),
        masks,
    })
}

/// Share of `truth` stacks matched by some found stack at mean IoU ≥ `iou`.
pub fn recall(found: &[MaskStack], truth: &[&MaskStack], iou: f64) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let hit = truth
        .iter()
        .filter(|t| found.iter().any(|f| f.mean_iou(t) >= iou))
        .count();
    hit as f64 / truth.len() as f64
}
