//! wasm-bindgen bindings for the static page in `www/`.
//!
//! Every export takes and returns plain numbers or JSON strings. The `*_json`
//! functions hold the logic so they can be tested on the host.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use vidground::data::{Query, Task};
use vidground::inference::{find_peaks, median_filter, temporal_nms, Candidate};
use vidground::synthgen::{concept_energy, generate_episode, make_concept_bank, GenConfig, Occurrence, Split};
use vidground::Result;

#[derive(Serialize)]
struct Peak {
    frame: usize,
    score: f64,
}

#[derive(Serialize)]
struct Smoothed {
    filtered: Vec<f64>,
    peaks: Vec<Peak>,
}

pub fn smooth_and_peaks_json(scores: &[f64], kernel: usize, threshold: f64, max_peaks: usize) -> Result<String> {
    let filtered = median_filter(scores, kernel)?;
    let peaks = find_peaks(&filtered, threshold, max_peaks)
        .into_iter()
        .map(|(frame, score)| Peak { frame, score })
        .collect();
    Ok(serde_json::to_string(&Smoothed { filtered, peaks })?)
}

#[derive(Deserialize)]
struct Seg {
    start: usize,
    end: usize,
    score: f64,
}

pub fn nms_json(candidates: &str, threshold: f64) -> Result<String> {
    let segs: Vec<Seg> = serde_json::from_str(candidates)?;
    let cands: Vec<Candidate> = segs
        .into_iter()
        .map(|s| Candidate {
            start: s.start.min(s.end),
            end: s.start.max(s.end),
            score: s.score,
            boxes: None,
        })
        .collect();
    Ok(serde_json::to_string(&temporal_nms(&cands, threshold))?)
}

#[derive(Serialize)]
struct QuerySummary {
    task: Task,
    kind: &'static str,
    concept: usize,
    segments: Vec<[usize; 2]>,
    query_frame: Option<usize>,
    /// Best pattern match of the queried concept per frame.
    energy: Vec<f64>,
}

#[derive(Serialize)]
struct EpisodePreview {
    id: String,
    frames: usize,
    occurrences: Vec<Occurrence>,
    queries: Vec<QuerySummary>,
}

/// One episode of the default generator, reduced to what the page draws.
pub fn episode_json(seed: u64, index: u64) -> Result<String> {
    let cfg = GenConfig::default();
    let bank = make_concept_bank(cfg.num_concepts, cfg.pattern_size, cfg.channels, seed)?;
    let ep = generate_episode(&bank, &cfg, seed, index, Split::Val)?;
    let queries = ep
        .annotations
        .iter()
        .map(|a| QuerySummary {
            task: a.task,
            kind: match a.query {
                Query::Visual { .. } => "visual",
                Query::Text { .. } => "text",
                Query::Category { .. } => "category",
            },
            concept: a.concept,
            segments: a.segments.clone(),
            query_frame: a.query_frame,
            energy: concept_energy(&ep.video, &bank.patterns[a.concept], cfg.pattern_size),
        })
        .collect();
    Ok(serde_json::to_string(&EpisodePreview {
        id: ep.id,
        frames: ep.video.len(),
        occurrences: ep.occurrences,
        queries,
    })?)
}

fn js(r: Result<String>) -> std::result::Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn smooth_and_peaks(scores: Vec<f64>, kernel: usize, threshold: f64, max_peaks: usize) -> std::result::Result<String, JsError> {
    js(smooth_and_peaks_json(&scores, kernel, threshold, max_peaks))
}

#[wasm_bindgen]
pub fn nms(candidates: &str, threshold: f64) -> std::result::Result<String, JsError> {
    js(nms_json(candidates, threshold))
}

#[wasm_bindgen]
pub fn episode(seed: u64, index: u64) -> std::result::Result<String, JsError> {
    js(episode_json(seed, index))
}
