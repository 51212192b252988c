//! Browser bindings: synthesize a corpus, look at its interval histogram and
//! session threshold, and draw one video's community graph.
//!
//! Each operation is a plain function over strings so it can be tested
//! natively; the `#[wasm_bindgen]` wrappers only convert errors.

use std::io::Cursor;

use pathcast::cig::{build_cig, export_graph, merge_weights, CigMode, GraphFormat};
use pathcast::event_store::{read_jsonl, Corpus};
use pathcast::intervals::{fit_log_gaussian, log10_histogram, pooled_intervals, threshold_seconds};
use pathcast::synth::{generate, SynthConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn corpus(jsonl: &str) -> Result<Corpus, String> {
    read_jsonl(Cursor::new(jsonl)).map_err(|e| e.to_string())
}

/// `key = value` lines in, JSONL events out.
pub fn synth_jsonl(config: &str) -> Result<String, String> {
    let cfg = SynthConfig::parse(config).map_err(|e| e.to_string())?;
    let (corpus, _) = generate(&cfg).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    corpus.write_jsonl(&mut out).map_err(|e| e.to_string())?;
    String::from_utf8(out).map_err(|e| e.to_string())
}

/// Log-normal fit of the different-user intervals over every video, the
/// cutoff `10^(mu - c*sigma)` and a log10 histogram of both interval kinds.
pub fn interval_report(jsonl: &str, c: f64, bin_width: f64) -> Result<String, String> {
    if !(bin_width > 0.0) {
        return Err("bin width must be positive".into());
    }
    let corpus = corpus(jsonl)?;
    let seqs: Vec<_> = (0..corpus.num_videos()).map(|v| corpus.sequence(v)).collect();
    let (same, diff) = pooled_intervals(seqs.iter().map(Vec::as_slice));
    let fit = fit_log_gaussian(&diff).map_err(|e| e.to_string())?;
    let threshold = threshold_seconds(&fit, c).map_err(|e| e.to_string())?;
    let report = json!({
        "c": c,
        "fit": {"mu": fit.mu, "sigma": fit.sigma, "n": fit.n},
        "threshold_seconds": threshold,
        "threshold_log10": threshold.log10(),
        "diff_user": log10_histogram(&diff, bin_width),
        "same_user": log10_histogram(&same, bin_width),
        "videos": corpus.videos().names(),
    });
    Ok(report.to_string())
}

/// One video's merged graph as DOT or JSON.
pub fn video_graph(jsonl: &str, video: &str, threshold: f64, mode: &str, format: &str) -> Result<String, String> {
    let corpus = corpus(jsonl)?;
    let mode: CigMode = mode.parse().map_err(|e: pathcast::cig::CigError| e.to_string())?;
    let format: GraphFormat = format.parse().map_err(|e: pathcast::cig::CigError| e.to_string())?;
    let v = corpus.videos().get(video).ok_or_else(|| format!("unknown video `{video}`"))?;
    let cig = build_cig(video, &corpus.sequence(v), threshold, mode, 0).map_err(|e| e.to_string())?;
    let cig = merge_weights(cig).with_labels(|c| corpus.communities().name(c).to_string());
    Ok(export_graph(&cig, format))
}

#[wasm_bindgen]
pub fn synth(config: &str) -> Result<String, JsError> {
    synth_jsonl(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn intervals(jsonl: &str, c: f64, bin_width: f64) -> Result<String, JsError> {
    interval_report(jsonl, c, bin_width).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn graph(jsonl: &str, video: &str, threshold: f64, mode: &str, format: &str) -> Result<String, JsError> {
    video_graph(jsonl, video, threshold, mode, format).map_err(|e| JsError::new(&e))
}
