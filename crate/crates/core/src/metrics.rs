//! Frame consistency and textual alignment over unit feature vectors,
//! reported ×100. Scores depend on the toy embedder and are only comparable
//! between runs of this engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frame_consistency: f64,
    pub textual_alignment: f64,
    pub n_frames: usize,
    pub seed: u64,
    pub config_fingerprint: String,
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::InvalidRange(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine similarity over all unordered frame pairs, ×100.
pub fn frame_consistency(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::InvalidRange(format!("frame consistency needs at least 2 frames, got {}", features.len())));
    }
    for (k, f) in features.iter().enumerate() {
        check_unit(f, &format!("frame feature {k}"))?;
        if f.len() != features[0].len() {
            return Err(Error::shape(features[0].len(), f.len()));
        }
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..features.len() {
        for k in j + 1..features.len() {
            total += dot(&features[j], &features[k]);
            pairs += 1;
        }
    }
    Ok(100.0 * total / pairs as f64)
}

/// Mean cosine similarity between each frame and the text feature, ×100.
pub fn textual_alignment(features: &[Vec<f64>], text: &[f64]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::InvalidRange("textual alignment needs at least 1 frame".into()));
    }
    check_unit(text, "text feature")?;
    let mut total = 0.0;
    for (k, f) in features.iter().enumerate() {
        check_unit(f, &format!("frame feature {k}"))?;
        if f.len() != text.len() {
            return Err(Error::shape(text.len(), f.len()));
        }
        total += dot(f, text);
    }
    Ok(100.0 * total / features.len() as f64)
}
