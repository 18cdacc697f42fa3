//! Performance-based synergy audit and attention-share reports.

use std::fmt::Write as _;

use crate::backbone::{Backbone, PrefixTrie};
use crate::error::{Error, Result};
use crate::eval::{evaluate, history_tokens, Example, InputMode, Metric};
use crate::modality::Modality;
use crate::rq::IdentifierMap;
use crate::saliency::{modality_sets, saliency_scores};
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidReport {
    pub p_t: f64,
    pub p_v: f64,
    pub p_j: f64,
    pub s: f64,
    pub r: f64,
    pub u_t: f64,
    pub u_v: f64,
    /// `P_j < max(P_t, P_v)`: the components no longer sum to one.
    pub sub_additive: bool,
}

/// Normalized components from unimodal and joint scores.
pub fn normalized_pid(p_t: f64, p_v: f64, p_j: f64) -> Result<PidReport> {
    if !(p_j > 0.0) {
        return Err(Error::UndefinedDecomposition(p_j));
    }
    if !(p_t >= 0.0 && p_v >= 0.0) {
        return Err(Error::Contract(format!("unimodal scores ({p_t}, {p_v}) must be non-negative")));
    }
    let hi = p_t.max(p_v);
    let lo = p_t.min(p_v);
    Ok(PidReport {
        p_t,
        p_v,
        p_j,
        s: (p_j - hi).max(0.0) / p_j,
        r: lo / p_j,
        u_t: (p_t - lo) / p_j,
        u_v: (p_v - lo) / p_j,
        sub_additive: p_j < hi,
    })
}

pub const PID_HEADER: &str = "run_id,metric,P_t,P_v,P_j,S,R,U_t,U_v,flags";

impl PidReport {
    pub fn flags(&self) -> &'static str {
        if self.sub_additive {
            "sub_additive"
        } else {
            ""
        }
    }

    pub fn csv_row(&self, run_id: &str, metric: Metric) -> String {
        format!(
            "{run_id},{metric},{},{},{},{},{},{},{},{}",
            self.p_t,
            self.p_v,
            self.p_j,
            self.s,
            self.r,
            self.u_t,
            self.u_v,
            self.flags()
        )
    }

    pub fn to_csv(&self, run_id: &str, metric: Metric) -> String {
        format!("{PID_HEADER}\n{}\n", self.csv_row(run_id, metric))
    }
}

/// Score the model with text-only, vision-only and full inputs and
/// decompose. Unimodal inputs drop the other modality's tokens.
pub fn audit_model(
    model: &Backbone,
    map: &IdentifierMap,
    examples: &[Example],
    metric: Metric,
    beam: usize,
) -> Result<PidReport> {
    if metric.k() > beam {
        return Err(Error::Config(format!("{metric} needs a beam of at least {}", metric.k())));
    }
    let trie = PrefixTrie::from_map(map)?;
    let score = |mode| -> Result<f64> { Ok(metric.mean(&evaluate(model, map, &trie, examples, beam, mode)?.ranks)) };
    let p_t = score(InputMode::Only(Modality::Text))?;
    let p_v = score(InputMode::Only(Modality::Vision))?;
    let p_j = score(InputMode::Joint)?;
    normalized_pid(p_t, p_v, p_j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShareRow {
    /// Mean saliency per text and vision token.
    pub text_density: f64,
    pub vision_density: f64,
    /// Fraction of the content tokens' saliency mass on each modality.
    pub text_share: f64,
    pub vision_share: f64,
}

/// Shares over the modalities actually present; a sequence with no
/// content tokens, or with only one modality, gives all of it to that one
/// (text when empty).
pub fn share_row(scores: &[f64], text: &[usize], vision: &[usize]) -> ShareRow {
    let mean = |idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64
        }
    };
    let mt: f64 = text.iter().map(|&i| scores[i]).sum();
    let mv: f64 = vision.iter().map(|&i| scores[i]).sum();
    let (ts, vs) = if vision.is_empty() {
        (1.0, 0.0)
    } else if text.is_empty() {
        (0.0, 1.0)
    } else if mt + mv > 0.0 {
        (mt / (mt + mv), mv / (mt + mv))
    } else {
        (0.5, 0.5)
    };
    ShareRow {
        text_density: mean(text),
        vision_density: mean(vision),
        text_share: ts,
        vision_share: vs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionShare {
    pub rows: Vec<ShareRow>,
    pub mean_text: f64,
    pub mean_vision: f64,
    pub mean_text_density: f64,
    pub mean_vision_density: f64,
}

pub const SHARE_HEADER: &str = "sequence,l_t,l_v,share_t,share_v";

impl AttentionShare {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SHARE_HEADER}\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{}",
                r.text_density, r.vision_density, r.text_share, r.vision_share
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{},{}",
            self.mean_text_density, self.mean_vision_density, self.mean_text, self.mean_vision
        );
        out
    }
}

/// Final-layer encoder saliency per input sequence, averaged.
pub fn attention_share(model: &Backbone, map: &IdentifierMap, inputs: &[Vec<u32>]) -> Result<AttentionShare> {
    let mut rows = Vec::with_capacity(inputs.len());
    for seq in inputs {
        let mut g = Graph::inference();
        let enc = model.encode_batch(&mut g, &[seq])?;
        let maps = enc.attention_maps(&g, 0);
        let scores = saliency_scores(&maps, &enc.pad[0])?;
        let kept = &seq[seq.len() - enc.lens[0]..];
        let (t, v) = modality_sets(kept, map.vocab());
        rows.push(share_row(&scores, &t, &v));
    }
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&ShareRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(AttentionShare {
        mean_text: avg(|r| r.text_share),
        mean_vision: avg(|r| r.vision_share),
        mean_text_density: avg(|r| r.text_density),
        mean_vision_density: avg(|r| r.vision_density),
        rows,
    })
}

/// Encoder inputs for the attention-share report: each user's full
/// test history.
pub fn share_inputs(map: &IdentifierMap, examples: &[Example], max_len: usize) -> Vec<Vec<u32>> {
    examples.iter().map(|e| history_tokens(map, &e.history, max_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let p = normalized_pid(0.1, 0.1, 0.1).unwrap();
        assert_eq!((p.s, p.r, p.u_t, p.u_v), (0.0, 1.0, 0.0, 0.0));
        let p = normalized_pid(0.04, 0.02, 0.08).unwrap();
        assert!((p.s - 0.5).abs() < 1e-12 && (p.r - 0.25).abs() < 1e-12);
        assert!((p.u_t - 0.25).abs() < 1e-12 && p.u_v == 0.0);
        let p = normalized_pid(0.06, 0.02, 0.05).unwrap();
        assert!(p.sub_additive && p.s == 0.0);
        assert!(p.s + p.r + p.u_t + p.u_v > 1.0);
        assert!(matches!(normalized_pid(0.1, 0.1, 0.0), Err(Error::UndefinedDecomposition(_))));
    }

    #[test]
    fn degenerate_shares() {
        let r = share_row(&[0.5, 0.5], &[0, 1], &[]);
        assert_eq!((r.text_share, r.vision_share), (1.0, 0.0));
        let r = share_row(&[0.25; 4], &[0, 1], &[2, 3]);
        assert_eq!((r.text_share, r.vision_share), (0.5, 0.5));
    }
}
