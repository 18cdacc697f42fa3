//! Attention saliency, dominant-modality diagnosis and masked views.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::backbone::AttentionMaps;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rq::{UnifiedVocabulary, MASK};

/// Received attention mass per token:
/// `l_i = 1/(M N) * sum_m sum_j A[m][j][i]` over non-pad queries `j`, with
/// `N` the non-pad length. Pad positions score 0.
pub fn saliency_scores(maps: &AttentionMaps, pad: &[bool]) -> Result<Vec<f64>> {
    let n = maps.n;
    if pad.len() != n {
        return Err(Error::shape("saliency pad mask", &[n], &[pad.len()]));
    }
    let valid = pad.iter().filter(|&&p| !p).count();
    let mut scores = vec![0.0; n];
    if valid == 0 || maps.heads == 0 {
        return Ok(scores);
    }
    for h in 0..maps.heads {
        for j in (0..n).filter(|&j| !pad[j]) {
            for (s, a) in scores.iter_mut().zip(maps.row(h, j)) {
                *s += a;
            }
        }
    }
    let norm = (maps.heads * valid) as f64;
    for (s, &p) in scores.iter_mut().zip(pad) {
        *s = if p { 0.0 } else { *s / norm };
    }
    Ok(scores)
}

/// Positions of text and vision code tokens. Specials and suffixes belong
/// to neither.
pub fn modality_sets(tokens: &[u32], vocab: &UnifiedVocabulary) -> (Vec<usize>, Vec<usize>) {
    let (mut t, mut v) = (Vec::new(), Vec::new());
    for (i, &tok) in tokens.iter().enumerate() {
        match vocab.modality_of(tok) {
            Some(Modality::Text) => t.push(i),
            Some(Modality::Vision) => v.push(i),
            None => {}
        }
    }
    (t, v)
}

fn mean_over(scores: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| scores[i]).sum::<f64>() / idx.len() as f64
}

/// `(text density, vision density, dominant)`; an exact tie goes to text.
pub fn dominant_modality(scores: &[f64], text: &[usize], vision: &[usize]) -> Result<(f64, f64, Modality)> {
    if text.is_empty() || vision.is_empty() {
        let which = if text.is_empty() { Modality::Text } else { Modality::Vision };
        return Err(Error::EmptyModality(format!("no {which} tokens to diagnose")));
    }
    let lt = mean_over(scores, text);
    let lv = mean_over(scores, vision);
    Ok((lt, lv, if lv > lt { Modality::Vision } else { Modality::Text }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyProfile {
    pub scores: Vec<f64>,
    pub text_density: f64,
    pub vision_density: f64,
    pub dominant: Modality,
    pub text_positions: Vec<usize>,
    pub vision_positions: Vec<usize>,
}

impl SaliencyProfile {
    pub fn positions(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Text => &self.text_positions,
            Modality::Vision => &self.vision_positions,
        }
    }
}

pub fn profile(tokens: &[u32], pad: &[bool], maps: &AttentionMaps, vocab: &UnifiedVocabulary) -> Result<SaliencyProfile> {
    if tokens.len() != maps.n {
        return Err(Error::shape("saliency tokens", &[maps.n], &[tokens.len()]));
    }
    let scores = saliency_scores(maps, pad)?;
    let (text_positions, vision_positions) = modality_sets(tokens, vocab);
    let (text_density, vision_density, dominant) = dominant_modality(&scores, &text_positions, &vision_positions)?;
    Ok(SaliencyProfile {
        scores,
        text_density,
        vision_density,
        dominant,
        text_positions,
        vision_positions,
    })
}

/// `ceil(r * n)`, tolerant of the float error in products like `0.3 * 10`.
pub fn mask_count(r: f64, n: usize) -> usize {
    let x = r * n as f64;
    let k = (x - 1e-9 * x.abs().max(1.0)).ceil();
    (k.max(0.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub tokens: Vec<u32>,
    /// Ascending positions replaced by MASK.
    pub masked: Vec<usize>,
    pub ratio: f64,
}

/// Mask the `ceil(r * |X_dom|)` highest-scoring dominant-modality positions;
/// equal scores prefer the lower position.
pub fn apply_mask(tokens: &[u32], profile: &SaliencyProfile, r: f64) -> Result<MaskedView> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("mask ratio {r} outside [0, 1]")));
    }
    let dom = profile.positions(profile.dominant);
    let k = mask_count(r, dom.len());
    let mut order: Vec<usize> = dom.to_vec();
    order.sort_by(|&a, &b| {
        profile.scores[b]
            .partial_cmp(&profile.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut masked: Vec<usize> = order[..k].to_vec();
    masked.sort_unstable();
    Ok(mask_positions(tokens, masked, r))
}

/// Saliency-blind masking for ablations: `k` uniformly chosen content
/// positions (either modality).
pub fn random_mask<R: Rng>(tokens: &[u32], profile: &SaliencyProfile, r: f64, rng: &mut R) -> MaskedView {
    let k = mask_count(r, profile.positions(profile.dominant).len());
    let mut pool: Vec<usize> = profile
        .text_positions
        .iter()
        .chain(&profile.vision_positions)
        .copied()
        .collect();
    pool.sort_unstable();
    let mut masked: Vec<usize> = pool.choose_multiple(rng, k.min(pool.len())).copied().collect();
    masked.sort_unstable();
    mask_positions(tokens, masked, r)
}

fn mask_positions(tokens: &[u32], masked: Vec<usize>, ratio: f64) -> MaskedView {
    let mut out = tokens.to_vec();
    for &p in &masked {
        out[p] = MASK;
    }
    MaskedView {
        tokens: out,
        masked,
        ratio,
    }
}

/// One diagnostic CSV row: `dataset,step,l_t,l_v,M_dom`.
pub fn diagnostic_row(dataset: &str, step: usize, p: &SaliencyProfile) -> String {
    format!("{dataset},{step},{},{},{}", p.text_density, p.vision_density, p.dominant)
}

pub const DIAGNOSTIC_HEADER: &str = "dataset,step,l_t,l_v,M_dom";

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(heads: usize, n: usize) -> AttentionMaps {
        AttentionMaps::new(heads, n, vec![1.0 / n as f64; heads * n * n]).unwrap()
    }

    #[test]
    fn uniform_attention() {
        let s = saliency_scores(&uniform(3, 5), &[false; 5]).unwrap();
        assert!(s.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn one_hot_attention() {
        let n = 4;
        let mut w = vec![0.0; 2 * n * n];
        for h in 0..2 {
            for j in 0..n {
                w[(h * n + j) * n] = 1.0;
            }
        }
        let s = saliency_scores(&AttentionMaps::new(2, n, w).unwrap(), &[false; 4]).unwrap();
        assert_eq!(s, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tie_goes_to_text() {
        let (_, _, m) = dominant_modality(&[0.25; 4], &[0, 1], &[2, 3]).unwrap();
        assert_eq!(m, Modality::Text);
        let (_, _, m) = dominant_modality(&[0.1, 0.1, 0.4, 0.4], &[0, 1], &[2, 3]).unwrap();
        assert_eq!(m, Modality::Vision);
        assert!(matches!(dominant_modality(&[1.0], &[0], &[]), Err(Error::EmptyModality(_))));
    }

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(0.3, 6), 2);
        assert_eq!(mask_count(0.3, 10), 3);
        assert_eq!(mask_count(0.0, 10), 0);
        assert_eq!(mask_count(1.0, 7), 7);
        assert_eq!(mask_count(0.1, 1), 1);
    }
}
