//! Views, mask-aware pooling, the synergy contrastive loss and the
//! multi-view generative loss.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rq::{UnifiedVocabulary, BOS, PAD};
use crate::tensor::{softplus, Graph, Var};

pub const XI: f64 = 1e-7;
pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.003;

/// Drop every code token of the other modality; specials stay.
pub fn unimodal_view(tokens: &[u32], vocab: &UnifiedVocabulary, keep: Modality) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| vocab.modality_of(t).is_none_or(|m| m == keep))
        .collect()
}

/// Pooling weights for `Z = sum_t 1[y_t != PAD] h_t / (count + XI)`.
pub fn pool_weights(targets: &[u32]) -> Vec<f64> {
    let count = targets.iter().filter(|&&t| t != PAD).count() as f64;
    targets
        .iter()
        .map(|&t| if t != PAD { 1.0 / (count + XI) } else { 0.0 })
        .collect()
}

/// Pool the rows of `hidden` (`N x d`) whose target is not PAD.
pub fn pool(g: &mut Graph, hidden: Var, targets: &[u32]) -> Result<Var> {
    let (n, _) = g.dims2(hidden);
    if n != targets.len() {
        return Err(Error::shape("pool", g.shape(hidden), &[targets.len()]));
    }
    let group = pool_weights(targets).into_iter().enumerate().filter(|(_, w)| *w != 0.0).collect();
    g.gather_sum(hidden, vec![group])
}

/// `softplus((s_u - s_o) / tau)`, the stable form of
/// `-log(e^{s_o/tau} / (e^{s_o/tau} + e^{s_u/tau}))`.
pub fn synergy_value(sim_mask_ori: f64, sim_mask_uni: f64, tau: f64) -> f64 {
    softplus((sim_mask_uni - sim_mask_ori) / tau)
}

/// Row-wise contrastive loss for stacked pooled vectors; returns a vector
/// with one loss per row.
pub fn synergy_rows(g: &mut Graph, z_mask: Var, z_ori: Var, z_uni: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    let so = g.cosine_rows(z_mask, z_ori, XI)?;
    let su = g.cosine_rows(z_mask, z_uni, XI)?;
    let d = g.sub(su, so)?;
    let d = g.scale(d, 1.0 / tau);
    Ok(g.softplus(d))
}

/// Scalar loss for one triplet of pooled vectors.
pub fn synergy_contrastive(g: &mut Graph, z_mask: Var, z_ori: Var, z_uni: Var, tau: f64) -> Result<Var> {
    let rows = synergy_rows(g, z_mask, z_ori, z_uni, tau)?;
    Ok(g.sum(rows))
}

/// `L_Gen + lambda * L_Syn`. With `lambda == 0` the synergy term is left
/// out of the graph entirely.
pub fn total_loss(g: &mut Graph, l_gen: Var, l_syn: Option<Var>, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!("loss weight {lambda} is negative")));
    }
    match l_syn {
        Some(s) if lambda != 0.0 => {
            let w = g.scale(s, lambda);
            g.add(l_gen, w)
        }
        _ => Ok(l_gen),
    }
}

pub fn total_value(l_gen: f64, l_syn: f64, lambda: f64) -> f64 {
    l_gen + lambda * l_syn
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriplet {
    pub ori: Vec<u32>,
    pub mask: Vec<u32>,
    pub uni: Vec<u32>,
}

/// Decoder input and per-position targets for one sub-task: the model is
/// fed `BOS, prefix, target[..-1]` and scored on `target` only.
pub fn teacher_forcing(prefix: &[u32], target: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(1 + prefix.len() + target.len());
    input.push(BOS);
    input.extend_from_slice(prefix);
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    let mut labels = vec![PAD; prefix.len()];
    labels.extend_from_slice(target);
    (input, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct GenTerms {
    /// Sum over the three views.
    pub total: Var,
    /// NLL per view: ori, mask, uni.
    pub per_view: [Var; 3],
    /// Pooled decoder states per view.
    pub pooled: [Var; 3],
}

/// Sum of teacher-forced NLL of `target` for each view of `triplet`.
/// `prefix` holds the identifier tokens that precede the sub-task block
/// (empty for text, the text block for vision).
pub fn multiview_gen_loss(
    g: &mut Graph,
    model: &Backbone,
    vocab: &UnifiedVocabulary,
    triplet: &ViewTriplet,
    prefix: &[u32],
    target: &[u32],
    modality: Modality,
) -> Result<GenTerms> {
    if target.is_empty() {
        return Err(Error::Contract("empty target".into()));
    }
    let range = vocab.modality_range(modality);
    if let Some(t) = target.iter().find(|t| !range.contains(t)) {
        return Err(Error::Contract(format!("target token {t} is outside the {modality} block")));
    }
    let views: [&[u32]; 3] = [&triplet.ori, &triplet.mask, &triplet.uni];
    let enc = model.encode_batch(g, &views)?;
    let (input, labels) = teacher_forcing(prefix, target);
    let inputs: Vec<(usize, &[u32])> = (0..3).map(|i| (i, input.as_slice())).collect();
    let dec = model.decode_batch(g, &enc, &inputs)?;
    let len = input.len();
    let ids: Vec<usize> = labels.iter().map(|&t| t as usize).collect();
    let mut per_view = Vec::with_capacity(3);
    let mut pooled = Vec::with_capacity(3);
    for i in 0..3 {
        let logits = g.slice_rows(dec.logits, dec.starts[i], len)?;
        let ce = g.cross_entropy(logits, &ids, Some(PAD as usize))?;
        per_view.push(g.scale(ce, target.len() as f64));
        let hidden = g.slice_rows(dec.hidden, dec.starts[i], len)?;
        pooled.push(pool(g, hidden, &labels)?);
    }
    let s = g.add(per_view[0], per_view[1])?;
    let total = g.add(s, per_view[2])?;
    Ok(GenTerms {
        total,
        per_view: [per_view[0], per_view[1], per_view[2]],
        pooled: [pooled[0], pooled[1], pooled[2]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert!((synergy_value(0.3, 0.3, DEFAULT_TAU) - 2f64.ln()).abs() < 1e-12);
        assert!(synergy_value(1.0, -1.0, DEFAULT_TAU) < 1e-12);
        assert!((total_value(2.0, 0.5, DEFAULT_LAMBDA) - 2.0015).abs() < 1e-15);
    }

    #[test]
    fn all_pad_pools_to_zero() {
        let mut g = Graph::new();
        let h = g.constant(vec![2, 3], vec![1.0; 6]).unwrap();
        let z = pool(&mut g, h, &[PAD, PAD]).unwrap();
        assert_eq!(g.data(z), &[0.0; 3]);
    }

    #[test]
    fn unimodal_drops_other_block() {
        let v = UnifiedVocabulary::new(1, 4);
        let t = v.token(Modality::Text, 1, 2).unwrap();
        let x = v.token(Modality::Vision, 1, 1).unwrap();
        assert_eq!(unimodal_view(&[t, x, t, x, 2], &v, Modality::Text), vec![t, t, 2]);
        assert_eq!(unimodal_view(&[t, x, 2], &v, Modality::Vision), vec![x, 2]);
    }
}
