//! Beam search over item identifiers.
//!
//! Steps score tokens with the model's full-vocabulary log-softmax; suffix
//! tokens, which the model is never trained on, get a uniform share among
//! their siblings. To make the best score non-decreasing in the beam width,
//! widths `1..=B` run in lockstep and the result is the best `B` over all of
//! their finished hypotheses. With `B >= items` the width-`B` run keeps every
//! live prefix, so the search is exhaustive.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use super::model::{Backbone, Encoded};
use super::trie::PrefixTrie;
use crate::error::{Error, Result};
use crate::rq::{BOS, NUM_SPECIALS};
use crate::tensor::{log_softmax, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Item index for trie paths; `None` for unconstrained outputs that are
    /// not identifiers.
    pub item: Option<usize>,
}

/// Higher log-prob first, then lexicographic tokens.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Trie,
    /// Any non-special token, fixed length.
    Free { length: usize },
}

/// Caches next-token log-probs per decoder prefix for one history.
pub struct PrefixScorer<'m> {
    model: &'m Backbone,
    graph: Graph,
    enc: Encoded,
    memo: HashMap<Vec<u32>, Vec<f64>>,
}

impl<'m> PrefixScorer<'m> {
    pub fn new(model: &'m Backbone, history: &[u32]) -> Result<Self> {
        let mut graph = Graph::inference();
        let enc = model.encode_batch(&mut graph, &[history])?;
        Ok(PrefixScorer {
            model,
            graph,
            enc,
            memo: HashMap::new(),
        })
    }

    /// Make sure every prefix (without BOS) has cached log-probs.
    pub fn ensure(&mut self, prefixes: &[&[u32]]) -> Result<()> {
        let mut missing: Vec<Vec<u32>> = Vec::new();
        for p in prefixes {
            let mut key = Vec::with_capacity(p.len() + 1);
            key.push(BOS);
            key.extend_from_slice(p);
            if !self.memo.contains_key(&key) && !missing.contains(&key) {
                missing.push(key);
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        let inputs: Vec<(usize, &[u32])> = missing.iter().map(|k| (0, k.as_slice())).collect();
        let dec = self.model.decode_batch(&mut self.graph, &self.enc, &inputs)?;
        let v = self.model.config.vocab_size;
        let logits = self.graph.data(dec.logits);
        for (key, (&start, &len)) in missing.iter().zip(dec.starts.iter().zip(&dec.lens)) {
            let row = &logits[(start + len - 1) * v..(start + len) * v];
            self.memo.insert(key.clone(), log_softmax(row));
        }
        Ok(())
    }

    pub fn log_probs(&self, prefix: &[u32]) -> Option<&[f64]> {
        let mut key = Vec::with_capacity(prefix.len() + 1);
        key.push(BOS);
        key.extend_from_slice(prefix);
        self.memo.get(&key).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone)]
struct Live {
    tokens: Vec<u32>,
    log_prob: f64,
    node: usize,
}

fn better(a: &Live, b: &Live) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Log-probability given to a suffix step at a node with `n` children.
pub fn suffix_log_prob(n: usize) -> f64 {
    -(n as f64).ln()
}

/// Top `beam` identifiers for `history`, best first.
pub fn beam_search(
    model: &Backbone,
    history: &[u32],
    beam: usize,
    trie: &PrefixTrie,
    constraint: Constraint,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if trie.num_items() == 0 {
        return Err(Error::Contract("trie is empty".into()));
    }
    let mut scorer = PrefixScorer::new(model, history)?;
    let vocab = model.config.vocab_size as u32;
    let free_len = match constraint {
        Constraint::Free { length } => Some(length),
        Constraint::Trie => None,
    };
    let is_done = |l: &Live| match free_len {
        Some(n) => l.tokens.len() >= n,
        None => trie.item(l.node).is_some(),
    };

    let mut beams: Vec<Vec<Live>> = (1..=beam)
        .map(|_| {
            vec![Live {
                tokens: Vec::new(),
                log_prob: 0.0,
                node: PrefixTrie::ROOT,
            }]
        })
        .collect();
    let mut finished: BTreeMap<Vec<u32>, (f64, Option<usize>)> = BTreeMap::new();

    loop {
        let mut pending: Vec<&[u32]> = Vec::new();
        for b in &beams {
            for l in b.iter().filter(|l| !is_done(l)) {
                let needs_model = match free_len {
                    Some(_) => true,
                    None => trie.children(l.node).iter().any(|&(t, _)| !trie.is_suffix(t)),
                };
                if needs_model {
                    pending.push(&l.tokens);
                }
            }
        }
        if beams.iter().all(|b| b.iter().all(is_done)) {
            break;
        }
        let pending: Vec<Vec<u32>> = pending.into_iter().map(<[u32]>::to_vec).collect();
        let refs: Vec<&[u32]> = pending.iter().map(Vec::as_slice).collect();
        scorer.ensure(&refs)?;

        for (wi, b) in beams.iter_mut().enumerate() {
            let width = wi + 1;
            let mut cand: Vec<Live> = Vec::new();
            for l in b.drain(..) {
                if is_done(&l) {
                    cand.push(l);
                    continue;
                }
                match free_len {
                    Some(_) => {
                        let lp = scorer.log_probs(&l.tokens).expect("scored above");
                        for t in NUM_SPECIALS as u32..vocab {
                            let mut tokens = l.tokens.clone();
                            tokens.push(t);
                            cand.push(Live {
                                tokens,
                                log_prob: l.log_prob + lp[t as usize],
                                node: l.node,
                            });
                        }
                    }
                    None => {
                        let kids = trie.children(l.node);
                        let lp = scorer.log_probs(&l.tokens);
                        for &(t, child) in kids {
                            let step = if trie.is_suffix(t) {
                                suffix_log_prob(kids.len())
                            } else {
                                lp.expect("scored above")[t as usize]
                            };
                            let mut tokens = l.tokens.clone();
                            tokens.push(t);
                            cand.push(Live {
                                tokens,
                                log_prob: l.log_prob + step,
                                node: child,
                            });
                        }
                    }
                }
            }
            cand.sort_by(better);
            cand.truncate(width);
            *b = cand;
        }
    }

    for b in &beams {
        for l in b {
            let item = match free_len {
                Some(_) => trie.walk(&l.tokens).and_then(|n| trie.item(n)),
                None => trie.item(l.node),
            };
            finished.insert(l.tokens.clone(), (l.log_prob, item));
        }
    }
    let mut out: Vec<Hypothesis> = finished
        .into_iter()
        .map(|(tokens, (log_prob, item))| Hypothesis {
            tokens,
            log_prob,
            item,
        })
        .collect();
    out.sort_by(rank_order);
    out.truncate(beam);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> Backbone {
        let mut cfg = BackboneConfig::new(vocab);
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.d_model = 8;
        cfg.d_ff = 16;
        cfg.max_len = 8;
        cfg.max_target_len = 6;
        Backbone::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn single_valid_identifier() {
        let m = tiny(12);
        let trie = PrefixTrie::new(&[vec![7, 9]], None).unwrap();
        let out = beam_search(&m, &[4, 5, 2], 3, &trie, Constraint::Trie).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, vec![7, 9]);
        assert_eq!(out[0].item, Some(0));
    }

    #[test]
    fn free_mode_returns_fixed_length() {
        let m = tiny(10);
        let trie = PrefixTrie::new(&[vec![4, 5], vec![6, 7]], None).unwrap();
        let out = beam_search(&m, &[4, 2], 4, &trie, Constraint::Free { length: 2 }).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|h| h.tokens.len() == 2));
        assert!(out.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    }
}
