//! Leave-one-out splits, history encoding and ranking metrics.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::backbone::{beam_search, Backbone, Constraint, PrefixTrie};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rq::{IdentifierMap, EOS};
use crate::synergy::unimodal_view;

/// One next-item prediction: `history` (item indices, oldest first)
/// followed by `target`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub user: usize,
    pub history: Vec<usize>,
    pub target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Users with fewer than 3 interactions.
    pub dropped: usize,
}

/// Last item for test, second-to-last for validation. Training pairs are
/// every earlier prefix, the empty one included, so a length-3 sequence
/// yields exactly one.
pub fn split_leave_one_out(sequences: &[Vec<usize>]) -> Splits {
    let mut s = Splits::default();
    for (user, seq) in sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            s.dropped += 1;
            continue;
        }
        for k in 0..n - 2 {
            s.train.push(Example {
                user,
                history: seq[..k].to_vec(),
                target: seq[k],
            });
        }
        s.valid.push(Example {
            user,
            history: seq[..n - 2].to_vec(),
            target: seq[n - 2],
        });
        s.test.push(Example {
            user,
            history: seq[..n - 1].to_vec(),
            target: seq[n - 1],
        });
    }
    s
}

/// Which modalities the encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Joint,
    Only(Modality),
}

/// Encoder input for a history: the most recent whole items whose code
/// tokens fit in `max_len - 1`, then EOS. Suffix tokens are left out.
pub fn history_tokens(map: &IdentifierMap, history: &[usize], max_len: usize) -> Vec<u32> {
    let per_item = 2 * map.vocab().depth();
    let fit = max_len.saturating_sub(1) / per_item;
    let start = history.len().saturating_sub(fit);
    let mut out = Vec::with_capacity((history.len() - start) * per_item + 1);
    for &i in &history[start..] {
        out.extend_from_slice(map.items()[i].code_tokens());
    }
    out.push(EOS);
    out
}

pub fn input_tokens(map: &IdentifierMap, history: &[usize], max_len: usize, mode: InputMode) -> Vec<u32> {
    let joint = history_tokens(map, history, max_len);
    match mode {
        InputMode::Joint => joint,
        InputMode::Only(m) => unimodal_view(&joint, map.vocab(), m),
    }
}

/// A metric over 1-based ranks; `None` means outside the beam.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Hr(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn k(self) -> usize {
        match self {
            Metric::Hr(k) | Metric::Ndcg(k) => k,
        }
    }

    pub fn of_rank(self, rank: Option<usize>) -> f64 {
        match (self, rank) {
            (Metric::Hr(k), Some(r)) if r <= k => 1.0,
            (Metric::Ndcg(k), Some(r)) if r <= k => 1.0 / ((r + 1) as f64).log2(),
            _ => 0.0,
        }
    }

    pub fn mean(self, ranks: &[Option<usize>]) -> f64 {
        if ranks.is_empty() {
            return 0.0;
        }
        ranks.iter().map(|&r| self.of_rank(r)).sum::<f64>() / ranks.len() as f64
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Hr(k) => write!(f, "hr@{k}"),
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    /// `hr@K`, `recall@K` (same thing with one relevant item) or `ndcg@K`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown metric {s:?}; expected hr@K, recall@K or ndcg@K"));
        let (name, k) = lower.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match name {
            "hr" | "recall" => Ok(Metric::Hr(k)),
            "ndcg" => Ok(Metric::Ndcg(k)),
            _ => Err(bad()),
        }
    }
}

pub const REPORT_METRICS: [Metric; 5] = [
    Metric::Hr(1),
    Metric::Hr(5),
    Metric::Hr(10),
    Metric::Ndcg(5),
    Metric::Ndcg(10),
];

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Per example, 1-based rank of the ground truth in the beam.
    pub ranks: Vec<Option<usize>>,
    pub beam: usize,
}

impl EvalReport {
    pub fn from_ranks(ranks: Vec<Option<usize>>, beam: usize) -> Self {
        let m = |x: Metric| x.mean(&ranks);
        EvalReport {
            hr1: m(Metric::Hr(1)),
            hr5: m(Metric::Hr(5)),
            hr10: m(Metric::Hr(10)),
            ndcg5: m(Metric::Ndcg(5)),
            ndcg10: m(Metric::Ndcg(10)),
            ranks,
            beam,
        }
    }

    /// Any metric recomputed from the ranks. Cut-offs beyond the beam are
    /// rejected since ranks past it are unknown.
    pub fn metric(&self, m: Metric) -> Result<f64> {
        if m.k() > self.beam {
            return Err(Error::Config(format!("{m} needs a beam of at least {}", m.k())));
        }
        Ok(m.mean(&self.ranks))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,name,value\n");
        for m in REPORT_METRICS {
            let family = match m {
                Metric::Hr(_) => "hr",
                Metric::Ndcg(_) => "ndcg",
            };
            let _ = writeln!(out, "{family},{m},{}", m.mean(&self.ranks));
        }
        let _ = writeln!(out, "info,users,{}", self.ranks.len());
        let _ = writeln!(out, "info,beam,{}", self.beam);
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for m in REPORT_METRICS {
            let _ = writeln!(out, "{:<8} {:>8.4}", m.to_string(), m.mean(&self.ranks));
        }
        let _ = writeln!(out, "{:<8} {:>8}", "users", self.ranks.len());
        let _ = writeln!(out, "{:<8} {:>8}", "beam", self.beam);
        out
    }
}

/// Rank of each example's target among the trie-constrained beam outputs.
pub fn evaluate(
    model: &Backbone,
    map: &IdentifierMap,
    trie: &PrefixTrie,
    examples: &[Example],
    beam: usize,
    mode: InputMode,
) -> Result<EvalReport> {
    let mut ranks = Vec::with_capacity(examples.len());
    for ex in examples {
        let input = input_tokens(map, &ex.history, model.config.max_len, mode);
        let hyps = beam_search(model, &input, beam, trie, Constraint::Trie)?;
        ranks.push(hyps.iter().position(|h| h.item == Some(ex.target)).map(|p| p + 1));
    }
    Ok(EvalReport::from_ranks(ranks, beam))
}
