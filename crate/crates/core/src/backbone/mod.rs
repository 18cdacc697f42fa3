//! Encoder-decoder backbone, identifier trie and beam search.

pub mod beam;
pub mod model;
pub mod trie;

pub use beam::{beam_search, rank_order, suffix_log_prob, Constraint, Hypothesis, PrefixScorer};
pub use model::{
    load_checkpoint, meta_path, save_checkpoint, AttentionMaps, Backbone, BackboneConfig, Decoded, Encoded,
};
pub use trie::PrefixTrie;
