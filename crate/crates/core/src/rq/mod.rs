//! Residual quantization, identifiers and the unified vocabulary.

pub mod files;
pub mod identifier;
pub mod quantize;
pub mod rqvae;
pub mod vocab;

pub use identifier::{decode_identifier, resolve_collisions, tokenize_item, IdentifierMap, ItemIdentifier};
pub use quantize::{kmeans, quantize, CodebookStack, Quantized};
pub use rqvae::{train_rqvae, RqTrainReport, RqVaeConfig, RqVaeModel};
pub use vocab::{build_vocab, Special, TokenKind, UnifiedVocabulary, BOS, EOS, MASK, NUM_SPECIALS, PAD};
