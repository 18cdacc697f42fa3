//! Pre-norm encoder-decoder transformer over the unified vocabulary.
//!
//! Sequences in a batch are concatenated row-wise and attention runs per
//! segment, so no padding is needed inside a batch. Explicit padding is still
//! honored: PAD keys are masked out of every attention block.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::rq::{UnifiedVocabulary, BOS, PAD};
use crate::tensor::{blob, log_softmax, AttnSegment, AttnSpec, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Longest encoder input.
    pub max_len: usize,
    /// Longest decoder input, BOS included.
    pub max_target_len: usize,
    pub vocab_size: usize,
    /// Learned absolute positions; off only for equivariance checks.
    pub positions: bool,
}

impl BackboneConfig {
    pub fn new(vocab_size: usize) -> Self {
        BackboneConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
            max_target_len: 16,
            vocab_size,
            positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.max_target_len == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if self.vocab_size <= BOS as usize {
            return Err(Error::Config(format!("vocabulary of {} tokens is too small", self.vocab_size)));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("layers", self.layers);
        kv.set("heads", self.heads);
        kv.set("d_model", self.d_model);
        kv.set("d_ff", self.d_ff);
        kv.set("max_len", self.max_len);
        kv.set("max_target_len", self.max_target_len);
        kv.set("vocab_size", self.vocab_size);
        kv.set("positions", self.positions);
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        Ok(BackboneConfig {
            layers: kv.require("layers")?,
            heads: kv.require("heads")?,
            d_model: kv.require("d_model")?,
            d_ff: kv.require("d_ff")?,
            max_len: kv.require("max_len")?,
            max_target_len: kv.require("max_target_len")?,
            vocab_size: kv.require("vocab_size")?,
            positions: kv.require("positions")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnWeights {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl AttnWeights {
    fn new<R: Rng>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        AttnWeights {
            q: Linear::new(s, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(s, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(s, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(s, &format!("{name}.o"), d, d, false, rng),
        }
    }

    /// Returns the output projection and the raw attention node.
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, mem: Var, spec: Arc<AttnSpec>) -> Result<(Var, Var)> {
        let q = self.q.forward(g, s, x)?;
        let k = self.k.forward(g, s, mem)?;
        let v = self.v.forward(g, s, mem)?;
        let a = g.attention(q, k, v, spec)?;
        Ok((self.o.forward(g, s, a)?, a))
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.relu(h);
        self.down.forward(g, s, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: AttnWeights,
    ln2: LayerNorm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: AttnWeights,
    ln2: LayerNorm,
    cross: AttnWeights,
    ln3: LayerNorm,
    ff: FeedForward,
}

/// Per-head `N x N` weights of one sequence, `maps[h][j][i]` = weight of
/// query `j` on key `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub heads: usize,
    pub n: usize,
    pub weights: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(heads: usize, n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != heads * n * n {
            return Err(Error::shape("attention maps", &[heads, n, n], &[weights.len()]));
        }
        Ok(AttentionMaps { heads, n, weights })
    }

    pub fn get(&self, head: usize, query: usize, key: usize) -> f64 {
        self.weights[(head * self.n + query) * self.n + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.n + query) * self.n;
        &self.weights[start..start + self.n]
    }
}

/// Encoder output for a batch of sequences.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final (normalized) hidden states, all sequences stacked.
    pub hidden: Var,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
    pub pad: Vec<Vec<bool>>,
    /// Attention node of the final encoder layer.
    pub final_attn: Var,
    /// Which inputs were cut to `max_len`.
    pub truncated: Vec<bool>,
}

impl Encoded {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn attention_maps(&self, g: &Graph, seq: usize) -> AttentionMaps {
        let (spec, probs) = g.attention_probs(self.final_attn).expect("final_attn is an attention node");
        let n = self.lens[seq];
        let start = spec.prob_offset(seq, 0);
        AttentionMaps {
            heads: spec.heads,
            n,
            weights: probs[start..start + spec.heads * n * n].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoded {
    /// Final normalized decoder states, all sequences stacked.
    pub hidden: Var,
    pub logits: Var,
    pub starts: Vec<usize>,
    pub lens: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    params: ParamStore,
    tok: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc: Vec<EncoderLayer>,
    enc_ln: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_ln: LayerNorm,
    out: Linear,
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut s = ParamStore::new();
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok = s.add_normal("tok", vec![config.vocab_size, d], emb_std, rng);
        let enc_pos = s.add_normal("enc_pos", vec![config.max_len, d], emb_std, rng);
        let dec_pos = s.add_normal("dec_pos", vec![config.max_target_len, d], emb_std, rng);
        let ff = |s: &mut ParamStore, name: &str, rng: &mut R| FeedForward {
            up: Linear::new(s, &format!("{name}.up"), d, config.d_ff, true, rng),
            down: Linear::new(s, &format!("{name}.down"), config.d_ff, d, true, rng),
        };
        let mut enc = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("enc{l}");
            enc.push(EncoderLayer {
                ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), d),
                attn: AttnWeights::new(&mut s, &format!("{n}.attn"), d, rng),
                ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), d),
                ff: ff(&mut s, &format!("{n}.ff"), rng),
            });
        }
        let enc_ln = LayerNorm::new(&mut s, "enc_ln", d);
        let mut dec = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = format!("dec{l}");
            dec.push(DecoderLayer {
                ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), d),
                self_attn: AttnWeights::new(&mut s, &format!("{n}.self"), d, rng),
                ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), d),
                cross: AttnWeights::new(&mut s, &format!("{n}.cross"), d, rng),
                ln3: LayerNorm::new(&mut s, &format!("{n}.ln3"), d),
                ff: ff(&mut s, &format!("{n}.ff"), rng),
            });
        }
        let dec_ln = LayerNorm::new(&mut s, "dec_ln", d);
        let out = Linear::new(&mut s, "out", d, config.vocab_size, true, rng);
        Ok(Backbone {
            config,
            params: s,
            tok,
            enc_pos,
            dec_pos,
            enc,
            enc_ln,
            dec,
            dec_ln,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t as usize,
                    size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, tokens: &[usize], positions: &[usize], table: ParamId) -> Result<Var> {
        let tok = g.param(&self.params, self.tok);
        let x = g.embedding(tok, tokens)?;
        if !self.config.positions {
            return Ok(x);
        }
        let pos = g.param(&self.params, table);
        let p = g.embedding(pos, positions)?;
        g.add(x, p)
    }

    /// Encode a batch. PAD tokens are treated as padding. Inputs longer than
    /// `max_len` keep their most recent tokens.
    pub fn encode_batch(&self, g: &mut Graph, seqs: &[&[u32]]) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::Contract("encode needs at least one sequence".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut starts = Vec::with_capacity(seqs.len());
        let mut lens = Vec::with_capacity(seqs.len());
        let mut pad = Vec::with_capacity(seqs.len());
        let mut truncated = Vec::with_capacity(seqs.len());
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            self.check_tokens(seq)?;
            if seq.is_empty() {
                return Err(Error::Contract("cannot encode an empty sequence".into()));
            }
            let cut = seq.len().saturating_sub(self.config.max_len);
            let kept = &seq[cut..];
            truncated.push(cut > 0);
            starts.push(tokens.len());
            lens.push(kept.len());
            let mask: Vec<bool> = kept.iter().map(|&t| t == PAD).collect();
            let any_pad = mask.iter().any(|&p| p);
            segments.push(AttnSegment {
                key_valid: any_pad.then(|| mask.iter().map(|p| !p).collect()),
                ..AttnSegment::square(tokens.len(), kept.len())
            });
            pad.push(mask);
            positions.extend(0..kept.len());
            tokens.extend(kept.iter().map(|&t| t as usize));
        }
        let spec = Arc::new(AttnSpec {
            heads: self.config.heads,
            causal: false,
            segments,
        });
        let mut x = self.embed(g, &tokens, &positions, self.enc_pos)?;
        let mut final_attn = None;
        for layer in &self.enc {
            let h = layer.ln1.forward(g, &self.params, x)?;
            let (a, raw) = layer.attn.forward(g, &self.params, h, h, Arc::clone(&spec))?;
            final_attn = Some(raw);
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, &self.params, x)?;
            let f = layer.ff.forward(g, &self.params, h)?;
            x = g.add(x, f)?;
        }
        let hidden = self.enc_ln.forward(g, &self.params, x)?;
        Ok(Encoded {
            hidden,
            starts,
            lens,
            pad,
            final_attn: final_attn.expect("at least one layer"),
            truncated,
        })
    }

    /// Teacher-forced decoding. `inputs[i] = (encoder sequence, decoder
    /// tokens)`; decoder tokens start with BOS.
    pub fn decode_batch(&self, g: &mut Graph, enc: &Encoded, inputs: &[(usize, &[u32])]) -> Result<Decoded> {
        if inputs.is_empty() {
            return Err(Error::Contract("decode needs at least one sequence".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut starts = Vec::with_capacity(inputs.len());
        let mut lens = Vec::with_capacity(inputs.len());
        let mut self_segs = Vec::with_capacity(inputs.len());
        let mut cross_segs = Vec::with_capacity(inputs.len());
        for &(e, seq) in inputs {
            if seq.is_empty() {
                return Err(Error::Contract("decoder prefix is empty".into()));
            }
            if seq[0] != BOS {
                return Err(Error::Contract("decoder prefix must start with BOS".into()));
            }
            if seq.len() > self.config.max_target_len {
                return Err(Error::Contract(format!(
                    "decoder input of {} tokens exceeds {}",
                    seq.len(),
                    self.config.max_target_len
                )));
            }
            if e >= enc.len() {
                return Err(Error::Index {
                    what: "encoded sequence",
                    index: e,
                    size: enc.len(),
                });
            }
            self.check_tokens(seq)?;
            let start = tokens.len();
            starts.push(start);
            lens.push(seq.len());
            self_segs.push(AttnSegment::square(start, seq.len()));
            let mask = &enc.pad[e];
            cross_segs.push(AttnSegment {
                q_start: start,
                q_len: seq.len(),
                k_start: enc.starts[e],
                k_len: enc.lens[e],
                key_valid: mask.iter().any(|&p| p).then(|| mask.iter().map(|p| !p).collect()),
            });
            positions.extend(0..seq.len());
            tokens.extend(seq.iter().map(|&t| t as usize));
        }
        let heads = self.config.heads;
        let self_spec = Arc::new(AttnSpec {
            heads,
            causal: true,
            segments: self_segs,
        });
        let cross_spec = Arc::new(AttnSpec {
            heads,
            causal: false,
            segments: cross_segs,
        });
        let mut x = self.embed(g, &tokens, &positions, self.dec_pos)?;
        for layer in &self.dec {
            let h = layer.ln1.forward(g, &self.params, x)?;
            let (a, _) = layer.self_attn.forward(g, &self.params, h, h, Arc::clone(&self_spec))?;
            x = g.add(x, a)?;
            let h = layer.ln2.forward(g, &self.params, x)?;
            let (c, _) = layer.cross.forward(g, &self.params, h, enc.hidden, Arc::clone(&cross_spec))?;
            x = g.add(x, c)?;
            let h = layer.ln3.forward(g, &self.params, x)?;
            let f = layer.ff.forward(g, &self.params, h)?;
            x = g.add(x, f)?;
        }
        let hidden = self.dec_ln.forward(g, &self.params, x)?;
        let logits = self.out.forward(g, &self.params, hidden)?;
        Ok(Decoded {
            hidden,
            logits,
            starts,
            lens,
        })
    }

    /// Single sequence with an explicit padding mask (`true` = padding).
    /// Returns final hidden rows, final-layer maps and the truncation flag.
    pub fn encode(&self, tokens: &[u32], pad_mask: &[bool]) -> Result<(Vec<Vec<f64>>, AttentionMaps, bool)> {
        if pad_mask.len() != tokens.len() {
            return Err(Error::shape("pad mask", &[tokens.len()], &[pad_mask.len()]));
        }
        let seq: Vec<u32> = tokens
            .iter()
            .zip(pad_mask)
            .map(|(&t, &p)| if p { PAD } else { t })
            .collect();
        let mut g = Graph::inference();
        let enc = self.encode_batch(&mut g, &[&seq])?;
        let d = self.config.d_model;
        let rows = g.data(enc.hidden).chunks(d).map(<[f64]>::to_vec).collect();
        Ok((rows, enc.attention_maps(&g, 0), enc.truncated[0]))
    }

    /// Logits for the token after `prefix`, given an encoded history.
    pub fn decode_step(&self, prefix: &[u32], history: &[u32]) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        let mut g = Graph::inference();
        let enc = self.encode_batch(&mut g, &[history])?;
        let dec = self.decode_batch(&mut g, &enc, &[(0, prefix)])?;
        let v = self.config.vocab_size;
        let last = prefix.len() - 1;
        Ok(g.data(dec.logits)[last * v..(last + 1) * v].to_vec())
    }

    /// Sum of `log P(target_j | target_<j, history)` under teacher forcing.
    pub fn sequence_log_prob(&self, history: &[u32], target: &[u32]) -> Result<f64> {
        let mut input = vec![BOS];
        input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        let mut g = Graph::inference();
        let enc = self.encode_batch(&mut g, &[history])?;
        let dec = self.decode_batch(&mut g, &enc, &[(0, &input)])?;
        let v = self.config.vocab_size;
        let logits = g.data(dec.logits);
        Ok(target
            .iter()
            .enumerate()
            .map(|(j, &y)| log_softmax(&logits[j * v..(j + 1) * v])[y as usize])
            .sum())
    }
}

/// Checkpoint = tensor blob at `path` plus `path.meta` with the config and
/// vocabulary layout.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, model: &Backbone, vocab: &UnifiedVocabulary, extra: &KeyValues) -> Result<()> {
    blob::save_blob(path, &model.params.named_tensors())?;
    let mut kv = extra.clone();
    model.config.to_kv(&mut kv);
    kv.set("vocab_depth", vocab.depth());
    kv.set("vocab_codebook_size", vocab.codebook_size());
    kv.set("vocab_suffixes", vocab.suffixes());
    kv.set("vocab_hash", vocab.fingerprint());
    let meta = meta_path(path);
    std::fs::write(&meta, kv.to_text()).map_err(|e| Error::io(&meta, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Backbone, UnifiedVocabulary, KeyValues)> {
    let kv = KeyValues::load(&meta_path(path))?;
    let config = BackboneConfig::from_kv(&kv)?;
    let vocab = UnifiedVocabulary::new(kv.require("vocab_depth")?, kv.require("vocab_codebook_size")?)
        .with_suffixes(kv.require("vocab_suffixes")?);
    let hash: String = kv.require("vocab_hash")?;
    if hash != vocab.fingerprint() || vocab.size() != config.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint metadata is inconsistent: vocabulary hash {hash} / size {}",
            config.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Backbone::new(config, &mut rng)?;
    model.params.load_named(&blob::load_blob(path)?)?;
    Ok((model, vocab, kv))
}
