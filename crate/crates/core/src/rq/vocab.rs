//! The unified token vocabulary.
//!
//! Ids are laid out as `PAD, BOS, EOS, MASK`, then text codes in
//! (depth, code) order, then vision codes, then an optional block of
//! collision suffixes. Text tokens print with lowercase depth letters
//! (`<a_5>`), vision tokens with uppercase (`<A_5>`).

use crate::error::{Error, Result};
use crate::modality::Modality;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special(Special),
    /// `depth` is 1-based.
    Code {
        modality: Modality,
        depth: usize,
        code: usize,
    },
    Suffix(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedVocabulary {
    depth: usize,
    codebook_size: usize,
    suffixes: usize,
}

impl UnifiedVocabulary {
    pub fn new(depth: usize, codebook_size: usize) -> Self {
        assert!(depth >= 1 && codebook_size >= 1, "depth and codebook size must be positive");
        UnifiedVocabulary {
            depth,
            codebook_size,
            suffixes: 0,
        }
    }

    pub fn with_suffixes(mut self, n: usize) -> Self {
        self.suffixes = n;
        self
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn suffixes(&self) -> usize {
        self.suffixes
    }

    /// Total number of token ids, including specials and suffixes.
    pub fn size(&self) -> usize {
        NUM_SPECIALS + 2 * self.depth * self.codebook_size + self.suffixes
    }

    fn block(&self, m: Modality) -> usize {
        match m {
            Modality::Text => 0,
            Modality::Vision => 1,
        }
    }

    /// Token for `(modality, depth, code)` with 1-based depth.
    pub fn token(&self, modality: Modality, depth: usize, code: usize) -> Result<u32> {
        if depth == 0 || depth > self.depth {
            return Err(Error::Index {
                what: "quantization depth",
                index: depth,
                size: self.depth,
            });
        }
        if code >= self.codebook_size {
            return Err(Error::Index {
                what: "codebook",
                index: code,
                size: self.codebook_size,
            });
        }
        let per_mod = self.depth * self.codebook_size;
        Ok((NUM_SPECIALS + self.block(modality) * per_mod + (depth - 1) * self.codebook_size + code) as u32)
    }

    pub fn suffix_token(&self, i: usize) -> Result<u32> {
        if i >= self.suffixes {
            return Err(Error::Index {
                what: "suffix block",
                index: i,
                size: self.suffixes,
            });
        }
        Ok((NUM_SPECIALS + 2 * self.depth * self.codebook_size + i) as u32)
    }

    pub fn decode(&self, token: u32) -> Result<TokenKind> {
        let t = token as usize;
        match token {
            PAD => return Ok(TokenKind::Special(Special::Pad)),
            BOS => return Ok(TokenKind::Special(Special::Bos)),
            EOS => return Ok(TokenKind::Special(Special::Eos)),
            MASK => return Ok(TokenKind::Special(Special::Mask)),
            _ => {}
        }
        if t >= self.size() {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                size: self.size(),
            });
        }
        let per_mod = self.depth * self.codebook_size;
        let off = t - NUM_SPECIALS;
        if off >= 2 * per_mod {
            return Ok(TokenKind::Suffix(off - 2 * per_mod));
        }
        let modality = if off < per_mod { Modality::Text } else { Modality::Vision };
        let within = off % per_mod;
        Ok(TokenKind::Code {
            modality,
            depth: within / self.codebook_size + 1,
            code: within % self.codebook_size,
        })
    }

    pub fn modality_of(&self, token: u32) -> Option<Modality> {
        match self.decode(token) {
            Ok(TokenKind::Code { modality, .. }) => Some(modality),
            _ => None,
        }
    }

    /// Half-open id range of one modality's code tokens.
    pub fn modality_range(&self, m: Modality) -> std::ops::Range<u32> {
        let per_mod = self.depth * self.codebook_size;
        let start = NUM_SPECIALS + self.block(m) * per_mod;
        start as u32..(start + per_mod) as u32
    }

    pub fn render(&self, token: u32) -> Result<String> {
        Ok(match self.decode(token)? {
            TokenKind::Special(s) => match s {
                Special::Pad => "<pad>".into(),
                Special::Bos => "<bos>".into(),
                Special::Eos => "<eos>".into(),
                Special::Mask => "<mask>".into(),
            },
            TokenKind::Code { modality, depth, code } => {
                let letter = depth_letter(depth)?;
                let letter = match modality {
                    Modality::Text => letter,
                    Modality::Vision => letter.to_ascii_uppercase(),
                };
                format!("<{letter}_{code}>")
            }
            TokenKind::Suffix(i) => format!("<s_{i}>"),
        })
    }

    pub fn parse(&self, s: &str) -> Result<u32> {
        let bad = || Error::Parse {
            location: format!("token {s:?}"),
            message: "not a vocabulary token".into(),
        };
        match s {
            "<pad>" => return Ok(PAD),
            "<bos>" => return Ok(BOS),
            "<eos>" => return Ok(EOS),
            "<mask>" => return Ok(MASK),
            _ => {}
        }
        let inner = s.strip_prefix('<').and_then(|r| r.strip_suffix('>')).ok_or_else(bad)?;
        let (head, num) = inner.split_once('_').ok_or_else(bad)?;
        let num: usize = num.parse().map_err(|_| bad())?;
        let mut chars = head.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(bad());
        };
        if head == "s" {
            return self.suffix_token(num);
        }
        let modality = if c.is_ascii_lowercase() {
            Modality::Text
        } else if c.is_ascii_uppercase() {
            Modality::Vision
        } else {
            return Err(bad());
        };
        let depth = (c.to_ascii_lowercase() as u8 - b'a') as usize + 1;
        self.token(modality, depth, num)
    }

    /// Stable fingerprint of the layout, written into checkpoint metadata.
    pub fn fingerprint(&self) -> String {
        let text = format!("D={};K={};S={}", self.depth, self.codebook_size, self.suffixes);
        // FNV-1a, 64 bit
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

fn depth_letter(depth: usize) -> Result<char> {
    if depth == 0 || depth > 26 {
        return Err(Error::Contract(format!("depth {depth} has no letter prefix (max 26)")));
    }
    Ok((b'a' + (depth - 1) as u8) as char)
}

/// `build_vocab(D, K)`.
pub fn build_vocab(depth: usize, codebook_size: usize) -> UnifiedVocabulary {
    UnifiedVocabulary::new(depth, codebook_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(build_vocab(1, 2).size(), 8);
        assert_eq!(build_vocab(3, 256).size(), 1540);
        assert_eq!(build_vocab(3, 256).with_suffixes(3).size(), 1543);
    }

    #[test]
    fn layout_and_bijection() {
        let v = build_vocab(3, 8).with_suffixes(2);
        assert_eq!(v.token(Modality::Text, 1, 0).unwrap(), 4);
        assert_eq!(v.token(Modality::Text, 2, 5).unwrap(), 4 + 8 + 5);
        assert_eq!(v.token(Modality::Vision, 1, 0).unwrap(), 4 + 24);
        let t = v.token(Modality::Text, 2, 5).unwrap();
        assert_eq!(
            v.decode(t).unwrap(),
            TokenKind::Code {
                modality: Modality::Text,
                depth: 2,
                code: 5
            }
        );
        for id in 0..v.size() as u32 {
            let kind = v.decode(id).unwrap();
            let back = match kind {
                TokenKind::Special(_) => id,
                TokenKind::Code { modality, depth, code } => v.token(modality, depth, code).unwrap(),
                TokenKind::Suffix(i) => v.suffix_token(i).unwrap(),
            };
            assert_eq!(back, id);
            assert_eq!(v.parse(&v.render(id).unwrap()).unwrap(), id);
        }
        assert!(v.decode(v.size() as u32).is_err());
    }

    #[test]
    fn modalities_are_disjoint() {
        let v = build_vocab(4, 16);
        let t = v.modality_range(Modality::Text);
        let x = v.modality_range(Modality::Vision);
        assert!(t.end <= x.start);
        assert_eq!(v.render(v.token(Modality::Text, 1, 3).unwrap()).unwrap(), "<a_3>");
        assert_eq!(v.render(v.token(Modality::Vision, 3, 7).unwrap()).unwrap(), "<C_7>");
    }

    #[test]
    fn out_of_range_requests() {
        let v = build_vocab(2, 4);
        assert!(v.token(Modality::Text, 0, 0).is_err());
        assert!(v.token(Modality::Text, 3, 0).is_err());
        assert!(v.token(Modality::Text, 1, 4).is_err());
        assert!(v.suffix_token(0).is_err());
    }
}
