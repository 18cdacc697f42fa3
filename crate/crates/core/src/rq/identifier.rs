//! Item identifiers: `D` text tokens followed by `D` vision tokens, plus a
//! disambiguation suffix when several items share all `2D` codes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::rqvae::RqVaeModel;
use super::vocab::{TokenKind, UnifiedVocabulary};
use crate::error::{Error, Result};
use crate::modality::Modality;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemIdentifier {
    pub item_id: String,
    pub text_codes: Vec<usize>,
    pub vision_codes: Vec<usize>,
    pub suffix: Option<usize>,
    /// Text block, vision block, then the suffix token if any.
    pub tokens: Vec<u32>,
}

impl ItemIdentifier {
    pub fn from_codes(
        item_id: impl Into<String>,
        text_codes: Vec<usize>,
        vision_codes: Vec<usize>,
        suffix: Option<usize>,
        vocab: &UnifiedVocabulary,
    ) -> Result<Self> {
        let d = vocab.depth();
        if text_codes.len() != d || vision_codes.len() != d {
            return Err(Error::shape("identifier codes", &[d, d], &[text_codes.len(), vision_codes.len()]));
        }
        let mut tokens = Vec::with_capacity(2 * d + 1);
        for (m, codes) in [(Modality::Text, &text_codes), (Modality::Vision, &vision_codes)] {
            for (level, &c) in codes.iter().enumerate() {
                tokens.push(vocab.token(m, level + 1, c)?);
            }
        }
        if let Some(s) = suffix {
            tokens.push(vocab.suffix_token(s)?);
        }
        Ok(ItemIdentifier {
            item_id: item_id.into(),
            text_codes,
            vision_codes,
            suffix,
            tokens,
        })
    }

    /// The `2D` code tokens without any suffix.
    pub fn code_tokens(&self) -> &[u32] {
        &self.tokens[..self.text_codes.len() + self.vision_codes.len()]
    }

    pub fn modality_tokens(&self, m: Modality) -> &[u32] {
        let d = self.text_codes.len();
        match m {
            Modality::Text => &self.tokens[..d],
            Modality::Vision => &self.tokens[d..2 * d],
        }
    }
}

/// Decode a token string into `(text_codes, vision_codes, suffix)`.
pub fn decode_identifier(
    tokens: &[u32],
    vocab: &UnifiedVocabulary,
) -> Result<(Vec<usize>, Vec<usize>, Option<usize>)> {
    let d = vocab.depth();
    if tokens.len() != 2 * d && tokens.len() != 2 * d + 1 {
        return Err(Error::Contract(format!(
            "identifier has {} tokens, expected {} or {}",
            tokens.len(),
            2 * d,
            2 * d + 1
        )));
    }
    let mut text = Vec::with_capacity(d);
    let mut vision = Vec::with_capacity(d);
    for (p, &t) in tokens[..2 * d].iter().enumerate() {
        let want = if p < d { Modality::Text } else { Modality::Vision };
        match vocab.decode(t)? {
            TokenKind::Code { modality, depth, code } if modality == want && depth == p % d + 1 => {
                if p < d {
                    text.push(code)
                } else {
                    vision.push(code)
                }
            }
            other => {
                return Err(Error::Contract(format!(
                    "token {t} at position {p} is {other:?}, expected {want} depth {}",
                    p % d + 1
                )))
            }
        }
    }
    let suffix = match tokens.get(2 * d) {
        None => None,
        Some(&t) => match vocab.decode(t)? {
            TokenKind::Suffix(i) => Some(i),
            other => return Err(Error::Contract(format!("expected a suffix token, found {other:?}"))),
        },
    };
    Ok((text, vision, suffix))
}

/// Quantize both embeddings of one item. No collision handling here.
pub fn tokenize_item(
    item_id: &str,
    text_emb: &[f64],
    vision_emb: &[f64],
    text_model: &RqVaeModel,
    vision_model: &RqVaeModel,
    vocab: &UnifiedVocabulary,
) -> Result<ItemIdentifier> {
    for (m, model) in [(Modality::Text, text_model), (Modality::Vision, vision_model)] {
        if !model.is_trained() {
            return Err(Error::Untrained(format!("{m} quantizer")));
        }
        if model.modality != m {
            return Err(Error::Contract(format!("{} quantizer passed as {m}", model.modality)));
        }
        let (d, k) = (model.codebooks.depth(), model.codebooks.size());
        if d != vocab.depth() || k != vocab.codebook_size() {
            return Err(Error::Contract(format!(
                "{m} quantizer has D={d}, K={k}; vocabulary has D={}, K={}",
                vocab.depth(),
                vocab.codebook_size()
            )));
        }
    }
    let t = text_model.quantize(text_emb)?.codes;
    let v = vision_model.quantize(vision_emb)?.codes;
    ItemIdentifier::from_codes(item_id, t, v, None, vocab)
}

/// Give every member of a code-collision group a suffix `0..n` in input
/// order and size the suffix block to the largest group.
pub fn resolve_collisions(items: &[ItemIdentifier], vocab: &UnifiedVocabulary) -> Result<IdentifierMap> {
    let mut groups: HashMap<(&[usize], &[usize]), Vec<usize>> = HashMap::new();
    for (i, it) in items.iter().enumerate() {
        groups
            .entry((&it.text_codes, &it.vision_codes))
            .or_default()
            .push(i);
    }
    let max_group = groups.values().map(Vec::len).max().unwrap_or(0);
    let suffixes = if max_group > 1 { max_group } else { 0 };
    let vocab = UnifiedVocabulary::new(vocab.depth(), vocab.codebook_size()).with_suffixes(suffixes);
    let mut suffix_of = vec![None; items.len()];
    for members in groups.values().filter(|g| g.len() > 1) {
        for (s, &i) in members.iter().enumerate() {
            suffix_of[i] = Some(s);
        }
    }
    let resolved = items
        .iter()
        .zip(suffix_of)
        .map(|(it, s)| {
            ItemIdentifier::from_codes(it.item_id.clone(), it.text_codes.clone(), it.vision_codes.clone(), s, &vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    IdentifierMap::new(vocab, resolved)
}

/// All item identifiers over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierMap {
    vocab: UnifiedVocabulary,
    items: Vec<ItemIdentifier>,
    index: HashMap<String, usize>,
}

impl IdentifierMap {
    pub fn new(vocab: UnifiedVocabulary, items: Vec<ItemIdentifier>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut seen = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if index.insert(it.item_id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate item id {:?}", it.item_id)));
            }
            if let Some(j) = seen.insert(it.tokens.clone(), i) {
                return Err(Error::Contract(format!(
                    "items {:?} and {:?} share an identifier",
                    items[j].item_id, it.item_id
                )));
            }
        }
        Ok(IdentifierMap { vocab, items, index })
    }

    pub fn vocab(&self) -> &UnifiedVocabulary {
        &self.vocab
    }

    pub fn items(&self) -> &[ItemIdentifier] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemIdentifier> {
        self.position(item_id).map(|i| &self.items[i])
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = format!("# codebook_size={}\n", self.vocab.codebook_size());
        for it in &self.items {
            let toks = it
                .tokens
                .iter()
                .map(|&t| self.vocab.render(t))
                .collect::<Result<Vec<_>>>()?;
            writeln!(s, "{}\t{}", it.item_id, toks.join(" ")).unwrap();
        }
        Ok(s)
    }

    /// Parse the text form. The codebook size comes from the
    /// `# codebook_size=K` header when present, else from `codebook_size`,
    /// else one more than the largest code seen.
    pub fn parse(text: &str, codebook_size: Option<usize>) -> Result<Self> {
        let mut header_k = None;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let loc = || format!("identifier map line {}", n + 1);
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("codebook_size=") {
                    header_k = Some(v.trim().parse::<usize>().map_err(|e| Error::Parse {
                        location: loc(),
                        message: e.to_string(),
                    })?);
                }
                continue;
            }
            let (id, toks) = line.split_once('\t').ok_or_else(|| Error::Parse {
                location: loc(),
                message: "expected item_id<TAB>tokens".into(),
            })?;
            let mut parsed = Vec::new();
            for t in toks.split_whitespace() {
                parsed.push(parse_raw(t).ok_or_else(|| Error::Parse {
                    location: loc(),
                    message: format!("bad token {t:?}"),
                })?);
            }
            rows.push((id.to_string(), parsed, n + 1));
        }
        let depth = rows
            .first()
            .map(|(_, t, _)| t.iter().filter(|r| !matches!(r, Raw::Suffix(_))).count() / 2)
            .unwrap_or(1)
            .max(1);
        let max_code = rows
            .iter()
            .flat_map(|(_, t, _)| t)
            .filter_map(|r| match r {
                Raw::Code { code, .. } => Some(*code),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let k = header_k.or(codebook_size).unwrap_or(max_code + 1);
        let suffixes = rows
            .iter()
            .flat_map(|(_, t, _)| t)
            .filter_map(|r| match r {
                Raw::Suffix(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let vocab = UnifiedVocabulary::new(depth, k).with_suffixes(suffixes);
        let mut items = Vec::with_capacity(rows.len());
        for (id, raw, line) in rows {
            let toks = raw
                .iter()
                .map(|r| r.token(&vocab))
                .collect::<Result<Vec<_>>>()
                .and_then(|t| decode_identifier(&t, &vocab))
                .map_err(|e| Error::Parse {
                    location: format!("identifier map line {line}"),
                    message: e.to_string(),
                })?;
            items.push(ItemIdentifier::from_codes(id, toks.0, toks.1, toks.2, &vocab)?);
        }
        IdentifierMap::new(vocab, items)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, None)
    }
}

enum Raw {
    Code { modality: Modality, depth: usize, code: usize },
    Suffix(usize),
}

impl Raw {
    fn token(&self, vocab: &UnifiedVocabulary) -> Result<u32> {
        match *self {
            Raw::Code { modality, depth, code } => vocab.token(modality, depth, code),
            Raw::Suffix(i) => vocab.suffix_token(i),
        }
    }
}

fn parse_raw(s: &str) -> Option<Raw> {
    let inner = s.strip_prefix('<')?.strip_suffix('>')?;
    let (head, num) = inner.split_once('_')?;
    let num: usize = num.parse().ok()?;
    if head == "s" {
        return Some(Raw::Suffix(num));
    }
    let mut chars = head.chars();
    let c = chars.next()?;
    if chars.next().is_some() || !c.is_ascii_alphabetic() {
        return None;
    }
    let modality = if c.is_ascii_lowercase() { Modality::Text } else { Modality::Vision };
    let depth = (c.to_ascii_lowercase() as u8 - b'a') as usize + 1;
    Some(Raw::Code { modality, depth, code: num })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(id: &str, t: [usize; 3], v: [usize; 3], vocab: &UnifiedVocabulary) -> ItemIdentifier {
        ItemIdentifier::from_codes(id, t.to_vec(), v.to_vec(), None, vocab).unwrap()
    }

    #[test]
    fn layout_matches_prefix_scheme() {
        let vocab = UnifiedVocabulary::new(3, 8);
        let it = ident("x", [1, 2, 3], [1, 2, 3], &vocab);
        let rendered: Vec<String> = it.tokens.iter().map(|&t| vocab.render(t).unwrap()).collect();
        assert_eq!(rendered, ["<a_1>", "<b_2>", "<c_3>", "<A_1>", "<B_2>", "<C_3>"]);
        assert_eq!(decode_identifier(&it.tokens, &vocab).unwrap(), (vec![1, 2, 3], vec![1, 2, 3], None));
    }

    #[test]
    fn collisions_get_suffixes() {
        let vocab = UnifiedVocabulary::new(3, 8);
        let items = vec![
            ident("a", [0, 0, 0], [1, 1, 1], &vocab),
            ident("b", [0, 0, 1], [1, 1, 1], &vocab),
            ident("c", [0, 0, 0], [1, 1, 1], &vocab),
        ];
        let map = resolve_collisions(&items, &vocab).unwrap();
        assert_eq!(map.vocab().suffixes(), 2);
        assert_eq!(map.get("a").unwrap().suffix, Some(0));
        assert_eq!(map.get("b").unwrap().suffix, None);
        assert_eq!(map.get("c").unwrap().suffix, Some(1));
        let back = IdentifierMap::parse(&map.to_text().unwrap(), None).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn duplicate_identifiers_rejected() {
        let vocab = UnifiedVocabulary::new(3, 8);
        let items = vec![ident("a", [0, 0, 0], [0, 0, 0], &vocab), ident("b", [0, 0, 0], [0, 0, 0], &vocab)];
        assert!(IdentifierMap::new(vocab, items).is_err());
    }

    #[test]
    fn parse_reports_line() {
        let err = IdentifierMap::parse("a\t<a_0> <A_0>\nb\t<a_0> <Q_x>\n", None).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
