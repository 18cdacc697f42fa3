use crate::error::{Error, Result};
use crate::rq::IdentifierMap;

#[derive(Debug, Clone, Default)]
struct TrieNode {
    /// Sorted by token.
    children: Vec<(u32, usize)>,
    item: Option<usize>,
}

/// Trie over item token strings. Items sit only at leaves: no identifier
/// may be a prefix of another.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    items: usize,
    suffix_from: Option<u32>,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    /// Item `i` is `seqs[i]`. Tokens at or above `suffix_from` are
    /// disambiguation suffixes.
    pub fn new(seqs: &[Vec<u32>], suffix_from: Option<u32>) -> Result<Self> {
        let mut nodes = vec![TrieNode::default()];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Contract(format!("item {i} has an empty token string")));
            }
            let mut at = Self::ROOT;
            for &t in seq {
                if nodes[at].item.is_some() {
                    return Err(Error::Contract(format!("an identifier is a prefix of item {i}")));
                }
                at = match nodes[at].children.binary_search_by_key(&t, |c| c.0) {
                    Ok(p) => nodes[at].children[p].1,
                    Err(p) => {
                        nodes.push(TrieNode::default());
                        let id = nodes.len() - 1;
                        nodes[at].children.insert(p, (t, id));
                        id
                    }
                };
            }
            if nodes[at].item.is_some() {
                return Err(Error::Contract(format!("item {i} duplicates another identifier")));
            }
            if !nodes[at].children.is_empty() {
                return Err(Error::Contract(format!("item {i} is a prefix of another identifier")));
            }
            nodes[at].item = Some(i);
        }
        Ok(PrefixTrie {
            nodes,
            items: seqs.len(),
            suffix_from,
        })
    }

    pub fn from_map(map: &IdentifierMap) -> Result<Self> {
        let v = map.vocab();
        let suffix_from = (v.suffixes() > 0).then(|| v.suffix_token(0)).transpose()?;
        let seqs: Vec<Vec<u32>> = map.items().iter().map(|it| it.tokens.clone()).collect();
        Self::new(&seqs, suffix_from)
    }

    pub fn num_items(&self) -> usize {
        self.items
    }

    pub fn children(&self, node: usize) -> &[(u32, usize)] {
        &self.nodes[node].children
    }

    pub fn child(&self, node: usize, token: u32) -> Option<usize> {
        let c = &self.nodes[node].children;
        c.binary_search_by_key(&token, |x| x.0).ok().map(|p| c[p].1)
    }

    pub fn item(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    pub fn walk(&self, prefix: &[u32]) -> Option<usize> {
        prefix.iter().try_fold(Self::ROOT, |at, &t| self.child(at, t))
    }

    pub fn is_suffix(&self, token: u32) -> bool {
        self.suffix_from.is_some_and(|s| token >= s)
    }

    /// Every root-to-leaf path with its item, in lexicographic token order.
    pub fn paths(&self) -> Vec<(Vec<u32>, usize)> {
        let mut out = Vec::with_capacity(self.items);
        let mut stack = vec![(Self::ROOT, Vec::new())];
        while let Some((n, path)) = stack.pop() {
            if let Some(i) = self.nodes[n].item {
                out.push((path.clone(), i));
            }
            for &(t, c) in self.nodes[n].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((c, p));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_are_items() {
        let seqs = vec![vec![5, 9], vec![5, 7], vec![6, 1]];
        let t = PrefixTrie::new(&seqs, None).unwrap();
        assert_eq!(t.paths(), vec![(vec![5, 7], 1), (vec![5, 9], 0), (vec![6, 1], 2)]);
        assert_eq!(t.walk(&[5, 9]).and_then(|n| t.item(n)), Some(0));
        assert_eq!(t.walk(&[5]).and_then(|n| t.item(n)), None);
        assert!(t.walk(&[4]).is_none());
    }

    #[test]
    fn rejects_prefixes_and_duplicates() {
        assert!(PrefixTrie::new(&[vec![1, 2], vec![1]], None).is_err());
        assert!(PrefixTrie::new(&[vec![1], vec![1, 2]], None).is_err());
        assert!(PrefixTrie::new(&[vec![1, 2], vec![1, 2]], None).is_err());
    }
}
