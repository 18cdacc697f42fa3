//! Datasets on disk, interaction files and the planted-synergy generator.
//!
//! A dataset directory holds `text.sge`, `vision.sge` (each with its `.ids`
//! sidecar) and `interactions.tsv`, one user per line as
//! `user_id<TAB>item_id,item_id,...` in chronological order.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::rq::files::{load_embeddings, save_embeddings, EmbeddingTable};
use crate::rq::{build_vocab, resolve_collisions, tokenize_item, train_rqvae, IdentifierMap, RqTrainReport, RqVaeConfig, RqVaeModel};

pub const TEXT_FILE: &str = "text.sge";
pub const VISION_FILE: &str = "vision.sge";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const IDS_FILE: &str = "ids.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    /// Indices into the dataset's item list.
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub text: EmbeddingTable,
    /// Rows aligned with `text`: row `i` of both tables is item `i`.
    pub vision: EmbeddingTable,
    pub users: Vec<UserSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub items: usize,
    pub users: usize,
    pub interactions: usize,
    pub avg_len: f64,
    /// `1 - interactions / (users * items)`.
    pub sparsity: f64,
}

impl Dataset {
    /// Align the vision table to the text table's item order and check that
    /// both cover the same items.
    pub fn new(text: EmbeddingTable, vision: EmbeddingTable, users: Vec<UserSequence>) -> Result<Self> {
        if text.modality != Modality::Text || vision.modality != Modality::Vision {
            return Err(Error::Contract("embedding tables have the wrong modalities".into()));
        }
        if text.ids.len() != text.rows.len() || vision.ids.len() != vision.rows.len() {
            return Err(Error::Contract("embedding ids and rows differ in count".into()));
        }
        let index = id_index(&text.ids)?;
        let mut rows = vec![None; text.ids.len()];
        let mut unknown = Vec::new();
        for (id, row) in vision.ids.iter().zip(vision.rows) {
            match index.get(id.as_str()) {
                Some(&i) if rows[i].is_none() => rows[i] = Some(row),
                Some(_) => return Err(Error::Contract(format!("vision table lists {id:?} twice"))),
                None => unknown.push(id.clone()),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::DanglingItems(unknown));
        }
        let missing: Vec<String> = rows
            .iter()
            .zip(&text.ids)
            .filter(|(r, _)| r.is_none())
            .map(|(_, id)| id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!("items without a vision embedding: {missing:?}")));
        }
        for seq in &users {
            if let Some(&i) = seq.items.iter().find(|&&i| i >= text.ids.len()) {
                return Err(Error::Index {
                    what: "item",
                    index: i,
                    size: text.ids.len(),
                });
            }
        }
        let vision = EmbeddingTable {
            modality: Modality::Vision,
            ids: text.ids.clone(),
            rows: rows.into_iter().map(Option::unwrap).collect(),
        };
        Ok(Dataset { text, vision, users })
    }

    pub fn num_items(&self) -> usize {
        self.text.ids.len()
    }

    pub fn item_ids(&self) -> &[String] {
        &self.text.ids
    }

    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.users.iter().map(|u| u.items.clone()).collect()
    }

    pub fn metadata(&self) -> Metadata {
        let interactions: usize = self.users.iter().map(|u| u.items.len()).sum();
        let (n_users, n_items) = (self.users.len(), self.num_items());
        let avg_len = if n_users == 0 { 0.0 } else { interactions as f64 / n_users as f64 };
        let cells = (n_users * n_items) as f64;
        let sparsity = if cells == 0.0 { 1.0 } else { 1.0 - interactions as f64 / cells };
        Metadata {
            items: n_items,
            users: n_users,
            interactions,
            avg_len,
            sparsity,
        }
    }
}

fn id_index(ids: &[String]) -> Result<HashMap<&str, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(Error::Contract(format!("duplicate item id {id:?}")));
        }
    }
    Ok(index)
}

pub fn format_interactions(users: &[UserSequence], item_ids: &[String]) -> String {
    let mut out = String::new();
    for u in users {
        let items: Vec<&str> = u.items.iter().map(|&i| item_ids[i].as_str()).collect();
        let _ = writeln!(out, "{}\t{}", u.user_id, items.join(","));
    }
    out
}

/// Parse an interactions file against known item ids. Every unknown id is
/// collected and reported together.
pub fn parse_interactions(text: &str, item_ids: &[String]) -> Result<Vec<UserSequence>> {
    let index = id_index(item_ids)?;
    let mut users = Vec::new();
    let mut dangling = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (user, items) = line.split_once('\t').ok_or_else(|| Error::Parse {
            location: format!("line {}", n + 1),
            message: "expected `user_id<TAB>item,item,...`".into(),
        })?;
        if user.is_empty() {
            return Err(Error::Parse {
                location: format!("line {}", n + 1),
                message: "empty user id".into(),
            });
        }
        let mut seq = Vec::new();
        for id in items.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match index.get(id) {
                Some(&i) => seq.push(i),
                None => {
                    if !dangling.iter().any(|d: &String| d == id) {
                        dangling.push(id.to_string());
                    }
                }
            }
        }
        users.push(UserSequence {
            user_id: user.to_string(),
            items: seq,
        });
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingItems(dangling));
    }
    Ok(users)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_embeddings(&dir.join(TEXT_FILE), &ds.text)?;
    save_embeddings(&dir.join(VISION_FILE), &ds.vision)?;
    let path = dir.join(INTERACTIONS_FILE);
    std::fs::write(&path, format_interactions(&ds.users, ds.item_ids())).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = load_embeddings(&dir.join(TEXT_FILE))?;
    let vision = load_embeddings(&dir.join(VISION_FILE))?;
    for (t, m) in [(&text, Modality::Text), (&vision, Modality::Vision)] {
        if t.modality != m {
            return Err(Error::Contract(format!("{m} embedding file holds {} rows", t.modality)));
        }
    }
    let path = dir.join(INTERACTIONS_FILE);
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let users = parse_interactions(&raw, &text.ids).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })?;
    Dataset::new(text, vision, users)
}

pub fn ids_path(dir: &Path) -> PathBuf {
    dir.join(IDS_FILE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub items: usize,
    pub emb_dim: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Hidden bits per modality. Bit 0 carries the synergy rule, the rest
    /// are a per-user style.
    pub bits: usize,
    /// Parity window `w`.
    pub window: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            items: 512,
            emb_dim: 16,
            users: 2000,
            min_len: 6,
            max_len: 10,
            bits: 4,
            window: 2,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 9] = [
        "synth_items",
        "synth_emb_dim",
        "synth_users",
        "synth_min_len",
        "synth_max_len",
        "synth_bits",
        "synth_window",
        "synth_sigma",
        "seed",
    ];

    pub fn categories(&self) -> usize {
        1 << (2 * self.bits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("parity window {} must be at least 2", self.window)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("noise level {} must be finite and non-negative", self.sigma)));
        }
        if self.bits == 0 || self.bits > 8 {
            return Err(Error::Config(format!("bits per modality {} outside 1..=8", self.bits)));
        }
        if self.emb_dim < self.bits {
            return Err(Error::Config(format!(
                "embedding dim {} cannot hold {} orthogonal bit directions",
                self.emb_dim, self.bits
            )));
        }
        // Centers differing in one bit sit 2 apart.
        if 6.0 * self.sigma > 2.0 {
            return Err(Error::Config(format!("noise level {} leaves clusters closer than 6 sigma", self.sigma)));
        }
        if self.items < self.categories() {
            return Err(Error::InsufficientData(format!(
                "{} items cannot cover {} categories",
                self.items,
                self.categories()
            )));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sequence lengths {}..={} must satisfy 3 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if self.users == 0 {
            return Err(Error::Config("no users to generate".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.fill("synth_items", &mut self.items)?;
        kv.fill("synth_emb_dim", &mut self.emb_dim)?;
        kv.fill("synth_users", &mut self.users)?;
        kv.fill("synth_min_len", &mut self.min_len)?;
        kv.fill("synth_max_len", &mut self.max_len)?;
        kv.fill("synth_bits", &mut self.bits)?;
        kv.fill("synth_window", &mut self.window)?;
        kv.fill("synth_sigma", &mut self.sigma)?;
        kv.fill("seed", &mut self.seed)
    }
}

/// Generated corpus plus the hidden `(text bits, vision bits)` of each item.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub patterns: Vec<(u32, u32)>,
}

fn orthonormal<R: Rng>(k: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn center(bits: u32, dirs: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; dirs[0].len()];
    for (b, d) in dirs.iter().enumerate() {
        let s = if bits >> b & 1 == 1 { 1.0 } else { -1.0 };
        c.iter_mut().zip(d).for_each(|(x, y)| *x += s * y);
    }
    c
}

/// Planted-synergy corpus. Item `i` has hidden pattern `i mod 4^bits`
/// split into text and vision bits; embeddings are `±1` along per-bit
/// orthonormal directions plus `N(0, sigma^2)` noise. Within a user every
/// item shares the user's style bits (1 and up). After `window` random
/// items, the next item's vision bit 0 is the parity of
/// `t0 XOR v0` over the last `window` items and its text bit 0 is fresh, so
/// the target's vision bit is independent of either stream alone.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_modality = 1u32 << cfg.bits;
    let cats = cfg.categories();
    let text_dirs = orthonormal(cfg.bits, cfg.emb_dim, &mut rng);
    let vision_dirs = orthonormal(cfg.bits, cfg.emb_dim, &mut rng);
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let width = (cfg.items - 1).to_string().len();

    let mut patterns = Vec::with_capacity(cfg.items);
    let mut ids = Vec::with_capacity(cfg.items);
    let (mut trows, mut vrows) = (Vec::with_capacity(cfg.items), Vec::with_capacity(cfg.items));
    let mut by_pattern: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for i in 0..cfg.items {
        let c = (i % cats) as u32;
        let p = (c % per_modality, c / per_modality);
        for (row, bits, dirs) in [(&mut trows, p.0, &text_dirs), (&mut vrows, p.1, &vision_dirs)] {
            let mut e = center(bits, dirs);
            // Stored as f32 on disk; keep values exactly representable.
            for x in &mut e {
                *x = (*x + noise.sample(&mut rng)) as f32 as f64;
            }
            row.push(e);
        }
        ids.push(format!("i{i:0width$}"));
        patterns.push(p);
        by_pattern.entry(p).or_default().push(i);
    }

    let style_mask = per_modality - 2;
    let mut users = Vec::with_capacity(cfg.users);
    let uwidth = (cfg.users - 1).to_string().len();
    for u in 0..cfg.users {
        let st = rng.random::<u32>() & style_mask;
        let sv = rng.random::<u32>() & style_mask;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut bits: Vec<(u32, u32)> = Vec::with_capacity(len);
        let mut items = Vec::with_capacity(len);
        for k in 0..len {
            let t0 = rng.random::<u32>() & 1;
            let v0 = if k < cfg.window {
                rng.random::<u32>() & 1
            } else {
                bits[k - cfg.window..k].iter().fold(0, |acc, &(t, v)| acc ^ t ^ v)
            };
            bits.push((t0, v0));
            let choices = &by_pattern[&(st | t0, sv | v0)];
            items.push(*choices.choose(&mut rng).expect("every pattern has items"));
        }
        users.push(UserSequence {
            user_id: format!("u{u:0uwidth$}"),
            items,
        });
    }

    let text = EmbeddingTable {
        modality: Modality::Text,
        ids: ids.clone(),
        rows: trows,
    };
    let vision = EmbeddingTable {
        modality: Modality::Vision,
        ids,
        rows: vrows,
    };
    Ok(Synthetic {
        dataset: Dataset::new(text, vision, users)?,
        patterns,
    })
}

/// Quantizers for both modalities and the resulting identifier map.
#[derive(Debug, Clone)]
pub struct Tokenized {
    pub map: IdentifierMap,
    pub text: RqVaeModel,
    pub vision: RqVaeModel,
    pub reports: [RqTrainReport; 2],
}

/// Train one RQ-VAE per modality (the vision one with `seed + 1`) and
/// assign every item its identifier.
pub fn tokenize_dataset(ds: &Dataset, config: &RqVaeConfig) -> Result<Tokenized> {
    let (text, rt) = train_rqvae(&ds.text.rows, Modality::Text, config)?;
    let vconfig = RqVaeConfig {
        seed: config.seed.wrapping_add(1),
        ..config.clone()
    };
    let (vision, rv) = train_rqvae(&ds.vision.rows, Modality::Vision, &vconfig)?;
    let vocab = build_vocab(config.depth, config.codebook_size);
    let items = ds
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, id)| tokenize_item(id, &ds.text.rows[i], &ds.vision.rows[i], &text, &vision, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let map = resolve_collisions(&items, &vocab)?;
    Ok(Tokenized {
        map,
        text,
        vision,
        reports: [rt, rv],
    })
}

/// User sequences as identifier-map positions. Items the map does not
/// know are reported together.
pub fn map_sequences(ds: &Dataset, map: &IdentifierMap) -> Result<Vec<Vec<usize>>> {
    let mut missing = Vec::new();
    let pos: Vec<Option<usize>> = ds
        .item_ids()
        .iter()
        .map(|id| {
            let p = map.position(id);
            if p.is_none() {
                missing.push(id.clone());
            }
            p
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::DanglingItems(missing));
    }
    Ok(ds
        .users
        .iter()
        .map(|u| u.items.iter().map(|&i| pos[i].expect("checked above")).collect())
        .collect())
}
