//! Training loop: saliency-guided views, the combined objective, AdamW with
//! linear warmup, and early stopping on validation NDCG@10.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, PrefixTrie};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::{evaluate, history_tokens, Example, InputMode, Metric};
use crate::modality::Modality;
use crate::optim::{AdamW, Gradients};
use crate::rq::{IdentifierMap, BOS, PAD};
use crate::saliency::{apply_mask, profile, random_mask};
use crate::synergy::{synergy_rows, unimodal_view, XI};
use crate::tensor::{Graph, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Random positions instead of the most salient ones, same count.
    WoSm,
    /// An in-batch neighbour's holistic view replaces the unimodal negative.
    WoUn,
    /// No contrastive term.
    WoScl,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::WoSm => "wo_SM",
            Variant::WoUn => "wo_UN",
            Variant::WoScl => "wo_SCL",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "wo_sm" => Ok(Variant::WoSm),
            "wo_un" => Ok(Variant::WoUn),
            "wo_scl" => Ok(Variant::WoScl),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?}; expected full, wo_SM, wo_UN or wo_SCL"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub variant: Variant,
    pub clip: f64,
    pub patience: usize,
    /// Shortest history used as a training pair.
    pub min_history: usize,
    /// Validation users scored per epoch; 0 disables early stopping.
    pub eval_users: usize,
    pub eval_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.05,
            epochs: 200,
            batch_size: 128,
            mask_ratio: 0.3,
            lambda: 0.003,
            tau: 0.07,
            seed: 0,
            variant: Variant::Full,
            clip: 1.0,
            patience: 10,
            min_history: 1,
            eval_users: 256,
            eval_beam: 20,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "lr",
        "weight_decay",
        "warmup_ratio",
        "epochs",
        "batch_size",
        "mask_ratio",
        "lambda",
        "tau",
        "seed",
        "variant",
        "clip",
        "patience",
        "min_history",
        "eval_users",
        "eval_beam",
    ];

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.fill("lr", &mut self.lr)?;
        kv.fill("weight_decay", &mut self.weight_decay)?;
        kv.fill("warmup_ratio", &mut self.warmup_ratio)?;
        kv.fill("epochs", &mut self.epochs)?;
        kv.fill("batch_size", &mut self.batch_size)?;
        kv.fill("mask_ratio", &mut self.mask_ratio)?;
        kv.fill("lambda", &mut self.lambda)?;
        kv.fill("tau", &mut self.tau)?;
        kv.fill("seed", &mut self.seed)?;
        kv.fill("variant", &mut self.variant)?;
        kv.fill("clip", &mut self.clip)?;
        kv.fill("patience", &mut self.patience)?;
        kv.fill("min_history", &mut self.min_history)?;
        kv.fill("eval_users", &mut self.eval_users)?;
        kv.fill("eval_beam", &mut self.eval_beam)
    }

    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("lr", self.lr);
        kv.set("weight_decay", self.weight_decay);
        kv.set("warmup_ratio", self.warmup_ratio);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("mask_ratio", self.mask_ratio);
        kv.set("lambda", self.lambda);
        kv.set("tau", self.tau);
        kv.set("seed", self.seed);
        kv.set("variant", self.variant);
        kv.set("clip", self.clip);
        kv.set("patience", self.patience);
        kv.set("min_history", self.min_history);
        kv.set("eval_users", self.eval_users);
        kv.set("eval_beam", self.eval_beam);
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("warmup_ratio", self.warmup_ratio),
            ("lambda", self.lambda),
            ("clip", self.clip),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if self.warmup_ratio > 1.0 {
            return Err(Error::Config(format!("warmup_ratio {} exceeds 1", self.warmup_ratio)));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if self.batch_size == 0 || self.eval_beam == 0 {
            return Err(Error::Config("batch_size and eval_beam must be positive".into()));
        }
        if self.min_history == 0 {
            return Err(Error::Config("min_history must be at least 1".into()));
        }
        Ok(())
    }

    /// The contrastive weight actually used.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::WoScl {
            0.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_gen: f64,
    /// Batch mean; zero when the term is off.
    pub l_syn: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub text_density: f64,
    pub vision_density: f64,
    pub dom_text: usize,
    pub dom_vision: usize,
}

pub const CURVE_HEADER: &str = "step,lr,l_gen,l_syn,loss,grad_norm,l_t,l_v,dom_text,dom_vision";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            self.l_gen,
            self.l_syn,
            self.loss,
            self.grad_norm,
            self.text_density,
            self.vision_density,
            self.dom_text,
            self.dom_vision
        )
    }

    pub fn log_line(&self) -> String {
        format!(
            "step {} L_Gen {:.4} L_Syn {:.4} L {:.4} l_t {:.4} l_v {:.4} dom t/v {}/{}",
            self.step,
            self.l_gen,
            self.l_syn,
            self.loss,
            self.text_density,
            self.vision_density,
            self.dom_text,
            self.dom_vision
        )
    }
}

/// Model architecture for an identifier map, with optional overrides.
pub fn backbone_config(map: &IdentifierMap, kv: &KeyValues) -> Result<BackboneConfig> {
    let mut c = BackboneConfig::new(map.vocab().size());
    kv.fill("layers", &mut c.layers)?;
    kv.fill("heads", &mut c.heads)?;
    kv.fill("d_model", &mut c.d_model)?;
    kv.fill("d_ff", &mut c.d_ff)?;
    kv.fill("max_len", &mut c.max_len)?;
    c.max_target_len = 2 * map.vocab().depth();
    c.validate()?;
    if c.max_len < 2 * map.vocab().depth() + 1 {
        return Err(Error::Config(format!(
            "max_len {} cannot hold one item of {} tokens plus EOS",
            c.max_len,
            2 * map.vocab().depth()
        )));
    }
    Ok(c)
}

pub const BACKBONE_KEYS: [&str; 5] = ["layers", "heads", "d_model", "d_ff", "max_len"];

/// Decoder input `[BOS, t_1..t_D, v_1..v_{D-1}]`: its outputs score the text
/// block from BOS and the vision block given the true text block.
pub fn decoder_input(map: &IdentifierMap, item: usize) -> Vec<u32> {
    let codes = map.items()[item].code_tokens();
    let mut v = Vec::with_capacity(codes.len());
    v.push(BOS);
    v.extend_from_slice(&codes[..codes.len() - 1]);
    v
}

pub struct Trainer<'a> {
    pub model: Backbone,
    pub config: TrainConfig,
    map: &'a IdentifierMap,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    warmup_steps: usize,
}

impl<'a> Trainer<'a> {
    /// `total_steps` sizes the warmup.
    pub fn new(model: Backbone, map: &'a IdentifierMap, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        if model.config.vocab_size != map.vocab().size() {
            return Err(Error::Contract(format!(
                "model vocabulary {} does not match identifier vocabulary {}",
                model.config.vocab_size,
                map.vocab().size()
            )));
        }
        let opt = AdamW::new(model.params(), config.lr, config.weight_decay);
        let warmup_steps = (config.warmup_ratio * total_steps as f64).ceil() as usize;
        Ok(Trainer {
            opt,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11),
            model,
            config,
            map,
            step: 0,
            warmup_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn current_lr(&self) -> f64 {
        if self.warmup_steps == 0 {
            self.config.lr
        } else {
            self.config.lr * ((self.step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Forward pass of the batch objective on a fresh graph. Returns the
    /// graph, the loss node and the step metrics (without lr and norm).
    pub fn batch_loss(&mut self, batch: &[Example]) -> Result<(Graph, crate::tensor::Var, StepMetrics)> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let map = self.map;
        let vocab = map.vocab();
        let d = vocab.depth();
        let b = batch.len();
        let len = 2 * d;
        let max_len = self.model.config.max_len;
        let mut g = Graph::new();

        let ori: Vec<Vec<u32>> = batch.iter().map(|e| history_tokens(map, &e.history, max_len)).collect();
        let refs: Vec<&[u32]> = ori.iter().map(Vec::as_slice).collect();
        let enc_ori = self.model.encode_batch(&mut g, &refs)?;

        let mut masked = Vec::with_capacity(b);
        let (mut lt, mut lv, mut dom_t, mut dom_v) = (0.0, 0.0, 0, 0);
        for (e, toks) in ori.iter().enumerate() {
            let maps = enc_ori.attention_maps(&g, e);
            let p = profile(toks, &enc_ori.pad[e], &maps, vocab)?;
            lt += p.text_density;
            lv += p.vision_density;
            match p.dominant {
                Modality::Text => dom_t += 1,
                Modality::Vision => dom_v += 1,
            }
            let view = if self.config.variant == Variant::WoSm {
                random_mask(toks, &p, self.config.mask_ratio, &mut self.rng)
            } else {
                apply_mask(toks, &p, self.config.mask_ratio)?
            };
            masked.push(view.tokens);
        }
        let uni_t: Vec<Vec<u32>> = ori.iter().map(|t| unimodal_view(t, vocab, Modality::Text)).collect();
        let uni_v: Vec<Vec<u32>> = ori.iter().map(|t| unimodal_view(t, vocab, Modality::Vision)).collect();
        let rest: Vec<&[u32]> = masked
            .iter()
            .chain(&uni_t)
            .chain(&uni_v)
            .map(Vec::as_slice)
            .collect();
        let enc_rest = self.model.encode_batch(&mut g, &rest)?;

        let dec_in: Vec<Vec<u32>> = batch.iter().map(|e| decoder_input(map, e.target)).collect();
        let ori_inputs: Vec<(usize, &[u32])> = dec_in.iter().enumerate().map(|(e, t)| (e, t.as_slice())).collect();
        let rest_inputs: Vec<(usize, &[u32])> = (0..3 * b).map(|i| (i, dec_in[i % b].as_slice())).collect();
        let dec_ori = self.model.decode_batch(&mut g, &enc_ori, &ori_inputs)?;
        let dec_rest = self.model.decode_batch(&mut g, &enc_rest, &rest_inputs)?;

        // Rows: ori (b), mask (b), text-only (b), vision-only (b), each 2D long.
        let mut labels = Vec::with_capacity(4 * b * len);
        for view in 0..4 {
            for e in batch {
                let codes = map.items()[e.target].code_tokens();
                for (j, &t) in codes.iter().enumerate() {
                    let keep = match view {
                        2 => j < d,
                        3 => j >= d,
                        _ => true,
                    };
                    labels.push(if keep { t as usize } else { PAD as usize });
                }
            }
        }
        let count = labels.iter().filter(|&&t| t != PAD as usize).count();
        let logits = g.concat_rows(&[dec_ori.logits, dec_rest.logits])?;
        let ce = g.cross_entropy(logits, &labels, Some(PAD as usize))?;
        let l_gen = g.scale(ce, count as f64 / b as f64);

        let lambda = self.config.effective_lambda();
        let (loss, l_syn_value) = if lambda == 0.0 {
            (l_gen, 0.0)
        } else {
            let hidden = g.concat_rows(&[dec_ori.hidden, dec_rest.hidden])?;
            let w = 1.0 / (d as f64 + XI);
            let group = |view: usize, e: usize, m: usize| -> Vec<(usize, f64)> {
                let base = (view * b + e) * len + m * d;
                (base..base + d).map(|r| (r, w)).collect()
            };
            let mut g_ori = Vec::with_capacity(2 * b);
            let mut g_mask = Vec::with_capacity(2 * b);
            let mut g_uni = Vec::with_capacity(2 * b);
            for e in 0..b {
                let other = if self.config.variant == Variant::WoUn && b > 1 {
                    let j = self.rng.random_range(0..b - 1);
                    Some(if j >= e { j + 1 } else { j })
                } else {
                    None
                };
                for m in 0..2 {
                    g_ori.push(group(0, e, m));
                    g_mask.push(group(1, e, m));
                    g_uni.push(match other {
                        Some(j) => group(0, j, m),
                        None => group(2 + m, e, m),
                    });
                }
            }
            let z_ori = g.gather_sum(hidden, g_ori)?;
            let z_mask = g.gather_sum(hidden, g_mask)?;
            let z_uni = g.gather_sum(hidden, g_uni)?;
            let rows = synergy_rows(&mut g, z_mask, z_ori, z_uni, self.config.tau)?;
            let s = g.sum(rows);
            let l_syn = g.scale(s, 1.0 / b as f64);
            let weighted = g.scale(l_syn, lambda);
            (g.add(l_gen, weighted)?, g.scalar(l_syn))
        };

        let metrics = StepMetrics {
            step: self.step,
            lr: 0.0,
            l_gen: g.scalar(l_gen),
            l_syn: l_syn_value,
            loss: g.scalar(loss),
            grad_norm: 0.0,
            text_density: lt / b as f64,
            vision_density: lv / b as f64,
            dom_text: dom_t,
            dom_vision: dom_v,
        };
        Ok((g, loss, metrics))
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &[Example]) -> Result<StepMetrics> {
        let (mut g, loss, mut metrics) = self.batch_loss(batch)?;
        if !metrics.loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!(
                    "L_Gen {} L_Syn {} flags {:?} first users {:?}",
                    metrics.l_gen,
                    metrics.l_syn,
                    g.flags(),
                    batch.iter().take(4).map(|e| e.user).collect::<Vec<_>>()
                ),
            });
        }
        g.backward(loss)?;
        let mut grads = Gradients::zeros(self.model.params());
        for (id, gr) in g.param_grads() {
            grads.accumulate(id, gr);
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                detail: format!("gradient is not finite; loss {}", metrics.loss),
            });
        }
        metrics.grad_norm = if self.config.clip > 0.0 {
            grads.clip(self.config.clip)
        } else {
            grads.global_norm()
        };
        let lr = self.current_lr();
        metrics.lr = lr;
        self.opt.step_with_lr(self.model.params_mut(), &grads, lr);
        self.step += 1;
        Ok(metrics)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Backbone,
    pub curve: Vec<StepMetrics>,
    /// Validation NDCG@10 after each epoch.
    pub valid_ndcg: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from(CURVE_HEADER);
        out.push('\n');
        for m in &self.curve {
            let _ = writeln!(out, "{}", m.csv_row());
        }
        out
    }
}

pub fn training_pairs(train: &[Example], min_history: usize) -> Vec<Example> {
    train.iter().filter(|e| e.history.len() >= min_history).cloned().collect()
}

/// Full training run. The returned model holds the parameters of the best
/// validation epoch (the last epoch when early stopping is off).
pub fn train(
    model: Backbone,
    map: &IdentifierMap,
    train_split: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    let pairs = training_pairs(train_split, config.min_history);
    if pairs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no training pairs with at least {} history items",
            config.min_history
        )));
    }
    let per_epoch = pairs.len().div_ceil(config.batch_size);
    let mut trainer = Trainer::new(model, map, config.clone(), per_epoch * config.epochs)?;
    let trie = PrefixTrie::from_map(map)?;
    let probe: Vec<Example> = valid.iter().take(config.eval_users).cloned().collect();
    let early = !probe.is_empty();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::new();
    let mut valid_ndcg = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs_run = 0;
    for epoch in 0..config.epochs {
        order.shuffle(trainer.rng_mut());
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let m = trainer.train_step(&batch)?;
            sum += m.loss;
            n += 1;
            curve.push(m);
        }
        epochs_run = epoch + 1;
        if !early {
            log(&format!("epoch {epoch} loss {:.4}", sum / n as f64));
            continue;
        }
        let report = evaluate(&trainer.model, map, &trie, &probe, config.eval_beam, InputMode::Joint)?;
        let score = Metric::Ndcg(10).mean(&report.ranks);
        valid_ndcg.push(score);
        log(&format!("epoch {epoch} loss {:.4} valid ndcg@10 {score:.4}", sum / n as f64));
        match &best {
            Some((s, _, _)) if score <= *s => {}
            _ => best = Some((score, epoch, trainer.model.params().clone())),
        }
        if let Some((_, be, _)) = &best {
            if epoch - be >= config.patience {
                log(&format!("early stop after epoch {epoch}; best epoch {be}"));
                break;
            }
        }
    }
    let mut model = trainer.model;
    let best_epoch = match best {
        Some((_, e, params)) => {
            *model.params_mut() = params;
            e
        }
        None => epochs_run.saturating_sub(1),
    };
    Ok(TrainOutcome {
        model,
        curve,
        valid_ndcg,
        best_epoch,
        epochs_run,
    })
}
