use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmgr::backbone::{load_checkpoint, save_checkpoint, Backbone, PrefixTrie};
use mmgr::config::KeyValues;
use mmgr::data::{generate_synthetic, ids_path, load_dataset, map_sequences, save_dataset, tokenize_dataset, SynthConfig};
use mmgr::eval::{evaluate, split_leave_one_out, InputMode, Metric, Splits};
use mmgr::pid::{attention_share, audit_model, share_inputs};
use mmgr::rq::files::save_codebooks;
use mmgr::rq::{IdentifierMap, RqVaeConfig};
use mmgr::train::{backbone_config, train, TrainConfig, Variant, BACKBONE_KEYS};
use mmgr::Modality;

#[derive(Parser)]
#[command(name = "mmgr", about = "Multimodal generative recommendation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-synergy synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the per-modality quantizers and write the identifier map.
    Tokenize {
        #[arg(long)]
        data: PathBuf,
        /// Identifier map path (default: DATA/ids.txt).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the recommender.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        /// Checkpoint path; the config is written next to it as `.meta`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Training-curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Leave-one-out evaluation with beam search.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        beam: usize,
        /// test or valid.
        #[arg(long, default_value = "test")]
        split: String,
        /// joint, text or vision.
        #[arg(long, default_value = "joint")]
        input: String,
        /// Metric CSV; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synergy audit from unimodal and joint scores.
    Pid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long, default_value = "ndcg@10")]
        metric: Metric,
        #[arg(long, default_value_t = 20)]
        beam: usize,
        #[arg(long, default_value = "run")]
        run_id: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-modality attention share over users' test histories.
    AttnShare {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn known_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = SynthConfig::KEYS.to_vec();
    keys.extend(RqVaeConfig::KEYS);
    keys.extend(TrainConfig::KEYS);
    keys.extend(BACKBONE_KEYS);
    keys.sort_unstable();
    keys.dedup();
    keys
}

fn load_kv(common: &Common) -> Result<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    for s in &common.set {
        let Some((k, v)) = s.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {s:?}");
        };
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    kv.check_known(&known_keys())?;
    Ok(kv)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct Loaded {
    map: IdentifierMap,
    splits: Splits,
}

fn load_data(data: &Path, ids: Option<&Path>) -> Result<Loaded> {
    let ds = load_dataset(data)?;
    let ids = ids.map_or_else(|| ids_path(data), Path::to_path_buf);
    let map = IdentifierMap::load(&ids)?;
    let seqs = map_sequences(&ds, &map)?;
    let splits = split_leave_one_out(&seqs);
    if splits.dropped > 0 {
        eprintln!("dropped {} users with fewer than 3 interactions", splits.dropped);
    }
    Ok(Loaded { map, splits })
}

fn load_model(checkpoint: &Path, map: &IdentifierMap) -> Result<Backbone> {
    let (model, vocab, _) = load_checkpoint(checkpoint)?;
    if vocab.fingerprint() != map.vocab().fingerprint() {
        bail!("checkpoint vocabulary does not match the identifier map");
    }
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, common } => {
            let kv = load_kv(&common)?;
            let mut cfg = SynthConfig::default();
            cfg.apply(&kv)?;
            let s = generate_synthetic(&cfg)?;
            save_dataset(&out, &s.dataset)?;
            let m = s.dataset.metadata();
            eprintln!(
                "{} items, {} users, {} interactions, avg len {:.3}, sparsity {:.5}",
                m.items, m.users, m.interactions, m.avg_len, m.sparsity
            );
        }
        Command::Tokenize { data, out, common } => {
            let kv = load_kv(&common)?;
            let mut cfg = RqVaeConfig::default();
            cfg.apply(&kv)?;
            let ds = load_dataset(&data)?;
            let t = tokenize_dataset(&ds, &cfg)?;
            let out = out.unwrap_or_else(|| ids_path(&data));
            t.map.save(&out)?;
            for (m, model) in [(Modality::Text, &t.text), (Modality::Vision, &t.vision)] {
                let mut p = out.as_os_str().to_owned();
                p.push(format!(".{m}.sgc"));
                save_codebooks(Path::new(&p), &model.codebooks)?;
            }
            for (m, r) in Modality::BOTH.iter().zip(&t.reports) {
                let last = r.recon_per_epoch.last().copied().unwrap_or(f64::NAN);
                eprintln!("{m}: reconstruction {last:.6}, {} codes reseeded", r.reseeded);
            }
            eprintln!("{} items, {} suffix tokens", t.map.len(), t.map.vocab().suffixes());
        }
        Command::Train {
            data,
            ids,
            out,
            variant,
            curve,
            common,
        } => {
            let mut kv = load_kv(&common)?;
            if let Some(v) = variant {
                kv.set("variant", v);
            }
            let mut cfg = TrainConfig::default();
            cfg.apply(&kv)?;
            let loaded = load_data(&data, ids.as_deref())?;
            let bcfg = backbone_config(&loaded.map, &kv)?;
            let model = Backbone::new(bcfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            let outcome = train(model, &loaded.map, &loaded.splits.train, &loaded.splits.valid, &cfg, |l| {
                eprintln!("{l}")
            })?;
            let mut extra = KeyValues::new();
            cfg.to_kv(&mut extra);
            extra.set("best_epoch", outcome.best_epoch);
            save_checkpoint(&out, &outcome.model, loaded.map.vocab(), &extra)?;
            if let Some(c) = curve {
                write_out(Some(&c), &outcome.curve_csv())?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            ids,
            beam,
            split,
            input,
            out,
        } => {
            let loaded = load_data(&data, ids.as_deref())?;
            let model = load_model(&checkpoint, &loaded.map)?;
            let examples = match split.as_str() {
                "test" => &loaded.splits.test,
                "valid" => &loaded.splits.valid,
                other => bail!("unknown split {other:?}; expected test or valid"),
            };
            let mode = match input.as_str() {
                "joint" => InputMode::Joint,
                other => InputMode::Only(other.parse().map_err(anyhow::Error::msg)?),
            };
            let trie = PrefixTrie::from_map(&loaded.map)?;
            let report = evaluate(&model, &loaded.map, &trie, examples, beam, mode)?;
            print!("{}", report.to_table());
            if let Some(p) = out {
                write_out(Some(&p), &report.to_csv())?;
            }
        }
        Command::Pid {
            checkpoint,
            data,
            ids,
            metric,
            beam,
            run_id,
            out,
        } => {
            let loaded = load_data(&data, ids.as_deref())?;
            let model = load_model(&checkpoint, &loaded.map)?;
            let report = audit_model(&model, &loaded.map, &loaded.splits.test, metric, beam)?;
            write_out(out.as_deref(), &report.to_csv(&run_id, metric))?;
        }
        Command::AttnShare {
            checkpoint,
            data,
            ids,
            out,
        } => {
            let loaded = load_data(&data, ids.as_deref())?;
            let model = load_model(&checkpoint, &loaded.map)?;
            let inputs = share_inputs(&loaded.map, &loaded.splits.test, model.config.max_len);
            let share = attention_share(&model, &loaded.map, &inputs)?;
            write_out(out.as_deref(), &share.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
