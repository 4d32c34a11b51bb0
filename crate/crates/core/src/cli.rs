//! Command-line front end. Progress goes to stderr, results (CSV rows or
//! written paths) to stdout.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{parse_ppm, Manifest, Split};
use crate::model::{Branch, Detector, DetectorConfig};
use crate::perturb::{robustness_sweep, PerturbSpec};
use crate::semantic::{read_embedding_file, EmbeddingFile, FEMB_MAGIC};
use crate::toy::{write_dataset, ToyLayout};
use crate::train::{evaluate, prepare_split, train, FocalLossConfig, History, TrainConfig};
use crate::weights::{ParamStore, FWTS_MAGIC};

/// Everything a run depends on. Config files use the same sections:
/// `[model]`, `[train]` and `[focal]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: DetectorConfig,
    pub train: TrainConfig,
    pub focal: FocalLossConfig,
}

impl RunConfig {
    /// Read an optional TOML file, then apply `section.key=value` overrides.
    /// Values parse as TOML and fall back to plain strings.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = match path {
            Some(p) => fs::read_to_string(p)?
                .parse()
                .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.message().to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate_params()?;
        cfg.focal.validate()?;
        Ok(cfg)
    }

    /// One line of `key=value` pairs that [`RunConfig::resolve`] accepts.
    pub fn to_line(&self) -> String {
        let v = toml::Value::try_from(self).expect("config serializes");
        let mut out = Vec::new();
        flatten("", &v, &mut out);
        out.join(" ")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let last = last.ok_or_else(|| Error::InvalidConfig(format!("empty key in {key:?}")))?;
    let mut t = table;
    for p in parts {
        let entry = t.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("{key:?}: {p:?} is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        // no spaces, so the line splits on whitespace
        toml::Value::Array(a) => {
            let items: Vec<String> = a.iter().map(ToString::to_string).collect();
            out.push(format!("{prefix}=[{}]", items.join(",")));
        }
        other => out.push(format!("{prefix}={other}")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "freqdetect", version, about = "Detect synthesized images from forensic and frequency cues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML file with [model], [train] and [focal] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` overrides applied after the file, e.g. `train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// FEMB embedding file, used when `model.semantic_source = "file"`.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dump local forensic feature maps of one split as an FWTS file.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the train split and calibrate on the val split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for weights.fwts, history.csv and config.toml.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a split and print `metric,value` rows.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the full model and one model per dropped branch, then print
    /// test-split `config,acc,ap` rows.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        /// Branches to remove, one run each: npr, grad, semantic.
        #[arg(long, value_delimiter = ',', required = true)]
        drop: Vec<Branch>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Robustness sweep over the test split; prints `kind,level,acc,ap`.
    Perturb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// `kind:level[,kind:level...]`; defaults to the standard ladder.
        #[arg(long)]
        specs: Option<String>,
        /// Seed for noise perturbations.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Describe an FWTS, FEMB or PPM file.
    Inspect { path: PathBuf },
    /// Write the synthetic real/upsampled corpus with its manifest.
    Toy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        val: usize,
        #[arg(long, default_value_t = 120)]
        test: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command, &mut io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            }
        }
    }
}

struct Loaded {
    cfg: RunConfig,
    manifest: Manifest,
    embeddings: Option<EmbeddingFile>,
}

fn load(cfg: &ConfigArgs, manifest: &Path) -> Result<Loaded> {
    let resolved = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
    eprintln!("config: {}", resolved.to_line());
    let embeddings = cfg.embeddings.as_ref().map(read_embedding_file).transpose()?;
    Ok(Loaded { cfg: resolved, manifest: Manifest::load(manifest)?, embeddings })
}

fn trained_detector(l: &Loaded, model: DetectorConfig, tag: &str) -> Result<(Detector, History)> {
    let mut det = Detector::build(model)?;
    let emb = l.embeddings.as_ref();
    let tr = prepare_split(&det, &l.manifest, Split::Train, emb)?;
    let va = prepare_split(&det, &l.manifest, Split::Val, emb)?;
    eprintln!("{tag}: {} params, {} train / {} val images", det.param_count(), tr.len(), va.len());
    let hist = train(&mut det, &tr, &va, &l.cfg.train, &l.cfg.focal, |r| {
        eprintln!("{tag}: epoch {} loss {:.5} acc {:.4}", r.epoch, r.loss, r.acc)
    })?;
    eprintln!("{tag}: threshold {}", det.threshold());
    Ok((det, hist))
}

fn loaded_detector(l: &Loaded, weights: &Path) -> Result<Detector> {
    let mut det = Detector::build(l.cfg.model.clone())?;
    det.load_weights(weights)?;
    Ok(det)
}

fn dispatch(cmd: Command, out: &mut impl Write) -> Result<()> {
    match cmd {
        Command::Extract { manifest, split, out: path, cfg } => {
            let l = load(&cfg, &manifest)?;
            let det = Detector::build(l.cfg.model.clone())?;
            let samples = prepare_split(&det, &l.manifest, split.into(), l.embeddings.as_ref())?;
            let mut store = ParamStore::new();
            for s in samples {
                store.add_buffer(&s.id, s.feats)?;
            }
            store.save(&path)?;
            eprintln!("extract: {} feature maps", store.len());
            writeln!(out, "{}", path.display())?;
        }
        Command::Train { manifest, out: dir, cfg } => {
            let l = load(&cfg, &manifest)?;
            let (det, hist) = trained_detector(&l, l.cfg.model.clone(), "train")?;
            fs::create_dir_all(&dir)?;
            let (w, h, c) = (dir.join("weights.fwts"), dir.join("history.csv"), dir.join("config.toml"));
            det.save_weights(&w)?;
            fs::write(&c, l.cfg.to_toml())?;
            hist.save_csv(&h)?;
            for p in [w, h, c] {
                writeln!(out, "{}", p.display())?;
            }
        }
        Command::Eval { manifest, weights, split, cfg } => {
            let l = load(&cfg, &manifest)?;
            let det = loaded_detector(&l, &weights)?;
            let samples = prepare_split(&det, &l.manifest, split.into(), l.embeddings.as_ref())?;
            evaluate(&det, &samples, l.cfg.train.batch)?.write_csv(&mut *out)?;
        }
        Command::Ablate { manifest, drop, cfg } => {
            let l = load(&cfg, &manifest)?;
            let mut runs = vec![("full".to_string(), l.cfg.model.clone())];
            for b in drop {
                runs.push((format!("-{}", b.name()), l.cfg.model.without(b)));
            }
            let mut w = csv::Writer::from_writer(&mut *out);
            w.write_record(["config", "acc", "ap"])?;
            for (name, model) in runs {
                model.validate()?;
                let (det, _) = trained_detector(&l, model, &name)?;
                let test = prepare_split(&det, &l.manifest, Split::Test, l.embeddings.as_ref())?;
                let r = evaluate(&det, &test, l.cfg.train.batch)?;
                w.write_record([name, r.acc.to_string(), r.ap.to_string()])?;
                w.flush()?;
            }
        }
        Command::Perturb { manifest, weights, specs, seed, cfg } => {
            let l = load(&cfg, &manifest)?;
            let det = loaded_detector(&l, &weights)?;
            let specs = match specs {
                Some(s) => PerturbSpec::parse_list(&s, seed)?,
                None => PerturbSpec::default_ladder(seed),
            };
            let names: Vec<String> = specs.iter().map(ToString::to_string).collect();
            eprintln!("perturb: {}", names.join(","));
            robustness_sweep(&det, &l.manifest, &specs, l.embeddings.as_ref(), l.cfg.train.batch)?
                .write_csv(&mut *out)?;
        }
        Command::Inspect { path } => inspect(&path, out)?,
        Command::Toy { out: dir, train, val, test, seed } => {
            let m = write_dataset(&dir, &ToyLayout::standard(train, val, test, seed))?;
            eprintln!("toy: {} images", m.entries.len());
            writeln!(out, "{}", dir.join("manifest.csv").display())?;
        }
    }
    Ok(())
}

fn inspect(path: &Path, out: &mut impl Write) -> Result<()> {
    let bytes = fs::read(path)?;
    let magic: [u8; 4] = bytes.get(..4).and_then(|m| m.try_into().ok()).unwrap_or_default();
    if magic == FWTS_MAGIC {
        let entries = ParamStore::decode(&bytes)?;
        let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
        writeln!(out, "FWTS {} tensors, {total} values", entries.len())?;
        for (name, t) in entries {
            writeln!(out, "{name}\t{:?}", t.shape())?;
        }
    } else if magic == FEMB_MAGIC {
        let f = EmbeddingFile::decode(&bytes)?;
        writeln!(out, "FEMB D={} records={}", f.dim(), f.len())?;
        for r in f.records() {
            writeln!(out, "{}", r.id)?;
        }
    } else if bytes.starts_with(b"P") {
        let img = parse_ppm(&bytes)?;
        writeln!(out, "PPM {}x{}", img.width(), img.height())?;
    } else {
        return Err(Error::UnsupportedFormat(format!("{}: unrecognised file", path.display())));
    }
    Ok(())
}
