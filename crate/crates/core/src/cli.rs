//! The `mgsa` command line. Every subcommand writes under `--out`, echoes
//! the effective configuration there as `config.json`, and prints a one-line
//! JSON summary on stdout. On failure the files it created are removed and a
//! one-line JSON error goes to stderr.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Ablation, ModelConfig, Profile, TrainConfig};
use crate::error::{Error, Result};
use crate::kg::{cluster_by_head, parse_corpus, write_corpus, Corpus, Example, KnowledgeGraph, Split, Triple};
use crate::metrics::{score, ScoreReport};
use crate::model::Model;
use crate::seq2seq::{generate_all, model_grad_check, train, NumericPrecision};
use crate::synthetic::{exact_match, toy_corpus, DirectionTask};
use crate::vocab::{build_vocab, Vocab};

pub const GRADCHECK_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "mgsa", version, about = "Knowledge-graph-to-text generation with multi-granularity graph structure attention")]
pub struct Cli {
    /// JSON run configuration; missing keys take the profile's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "desk")]
    pub profile: Profile,
    /// Beam width for decoding; 1 is greedy.
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus, cluster triples by head and write it back with its vocabulary.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Dump both linearizations of every example.
    Linearize {
        #[arg(long)]
        input: PathBuf,
    },
    /// Dump the structure matrices of every example.
    Matrices {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model; writes checkpoints and the loss log.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        /// Held-out corpus for picking the checkpoint with the best BLEU.
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Decode a corpus with a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score generated text against corpus references.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare analytic gradients of the training loss with central differences.
    Gradcheck {
        /// Corpus whose first example is used; a built-in two-triple graph otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        per_param: usize,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, value_enum, default_value = "double-double")]
        precision: Precision,
    },
    /// Train and score every structure switch and the lambda grid.
    Ablate {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Write a generated corpus.
    Synth {
        #[arg(long, value_enum)]
        task: SynthTask,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    DoubleDouble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthTask {
    /// Sixteen fixed examples.
    Toy,
    /// Head/tail role task, 200 train and 50 held out.
    Direction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Model, training and path settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    pub vocab_min_count: usize,
}

impl RunConfig {
    pub fn for_profile(p: Profile) -> Self {
        RunConfig {
            model: p.model(),
            train: p.train(),
            data: DataPaths::default(),
            vocab_min_count: 1,
        }
    }

    /// Profile values, overlaid key by key with `file`, then with flags.
    pub fn resolve(profile: Profile, file: Option<&Path>, seed: Option<u64>, beam: Option<usize>) -> Result<Self> {
        let mut v = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut v, over);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        if let Some(b) = beam {
            cfg.train.beam_width = b;
        }
        cfg.model.validate()?;
        if cfg.train.beam_width == 0 {
            return Err(Error::Config("beam width must be positive".into()));
        }
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Floats carry 17 significant digits so outputs round-trip and compare
/// byte for byte.
fn write_json(v: &Value, indent: Option<usize>, out: &mut String) {
    let nl = |out: &mut String, depth: usize| {
        if let Some(w) = indent {
            out.push('\n');
            out.extend(std::iter::repeat_n(' ', w * depth));
        }
    };
    fn go(v: &Value, depth: usize, indent: Option<usize>, out: &mut String, nl: &dyn Fn(&mut String, usize)) {
        match v {
            Value::Number(n) if n.is_f64() => {
                let x = n.as_f64().unwrap_or(0.0);
                let _ = write!(out, "{x:.16e}");
            }
            Value::Array(a) if !a.is_empty() => {
                out.push('[');
                for (i, x) in a.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    // keep rows of scalars on one line
                    if x.is_array() || x.is_object() {
                        nl(out, depth + 1);
                    }
                    go(x, depth + 1, indent, out, nl);
                }
                if a.iter().any(|x| x.is_array() || x.is_object()) {
                    nl(out, depth);
                }
                out.push(']');
            }
            Value::Object(m) if !m.is_empty() => {
                out.push('{');
                for (i, (k, x)) in m.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    nl(out, depth + 1);
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    if indent.is_some() {
                        out.push(' ');
                    }
                    go(x, depth + 1, indent, out, nl);
                }
                nl(out, depth);
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    go(v, 0, indent, out, &nl);
}

/// Pretty JSON with 17-significant-digit floats.
pub fn to_json_pretty(v: &impl Serialize) -> String {
    let mut s = String::new();
    write_json(&serde_json::to_value(v).expect("serializable"), Some(2), &mut s);
    s.push('\n');
    s
}

/// Single-line JSON with 17-significant-digit floats.
pub fn to_json_line(v: &impl Serialize) -> String {
    let mut s = String::new();
    write_json(&serde_json::to_value(v).expect("serializable"), None, &mut s);
    s
}

/// Files written by the current run, removed again if it fails.
struct RunDir {
    root: PathBuf,
    created_root: bool,
    written: Vec<PathBuf>,
}

impl RunDir {
    fn open(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            created_root,
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if !self.written.contains(&p) {
            self.written.push(p.clone());
        }
        p
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn rollback(self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
        if self.created_root {
            let _ = std::fs::remove_dir(&self.root);
        }
    }
}

fn load(path: &Path, split: Split) -> Result<Corpus> {
    let c = parse_corpus(path, split)?;
    if c.examples.is_empty() {
        return Err(Error::InvalidExample(format!("{} has no examples", path.display())));
    }
    Ok(c)
}

fn pick<'a>(flag: &'a Option<PathBuf>, cfg: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    flag.as_deref()
        .or(cfg.as_deref())
        .ok_or_else(|| Error::Usage(format!("no {what} corpus: pass --{what} or set data.{what} in the config")))
}

/// Vocabulary over the words of `examples` (used where no training corpus exists).
fn vocab_of(examples: &[Example]) -> Vocab {
    let corpus = Corpus {
        examples: examples.to_vec(),
        split: Split::Train,
    };
    build_vocab(&corpus, 1)
}

fn gradcheck_fixture() -> Example {
    let g = KnowledgeGraph::new(vec![
        Triple::new("ada lovelace", "field", "mathematics"),
        Triple::new("ada lovelace", "born in", "london"),
    ])
    .expect("fixture is valid");
    Example::new(g, vec!["ada lovelace was a mathematician born in london".into()]).expect("fixture is valid")
}

/// Structure arms and the lambda grid compared by `ablate`.
pub fn ablation_arms(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut arms = Vec::new();
    let with = |f: &dyn Fn(&mut Ablation)| {
        let mut c = base.clone();
        f(&mut c.encoder.ablation);
        c
    };
    arms.push(("full".to_string(), base.clone()));
    arms.push(("no_adjacency".into(), with(&|a| a.adjacency = false)));
    arms.push(("no_entity_bias".into(), with(&|a| a.entity_bias = false)));
    arms.push(("no_word_module".into(), with(&|a| a.word_module = false)));
    arms.push(("no_word_bias".into(), with(&|a| a.word_bias = false)));
    arms.push(("no_structure".into(), with(&|a| *a = Ablation::no_structure())));
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let mut c = base.clone();
        c.encoder.lambda = lambda;
        arms.push((format!("lambda={lambda}"), c));
    }
    arms
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub exact_match: f64,
    pub final_loss: f64,
}

/// Trains one model per arm on `train` and scores it on `test`.
pub fn run_ablation(
    arms: &[(String, ModelConfig)],
    train_set: &[Example],
    test_set: &[Example],
    vocab: &Vocab,
    tc: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let refs: Vec<Vec<String>> = test_set.iter().map(|e| e.references.clone()).collect();
    arms.iter()
        .map(|(arm, cfg)| {
            let mut m = Model::new(cfg.clone(), vocab.clone(), tc.seed)?;
            let log = train(&mut m, train_set, tc, |_, _, _| Ok(()))?;
            let out = generate_all(&m, test_set, tc.beam_width)?;
            let s = score(&out, &refs)?;
            Ok(AblationRow {
                arm: arm.clone(),
                bleu4: s.bleu4,
                rouge_l: s.rouge_l,
                exact_match: exact_match(&out, test_set),
                final_loss: log.epochs.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Runs one parsed command, returning the stdout summary.
pub fn execute(cli: &Cli) -> Result<Value> {
    let cfg = RunConfig::resolve(cli.profile, cli.config.as_deref(), cli.seed, cli.beam)?;
    let mut dir = RunDir::open(&cli.out)?;
    match dispatch(cli, &cfg, &mut dir) {
        Ok(v) => Ok(v),
        Err(e) => {
            dir.rollback();
            Err(e)
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig, dir: &mut RunDir) -> Result<Value> {
    dir.write("config.json", &to_json_pretty(cfg))?;
    match &cli.command {
        Command::Preprocess { input, split } => {
            let mut c = load(input, *split)?;
            for ex in &mut c.examples {
                ex.graph = cluster_by_head(&ex.graph);
            }
            let vocab = build_vocab(&c, cfg.vocab_min_count);
            let p = dir.path("corpus.jsonl");
            write_corpus(&p, &c)?;
            dir.write("vocab.json", &to_json_pretty(&vocab))?;
            Ok(json!({"examples": c.examples.len(), "vocab": vocab.len(), "corpus": p}))
        }
        Command::Linearize { input } => {
            let c = load(input, Split::Train)?;
            let model = Model::new(cfg.model.clone(), vocab_of(&c.examples), 0)?;
            let mut rows = Vec::new();
            for (i, ex) in c.examples.iter().enumerate() {
                let p = model.prepare(&ex.graph)?;
                rows.push(json!({
                    "index": i,
                    "entity": {"tokens": model.vocab.decode(&p.entity.tokens).split(' ').collect::<Vec<_>>(), "units": p.entity.spans.units()},
                    "word": {"tokens": model.vocab.decode(&p.word.tokens).split(' ').collect::<Vec<_>>(), "nodes": p.word.words.nodes()},
                }));
            }
            dir.write("linearize.json", &to_json_pretty(&rows))?;
            Ok(json!({"examples": rows.len()}))
        }
        Command::Matrices { input } => {
            let c = load(input, Split::Train)?;
            let model = Model::new(cfg.model.clone(), vocab_of(&c.examples), 0)?;
            let mut rows = Vec::new();
            for (i, ex) in c.examples.iter().enumerate() {
                let p = model.prepare(&ex.graph)?;
                let units: Vec<&str> = (0..p.graph.num_units()).map(|u| p.graph.unit_label(u)).collect();
                rows.push(json!({
                    "index": i,
                    "units": units,
                    "rel_e": p.matrices.rel_e,
                    "adj": p.matrices.adj,
                    "rel_w": p.matrices.rel_w,
                }));
            }
            dir.write("matrices.json", &to_json_pretty(&rows))?;
            Ok(json!({"examples": rows.len()}))
        }
        Command::Train { train: tr, valid } => {
            let train_set = load(pick(tr, &cfg.data.train, "train")?, Split::Train)?;
            let valid_set = match valid.as_deref().or(cfg.data.valid.as_deref()) {
                Some(p) => Some(load(p, Split::Valid)?),
                None => None,
            };
            let vocab = build_vocab(&train_set, cfg.vocab_min_count);
            let mut model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;
            let last = dir.path("last.ckpt");
            let best = dir.path("best.ckpt");
            let mut best_score: Option<(usize, f64)> = None;
            let log = train(&mut model, &train_set.examples, &cfg.train, |epoch, m, _| {
                m.save(&last)?;
                if let Some(v) = &valid_set {
                    let out = generate_all(m, &v.examples, 1)?;
                    let refs: Vec<Vec<String>> = v.examples.iter().map(|e| e.references.clone()).collect();
                    let b = crate::metrics::bleu4(&out, &refs)?;
                    if best_score.is_none_or(|(_, s)| b > s) {
                        best_score = Some((epoch, b));
                        m.save(&best)?;
                    }
                }
                Ok(())
            })?;
            dir.write("loss.csv", &log.to_csv())?;
            let chosen = if best_score.is_some() { &best } else { &last };
            let model_path = dir.path("model.ckpt");
            std::fs::copy(chosen, &model_path).map_err(|e| Error::io(&model_path, e))?;
            Ok(json!({
                "epochs": log.epochs.len(),
                "final_loss": log.epochs.last(),
                "best_epoch": best_score.map(|b| b.0),
                "best_valid_bleu4": best_score.map(|b| b.1),
                "checkpoint": model_path,
            }))
        }
        Command::Generate { checkpoint, input } => {
            let model = Model::load(checkpoint)?;
            let c = load(pick(input, &cfg.data.test, "input")?, Split::Test)?;
            let out = generate_all(&model, &c.examples, cfg.train.beam_width)?;
            let mut text = String::new();
            for (i, o) in out.iter().enumerate() {
                text.push_str(&to_json_line(&json!({"id": i, "text": o})));
                text.push('\n');
            }
            let p = dir.write("generations.jsonl", &text)?;
            Ok(json!({"examples": out.len(), "beam": cfg.train.beam_width, "generations": p}))
        }
        Command::Evaluate { generations, input } => {
            let c = load(input, Split::Test)?;
            let cands = read_generations(generations, c.examples.len())?;
            let refs: Vec<Vec<String>> = c.examples.iter().map(|e| e.references.clone()).collect();
            let report: ScoreReport = score(&cands, &refs)?;
            dir.write("scores.json", &to_json_pretty(&report))?;
            Ok(json!({"bleu4": report.bleu4, "rougeL": report.rouge_l}))
        }
        Command::Gradcheck {
            input,
            per_param,
            eps,
            precision,
        } => {
            let ex = match input {
                Some(p) => load(p, Split::Train)?.examples.remove(0),
                None => gradcheck_fixture(),
            };
            let mut model = Model::new(cfg.model.clone(), vocab_of(std::slice::from_ref(&ex)), cfg.train.seed)?;
            let prec = match precision {
                Precision::F64 => NumericPrecision::F64,
                Precision::DoubleDouble => NumericPrecision::DoubleDouble,
            };
            let r = model_grad_check(&mut model, &ex, *eps, (*per_param).max(1), cfg.train.seed, prec)?;
            let pass = r.max_rel_error <= GRADCHECK_THRESHOLD;
            let summary = json!({
                "max_rel_error": r.max_rel_error,
                "worst_param": r.worst_param,
                "coordinates": r.coordinates,
                "threshold": GRADCHECK_THRESHOLD,
                "pass": pass,
            });
            if !pass {
                println!("{}", to_json_line(&summary));
                return Err(Error::CheckFailed(format!(
                    "max relative error {:e} in {} exceeds {GRADCHECK_THRESHOLD:e}",
                    r.max_rel_error, r.worst_param
                )));
            }
            dir.write("gradcheck.json", &to_json_pretty(&json!({"summary": summary, "params": r.params})))?;
            Ok(summary)
        }
        Command::Ablate { train: tr, test } => {
            let train_set = load(pick(tr, &cfg.data.train, "train")?, Split::Train)?;
            let test_set = load(pick(test, &cfg.data.test, "test")?, Split::Test)?;
            let vocab = build_vocab(&train_set, cfg.vocab_min_count);
            let rows = run_ablation(&ablation_arms(&cfg.model), &train_set.examples, &test_set.examples, &vocab, &cfg.train)?;
            let mut tsv = String::from("arm\tbleu4\trougeL\texact_match\tfinal_loss\n");
            for r in &rows {
                let _ = writeln!(tsv, "{}\t{:.4}\t{:.4}\t{:.4}\t{:.6}", r.arm, r.bleu4, r.rouge_l, r.exact_match, r.final_loss);
            }
            dir.write("ablate.json", &to_json_pretty(&rows))?;
            dir.write("ablate.tsv", &tsv)?;
            eprint!("{tsv}");
            Ok(json!({"arms": rows.len()}))
        }
        Command::Synth { task } => {
            let seed = cfg.train.seed;
            let (train_set, test_set) = match task {
                SynthTask::Toy => (toy_corpus(), Vec::new()),
                SynthTask::Direction => DirectionTask::default().generate(seed),
            };
            let mut files = vec![];
            let p = dir.path("train.jsonl");
            write_corpus(&p, &Corpus { examples: train_set, split: Split::Train })?;
            files.push(p);
            if !test_set.is_empty() {
                let p = dir.path("test.jsonl");
                write_corpus(&p, &Corpus { examples: test_set, split: Split::Test })?;
                files.push(p);
            }
            Ok(json!({"files": files}))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerationRecord {
    id: usize,
    text: String,
}

/// Reads `{"id", "text"}` lines; every id in `0..n` must appear once.
fn read_generations(path: &Path, n: usize) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Option<String>> = vec![None; n];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let slot = out.get_mut(rec.id).ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("id {} outside 0..{n}", rec.id),
        })?;
        if slot.replace(rec.text).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate id {}", rec.id),
            });
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::Metric(format!("no generation for id {i}"))))
        .collect()
}

/// One-line error record for stderr.
pub fn error_line(e: &Error) -> String {
    to_json_line(&json!({"error": {"kind": e.kind(), "message": e.to_string()}}))
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line(&Error::Usage(first.to_string())));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            println!("{}", to_json_line(&v));
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
