use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context as _};
use clap::{Args, Parser, Subcommand, ValueEnum};
use seglm_core::baselines::{surprisal_segment, CharLm, ModelKind};
use seglm_core::config::ExperimentConfig;
use seglm_core::corpus::{extract_lexicon, ContextFile, Corpus, Split};
use seglm_core::eval::{MetricsReport, SplitPolicy};
use seglm_core::experiment::{
    self as exp, load_dataset, read_segmentation, reindex, resolve_checkpoint, write_metrics, write_segmentation,
    RunMeta, LAST_CHECKPOINT,
};
use seglm_core::numeric::Checkpoint;
use seglm_core::snlm::Snlm;
use seglm_core::train::{evaluate_bpc, Data, Trainer};
use seglm_core::{par, Error};

#[derive(Parser)]
#[command(name = "seglm", version, about = "Segmental neural language models for word discovery")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true, conflicts_with = "dataset")]
    config: Option<PathBuf>,
    /// Start from a dataset preset instead of a config file.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// Corpus directory (train/valid/test.txt) or single file.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Split to process: train, valid, test or all.
    #[arg(long, global = true)]
    split: Option<Split>,
    /// Run directory, or a checkpoint file when reading (a directory resolves to its best.ckpt).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output file (segment, eval) or directory (baseline); stdout when omitted.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-sentence context vectors.
    #[arg(long, global = true)]
    context: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; resumes from `last.ckpt` when the directory holds one.
    Train {
        #[arg(long, value_enum, default_value_t = ModelChoice::Snlm)]
        model: ModelChoice,
    },
    /// Write the most probable segmentation of each sentence.
    Segment,
    /// Score a checkpoint (bpc, and P/R/F1 for segmental models) or a
    /// segmentation file (P/R/F1).
    Eval {
        #[arg(long, conflicts_with = "checkpoint")]
        segmentation: Option<PathBuf>,
    },
    /// Run a comparison system end to end.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Dump a lexicon as TSV: from a checkpoint, or extracted from the corpus.
    Lexicon,
    /// Print checkpoint metadata as JSON.
    Inspect,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelChoice {
    Snlm,
    Charlm,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Dp,
    Hdp,
    Surprisal,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 3,
        Some(Error::Config(_)) | Some(Error::Invalid(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already render their cause
            if e.downcast_ref::<Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.dataset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(p) = &c.corpus {
        cfg.dataset.corpus = Some(p.clone());
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(p) = &c.context {
        cfg.dataset.context = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if cli.common.print_config {
        return stdout(&cfg.to_toml());
    }
    let c = &cli.common;
    let command = cli.command.ok_or_else(|| usage("a subcommand is required; see --help"))?;
    match command {
        Command::Train { model } => train(&cfg, c, model),
        Command::Segment => segment(&cfg, c),
        Command::Eval { segmentation } => eval(&cfg, c, segmentation.as_deref()),
        Command::Baseline { kind } => baseline(&cfg, c, kind),
        Command::Lexicon => lexicon(&cfg, c),
        Command::Inspect => inspect(c),
    }
}

fn corpus(cfg: &ExperimentConfig) -> anyhow::Result<Corpus> {
    let path = cfg
        .dataset
        .corpus
        .as_deref()
        .ok_or_else(|| usage("no corpus: pass --corpus or set dataset.corpus"))?;
    Ok(load_dataset(path, cfg.dataset.strip_whitespace)?)
}

fn require_checkpoint(c: &Common) -> anyhow::Result<(PathBuf, Checkpoint)> {
    let path = c
        .checkpoint
        .as_deref()
        .map(resolve_checkpoint)
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let ck = Checkpoint::load(&path)?;
    Ok((path, ck))
}

/// Metadata stamped at training time, or derived from the config.
fn run_meta(ck: &Checkpoint, cfg: &ExperimentConfig, model: &str) -> RunMeta {
    RunMeta::from_checkpoint(ck).unwrap_or_else(|_| RunMeta::new(cfg, model))
}

fn policy(split: Split) -> SplitPolicy {
    match split {
        Split::All => SplitPolicy::Union,
        Split::Train => SplitPolicy::Train,
        Split::Valid => SplitPolicy::Valid,
        Split::Test => SplitPolicy::Test,
    }
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn stdout(text: &str) -> anyhow::Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(output: Option<&Path>, text: &str, meta: &RunMeta) -> anyhow::Result<()> {
    match output {
        Some(p) => write_segmentation(p, text, meta)?,
        None => stdout(text)?,
    }
    Ok(())
}

fn emit_metrics(output: Option<&Path>, reports: &[MetricsReport]) -> anyhow::Result<()> {
    match output {
        Some(p) => write_metrics(p, reports)?,
        None => stdout(&reports.iter().map(MetricsReport::to_json_line).collect::<String>())?,
    }
    Ok(())
}

fn contexts_for(cfg: &ExperimentConfig, needed: bool) -> anyhow::Result<Option<ContextFile>> {
    let ctx = exp::load_contexts(cfg)?;
    if needed && ctx.is_none() {
        return Err(usage("this model conditions on context vectors; pass --context"));
    }
    Ok(if needed { ctx } else { None })
}

fn train(cfg: &ExperimentConfig, c: &Common, choice: ModelChoice) -> anyhow::Result<()> {
    let corpus = corpus(cfg)?;
    let name = match choice {
        ModelChoice::Snlm => "snlm",
        ModelChoice::Charlm => "charlm",
    };
    let dir = c.checkpoint.clone().unwrap_or_else(|| cfg.output.checkpoint_dir.join(name));
    let meta = RunMeta::new(cfg, name);
    let last = dir.join(LAST_CHECKPOINT);
    let resume = if last.exists() {
        let ck = Checkpoint::load(&last)?;
        let old = RunMeta::from_checkpoint(&ck)?;
        if old.config_hash != meta.config_hash || old.model != meta.model {
            return Err(Error::Data(format!(
                "{} holds a run with a different configuration; use a fresh directory",
                dir.display()
            ))
            .into());
        }
        log::info!("resuming from {}", last.display());
        Some(ck)
    } else {
        None
    };
    let train_s = corpus.split(Split::Train);
    let valid_s = corpus.split(Split::Valid);
    let logs = match choice {
        ModelChoice::Snlm => {
            let ctx = exp::load_contexts(cfg)?;
            let mut trainer = match &resume {
                Some(ck) => Trainer::from_checkpoint(Snlm::from_checkpoint(ck)?, ck)?,
                None => Trainer::new(
                    exp::new_snlm(cfg, &corpus, ctx.as_ref())?,
                    cfg.train.clone(),
                    cfg.reg,
                    cfg.seed,
                )?,
            };
            let corpus = reindex(&corpus, &trainer.model.vocab)?;
            let (t, v) = (corpus.split(Split::Train), corpus.split(Split::Valid));
            exp::fit(&mut trainer, Data::new(&t, ctx.as_ref()), Data::new(&v, ctx.as_ref()), Some(&dir), &meta)?
        }
        ModelChoice::Charlm => {
            let mut trainer = match &resume {
                Some(ck) => Trainer::from_checkpoint(CharLm::from_checkpoint(ck)?, ck)?,
                None => Trainer::new(exp::new_char_lm(cfg, &corpus)?, cfg.train.clone(), cfg.reg, cfg.seed)?,
            };
            exp::fit(&mut trainer, Data::new(&train_s, None), Data::new(&valid_s, None), Some(&dir), &meta)?
        }
    };
    let best = logs.iter().map(|l| l.valid_bpc).fold(f64::INFINITY, f64::min);
    stdout(&format!(
        "{}\n",
        serde_json::json!({
            "checkpoint_dir": dir,
            "epochs_run": logs.len(),
            "best_valid_bpc": if best.is_finite() { Some(best) } else { None },
            "config_hash": meta.config_hash,
            "seed": meta.seed,
        })
    ))
}

fn segment(cfg: &ExperimentConfig, c: &Common) -> anyhow::Result<()> {
    let (_, ck) = require_checkpoint(c)?;
    let model = Snlm::from_checkpoint(&ck)?;
    let corpus = reindex(&corpus(cfg)?, &model.vocab)?;
    let ctx = contexts_for(cfg, model.config.context_dim.is_some())?;
    let sentences = corpus.split(c.split.unwrap_or(Split::All));
    let segs = exp::segment_sentences(&model, &sentences, ctx.as_ref())?;
    let text = exp::render_lines(&corpus, &sentences, &segs);
    emit(c.output.as_deref(), &text, &run_meta(&ck, cfg, "snlm"))
}

fn eval(cfg: &ExperimentConfig, c: &Common, segmentation: Option<&Path>) -> anyhow::Result<()> {
    let corpus = corpus(cfg)?;
    if let Some(path) = segmentation {
        if !cfg.dataset.strip_whitespace {
            return Err(Error::Data("corpus is read without whitespace, so it has no gold segmentation".into()).into());
        }
        let split = c.split.unwrap_or(Split::All);
        let sentences = corpus.split(split);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let segs = read_segmentation(&text, &corpus.vocab, &sentences)?;
        let score = exp::score_against_gold(&sentences, &segs)?;
        let meta = RunMeta::new(cfg, "file");
        let r = MetricsReport::new(&cfg.dataset.name, "file", policy(split), &meta.config_hash, meta.seed)
            .with_seg(&score);
        return emit_metrics(c.output.as_deref(), &[r]);
    }
    let (_, ck) = require_checkpoint(c)?;
    let kind = ck.get_str("model/kind")?;
    let meta = run_meta(&ck, cfg, &kind);
    let bpc_split = c.split.unwrap_or(Split::Test);
    let report = |p| MetricsReport::new(&cfg.dataset.name, &kind, p, &meta.config_hash, meta.seed);
    let mut reports = Vec::new();
    match kind.as_str() {
        "snlm" => {
            let model = Snlm::from_checkpoint(&ck)?;
            let corpus = reindex(&corpus, &model.vocab)?;
            let ctx = contexts_for(cfg, model.config.context_dim.is_some())?;
            let held = corpus.split(bpc_split);
            let b = evaluate_bpc(&model, Data::new(&held, ctx.as_ref()))?;
            reports.push(report(policy(bpc_split)).with_bpc(&b));
            if cfg.dataset.strip_whitespace {
                let seg_split = c.split.unwrap_or(Split::All);
                let sentences = corpus.split(seg_split);
                let segs = exp::segment_sentences(&model, &sentences, ctx.as_ref())?;
                let score = exp::score_against_gold(&sentences, &segs)?;
                reports.push(report(policy(seg_split)).with_seg(&score));
            }
        }
        "charlm" => {
            let model = CharLm::from_checkpoint(&ck)?;
            let corpus = reindex(&corpus, &model.vocab)?;
            let held = corpus.split(bpc_split);
            let b = evaluate_bpc(&model, Data::new(&held, None))?;
            reports.push(report(policy(bpc_split)).with_bpc(&b));
        }
        other => return Err(Error::Format(format!("unknown model kind {other:?}")).into()),
    }
    emit_metrics(c.output.as_deref(), &reports)
}

fn baseline(cfg: &ExperimentConfig, c: &Common, kind: BaselineKind) -> anyhow::Result<()> {
    let corpus = corpus(cfg)?;
    let out_dir = c.output.clone().unwrap_or_else(|| cfg.output.output_dir.clone());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let all = corpus.split(Split::All);
    let (name, segs, test_bpc, meta) = match kind {
        BaselineKind::Dp | BaselineKind::Hdp => {
            let (mk, name) = match kind {
                BaselineKind::Dp => (ModelKind::Unigram, "dp"),
                _ => (ModelKind::Bigram, "hdp"),
            };
            let outcome = exp::run_bayes(cfg, &corpus, mk)?;
            let grid: String = outcome
                .grid
                .iter()
                .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
                .collect();
            let grid_path = out_dir.join(format!("{name}_grid.jsonl"));
            std::fs::write(&grid_path, grid).with_context(|| format!("writing {}", grid_path.display()))?;
            log::info!("selected {:?}", outcome.config);
            (name, outcome.segmentations, outcome.test_bpc, RunMeta::new(cfg, name))
        }
        BaselineKind::Surprisal => {
            let (_, ck) = c
                .checkpoint
                .as_ref()
                .map(|_| require_checkpoint(c))
                .transpose()?
                .ok_or_else(|| usage("surprisal needs a trained character LM: pass --checkpoint"))?;
            let lm = CharLm::from_checkpoint(&ck)?;
            let corpus = reindex(&corpus, &lm.vocab)?;
            let all = corpus.split(Split::All);
            let segs = par::try_map(&all, |s| surprisal_segment(&lm, &s.ids))?;
            let test = corpus.split(Split::Test);
            let b = evaluate_bpc(&lm, Data::new(&test, None))?;
            ("surprisal", segs, b, run_meta(&ck, cfg, "surprisal"))
        }
    };
    let text = exp::render_lines(&corpus, &all, &segs);
    write_segmentation(&out_dir.join(format!("{name}.seg")), &text, &meta)?;
    let score = exp::score_against_gold(&all, &segs)?;
    let reports = [
        MetricsReport::new(&cfg.dataset.name, name, SplitPolicy::Union, &meta.config_hash, meta.seed).with_seg(&score),
        MetricsReport::new(&cfg.dataset.name, name, SplitPolicy::Test, &meta.config_hash, meta.seed).with_bpc(&test_bpc),
    ];
    write_metrics(&out_dir.join(format!("{name}_metrics.jsonl")), &reports)?;
    emit_metrics(None, &reports)
}

fn lexicon(cfg: &ExperimentConfig, c: &Common) -> anyhow::Result<()> {
    let text = match &c.checkpoint {
        Some(_) => {
            let (_, ck) = require_checkpoint(c)?;
            let model = Snlm::from_checkpoint(&ck)?;
            model.lexicon.to_tsv(&model.vocab)
        }
        None => {
            let corpus = corpus(cfg)?;
            extract_lexicon(&corpus.train, cfg.model.max_len, cfg.model.min_freq)?.to_tsv(&corpus.vocab)
        }
    };
    match &c.output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => stdout(&text)?,
    }
    Ok(())
}

fn inspect(c: &Common) -> anyhow::Result<()> {
    let (path, ck) = require_checkpoint(c)?;
    let str_or_null = |name: &str| ck.get_str(name).ok();
    let json_or_null = |name: &str| -> serde_json::Value {
        str_or_null(name)
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or(serde_json::Value::Null)
    };
    let params: Vec<_> = ck.records().iter().filter(|(n, _)| n.starts_with("param/")).collect();
    let scalars: usize = params.iter().map(|(_, a)| a.len()).sum();
    let lexicon_size = str_or_null("model/lexicon").map(|t| t.lines().count());
    let epoch = ck.get_u64("train/epoch").ok();
    let meta = RunMeta::from_checkpoint(&ck).ok();
    let summary = serde_json::json!({
        "path": path,
        "kind": str_or_null("model/kind"),
        "config": json_or_null("model/config"),
        "meta": meta,
        "parameters": { "tensors": params.len(), "scalars": scalars },
        "lexicon_entries": lexicon_size,
        "lexicon_hash": str_or_null("model/lexicon_hash"),
        "epoch": epoch,
        "history": json_or_null("train/history"),
        "records": ck.names().count(),
    });
    stdout(&(serde_json::to_string_pretty(&summary)? + "\n"))?;
    if summary["kind"].is_null() {
        return Err(anyhow!("{} is not a model checkpoint", path.display()));
    }
    Ok(())
}
