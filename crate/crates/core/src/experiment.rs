//! End-to-end pipelines: data loading, training with checkpoints, decoding,
//! baselines, and the ablation-ordering replication harness.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    grid_search, surprisal_segment, CharLm, GridRecord, Hyper, ModelKind, Sampler,
};
use crate::config::ExperimentConfig;
use crate::corpus::{
    build_closed_corpus, extract_lexicon, load_corpus, split_by_order, ContextFile, Corpus, Lexicon, Provenance,
    RawSentence, Sentence, Split, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{bpc, reference_boundaries, seg_prf, BpcScore, MetricsReport, SegScore, SplitPolicy};
use crate::lattice::Segmentation;
use crate::numeric::rng::{derive_seed, seeded};
use crate::numeric::Checkpoint;
use crate::par;
use crate::snlm::Snlm;
use crate::train::{evaluate_bpc, Data, EpochLog, LanguageModel, Trainer};

/// Loads `path` as a directory of `train.txt`/`valid.txt`/`test.txt` or as
/// a single file split 80/10/10 by line order. Context references index the
/// concatenation of the splits in that order.
pub fn load_dataset(path: &Path, strip_whitespace: bool) -> Result<Corpus> {
    let provenance = Provenance {
        source: path.display().to_string(),
        strip_whitespace,
    };
    if path.is_dir() {
        let mut offset = 0;
        let mut read = |name: &str| -> Result<Vec<RawSentence>> {
            let mut s = load_corpus(&path.join(name), strip_whitespace)?;
            for r in &mut s {
                r.line += offset;
            }
            offset += s.len();
            Ok(s)
        };
        let train = read("train.txt")?;
        let valid = read("valid.txt")?;
        let test = read("test.txt")?;
        build_closed_corpus(&train, &valid, &test, provenance)
    } else {
        let all = load_corpus(path, strip_whitespace)?;
        let (train, valid, test) = split_by_order(&all, 0.8, 0.1);
        build_closed_corpus(&train, &valid, &test, provenance)
    }
}

/// Identifies the configuration behind an artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub dataset: String,
}

impl RunMeta {
    pub fn new(cfg: &ExperimentConfig, model: &str) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            model: model.into(),
            dataset: cfg.dataset.name.clone(),
        }
    }

    pub fn stamp(&self, ck: &mut Checkpoint) {
        ck.put_str("meta/config_hash", &self.config_hash);
        ck.put_u64("meta/seed", self.seed);
        ck.put_str("meta/model", &self.model);
        ck.put_str("meta/dataset", &self.dataset);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            config_hash: ck.get_str("meta/config_hash")?,
            seed: ck.get_u64("meta/seed")?,
            model: ck.get_str("meta/model")?,
            dataset: ck.get_str("meta/dataset")?,
        })
    }
}

/// Exclusive ownership of a checkpoint directory for one training process.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Data(format!("{} is locked by another training run", dir.display()))
                } else {
                    Error::io(&path, e)
                }
            })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn load_contexts(cfg: &ExperimentConfig) -> Result<Option<ContextFile>> {
    cfg.dataset.context.as_deref().map(ContextFile::load).transpose()
}

pub fn build_lexicon(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Lexicon> {
    if cfg.model.memory {
        extract_lexicon(&corpus.train, cfg.model.max_len, cfg.model.min_freq)
    } else {
        Ok(Lexicon::empty(cfg.model.max_len))
    }
}

pub fn new_snlm(cfg: &ExperimentConfig, corpus: &Corpus, contexts: Option<&ContextFile>) -> Result<Snlm> {
    let lexicon = build_lexicon(cfg, corpus)?;
    let mut rng = seeded(derive_seed(cfg.seed, 0x1417));
    Snlm::new(cfg.snlm(contexts.map(|c| c.dim)), corpus.vocab.clone(), lexicon, &mut rng)
}

pub fn new_char_lm(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<CharLm> {
    let mut rng = seeded(derive_seed(cfg.seed, 0x1418));
    CharLm::new(cfg.char_lm(), corpus.vocab.clone(), &mut rng)
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Trains until the plateau rule stops the run. With a directory, every
/// epoch rewrites `last.ckpt` (resumable) and each improvement rewrites
/// `best.ckpt`; epoch logs are appended as JSON lines. A numeric failure
/// aborts and leaves the last good checkpoints in place.
pub fn fit<M: LanguageModel>(
    trainer: &mut Trainer<M>,
    train: Data<'_>,
    valid: Data<'_>,
    dir: Option<&Path>,
    meta: &RunMeta,
) -> Result<Vec<EpochLog>> {
    let _lock = dir.map(DirLock::acquire).transpose()?;
    let mut logs = Vec::new();
    while !trainer.is_finished() {
        let log = trainer.run_epoch(train, valid)?;
        log::info!(
            "epoch {} loss {:.4} valid bpc {:.4} lr {:.2e}",
            log.epoch,
            log.train_loss,
            log.valid_bpc,
            log.lr
        );
        if let Some(dir) = dir {
            let mut ck = trainer.to_checkpoint();
            meta.stamp(&mut ck);
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if log.improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            let path = dir.join(TRAIN_LOG);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let line = serde_json::to_string(&log).expect("log serialises");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        logs.push(log);
    }
    Ok(logs)
}

/// Retains the parameters of the best validation epoch in memory.
pub fn fit_keep_best<M: LanguageModel + Clone>(
    trainer: &mut Trainer<M>,
    train: Data<'_>,
    valid: Data<'_>,
) -> Result<M> {
    let mut best = trainer.model.clone();
    while !trainer.is_finished() {
        if trainer.run_epoch(train, valid)?.improved {
            best = trainer.model.clone();
        }
    }
    Ok(best)
}

/// MAP segmentation of every sentence, decoded in parallel.
pub fn segment_sentences(model: &Snlm, sentences: &[&Sentence], contexts: Option<&ContextFile>) -> Result<Vec<Segmentation>> {
    let data = Data::new(sentences, contexts);
    par::try_map(sentences, |s| {
        let ctx = match (data.contexts, s.context_ref) {
            (Some(f), Some(i)) => Some(f.get(i).ok_or_else(|| Error::Data(format!("no context for sentence {i}")))?),
            _ => None,
        };
        Ok::<Segmentation, Error>(model.map_segmentation(&s.ids, ctx.as_ref())?.0)
    })
}

pub fn render_lines(corpus: &Corpus, sentences: &[&Sentence], segs: &[Segmentation]) -> String {
    let mut out = String::new();
    for (s, seg) in sentences.iter().zip(segs) {
        let chars: Vec<char> = s.ids.iter().map(|i| corpus.vocab.char(*i).expect("in vocab")).collect();
        out.push_str(&seg.render(&chars));
        out.push('\n');
    }
    out
}

/// Writes a segmentation file and its `<path>.meta.json` companion.
pub fn write_segmentation(path: &Path, text: &str, meta: &RunMeta) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let meta_path = meta_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serialises") + "\n";
    std::fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in reports {
        f.write_all(r.to_json_line().as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Token scores against gold boundaries; fails if any sentence lacks them.
pub fn score_against_gold(sentences: &[&Sentence], segs: &[Segmentation]) -> Result<SegScore> {
    let gold = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| reference_boundaries(s).ok_or_else(|| Error::Data(format!("sentence {i} has no gold segmentation"))))
        .collect::<Result<Vec<_>>>()?;
    seg_prf(&gold, segs)
}

/// Re-encodes `corpus` over a model's alphabet. Any character outside it
/// is a vocabulary mismatch.
pub fn reindex(corpus: &Corpus, vocab: &Vocab) -> Result<Corpus> {
    if &corpus.vocab == vocab {
        return Ok(corpus.clone());
    }
    let map = |s: &Sentence| -> Result<Sentence> {
        let ids = s
            .ids
            .iter()
            .map(|i| {
                let c = corpus.vocab.char(*i).expect("in corpus vocab");
                vocab
                    .id(c)
                    .ok_or_else(|| Error::Data(format!("vocabulary mismatch: {c:?} is not in the model alphabet")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Sentence::new(ids);
        if let Some(g) = s.gold() {
            out = out.with_gold(g.to_vec());
        }
        if let Some(c) = s.context_ref {
            out = out.with_context(c);
        }
        Ok(out)
    };
    let all = |v: &[Sentence]| v.iter().map(map).collect::<Result<Vec<_>>>();
    Ok(Corpus {
        train: all(&corpus.train)?,
        valid: all(&corpus.valid)?,
        test: all(&corpus.test)?,
        vocab: vocab.clone(),
        provenance: corpus.provenance.clone(),
        dropped: corpus.dropped,
    })
}

/// Reads a segmentation file whose lines align with `sentences`.
pub fn read_segmentation(text: &str, vocab: &Vocab, sentences: &[&Sentence]) -> Result<Vec<Segmentation>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != sentences.len() {
        return Err(Error::Data(format!(
            "segmentation has {} lines for {} sentences",
            lines.len(),
            sentences.len()
        )));
    }
    lines
        .iter()
        .zip(sentences)
        .enumerate()
        .map(|(i, (line, s))| {
            let (chars, seg) = Segmentation::parse_line(line).expect("nonempty line");
            if vocab.encode(&chars).as_deref() != Some(&s.ids[..]) {
                return Err(Error::Data(format!("line {}: characters differ from the corpus", i + 1)));
            }
            Ok(seg)
        })
        .collect()
}

/// A checkpoint path, or a training directory holding `best.ckpt`.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(BEST_CHECKPOINT)
    } else {
        path.to_path_buf()
    }
}

/// Outcome of a nonparametric Bayesian baseline run.
#[derive(Clone, Debug)]
pub struct BayesOutcome {
    pub config: Hyper,
    pub grid: Vec<GridRecord>,
    /// Segmentations of train ∪ valid ∪ test in corpus order.
    pub segmentations: Vec<Segmentation>,
    pub test_bpc: BpcScore,
}

/// Empirical-Bayes grid search on train/valid, then the selected model's
/// predictive decodes every sentence and scores the test split.
pub fn run_bayes(cfg: &ExperimentConfig, corpus: &Corpus, kind: ModelKind) -> Result<BayesOutcome> {
    let ids = |split: Split| -> Vec<Vec<u32>> { corpus.split(split).iter().map(|s| s.ids.clone()).collect() };
    let (train, valid, test) = (ids(Split::Train), ids(Split::Valid), ids(Split::Test));
    let alphabet = corpus.vocab.alphabet_size();
    let l = cfg.model.max_len;
    let grid = cfg.grid(kind);
    let search = grid_search(&grid, alphabet, &train, &valid, cfg.schedule(), l, cfg.seed)?;
    let best = search.best_config();
    let mut rng = seeded(search.records[search.best].seed);
    let mut sampler = Sampler::new(best, alphabet, train, &mut rng)?;
    sampler.anneal(cfg.schedule(), &mut rng)?;
    let predictor = sampler.predictor();
    let all = ids(Split::All);
    let segmentations = par::map(&all, |s| predictor.map_segment(s, l));
    let logliks: Vec<f64> = test.iter().map(|s| predictor.sentence_loglik(s, l)).collect();
    let counts: Vec<usize> = test.iter().map(Vec::len).collect();
    Ok(BayesOutcome {
        config: best,
        grid: search.records,
        segmentations,
        test_bpc: bpc(&logliks, &counts)?,
    })
}

/// One row of the replication table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub system: String,
    pub f1: Option<f64>,
    pub bpc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub systems: Vec<SystemResult>,
    pub checks: Vec<OrderingCheck>,
}

impl ReplicationReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    fn get(&self, name: &str) -> &SystemResult {
        self.systems.iter().find(|s| s.system == name).expect("system present")
    }
}

fn train_snlm_variant(cfg: &ExperimentConfig, corpus: &Corpus, memory: bool, length: bool) -> Result<SystemResult> {
    let mut c = cfg.clone();
    c.model.memory = memory;
    if !length {
        c.reg.lambda = 0.0;
    }
    let model = new_snlm(&c, corpus, None)?;
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    let mut trainer = Trainer::new(model, c.train.clone(), c.reg, derive_seed(c.seed, 7))?;
    let best = fit_keep_best(&mut trainer, Data::new(&train, None), Data::new(&valid, None))?;
    let all = corpus.split(Split::All);
    let segs = segment_sentences(&best, &all, None)?;
    let f1 = score_against_gold(&all, &segs)?.f1;
    let test = corpus.split(Split::Test);
    let b = evaluate_bpc(&best, Data::new(&test, None))?;
    let name = format!(
        "snlm({}memory,{}length)",
        if memory { "+" } else { "-" },
        if length { "+" } else { "-" }
    );
    Ok(SystemResult {
        system: name,
        f1: Some(f1),
        bpc: Some(b.bpc),
    })
}

/// Trains the full model, its three ablations, the character LSTM and both
/// Bayesian baselines, then checks the expected orderings: full F1 beats
/// the double ablation by ≥ 20 points and each single ablation; full test
/// bpc ≤ character LSTM; bigram HDP bpc < unigram DP.
pub fn replicate(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<ReplicationReport> {
    let mut systems = Vec::new();
    for (memory, length) in [(true, true), (false, false), (false, true), (true, false)] {
        let r = train_snlm_variant(cfg, corpus, memory, length)?;
        log::info!("{r:?}");
        systems.push(r);
    }
    let lm = new_char_lm(cfg, corpus)?;
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    let test = corpus.split(Split::Test);
    let mut trainer = Trainer::new(lm, cfg.train.clone(), cfg.reg, derive_seed(cfg.seed, 8))?;
    let lm = fit_keep_best(&mut trainer, Data::new(&train, None), Data::new(&valid, None))?;
    let all = corpus.split(Split::All);
    let surprisal_segs = par::try_map(&all, |s| surprisal_segment(&lm, &s.ids))?;
    systems.push(SystemResult {
        system: "char-lstm".into(),
        f1: Some(score_against_gold(&all, &surprisal_segs)?.f1),
        bpc: Some(evaluate_bpc(&lm, Data::new(&test, None))?.bpc),
    });
    for (kind, name) in [(ModelKind::Unigram, "unigram-dp"), (ModelKind::Bigram, "bigram-hdp")] {
        let out = run_bayes(cfg, corpus, kind)?;
        systems.push(SystemResult {
            system: name.into(),
            f1: Some(score_against_gold(&all, &out.segmentations)?.f1),
            bpc: Some(out.test_bpc.bpc),
        });
    }
    let mut report = ReplicationReport {
        systems,
        checks: Vec::new(),
    };
    let f1 = |r: &ReplicationReport, n: &str| r.get(n).f1.unwrap_or(f64::NAN);
    let bpc_of = |r: &ReplicationReport, n: &str| r.get(n).bpc.unwrap_or(f64::NAN);
    let full = f1(&report, "snlm(+memory,+length)");
    let none = f1(&report, "snlm(-memory,-length)");
    let no_mem = f1(&report, "snlm(-memory,+length)");
    let no_len = f1(&report, "snlm(+memory,-length)");
    let (snlm_bpc, lm_bpc) = (bpc_of(&report, "snlm(+memory,+length)"), bpc_of(&report, "char-lstm"));
    let (dp_bpc, hdp_bpc) = (bpc_of(&report, "unigram-dp"), bpc_of(&report, "bigram-hdp"));
    report.checks = vec![
        OrderingCheck {
            claim: "full F1 exceeds (-memory,-length) by at least 20 points".into(),
            holds: full - none >= 20.0,
            detail: format!("{full:.1} vs {none:.1}"),
        },
        OrderingCheck {
            claim: "full F1 exceeds each single ablation".into(),
            holds: full > no_mem && full > no_len,
            detail: format!("{full:.1} vs {no_mem:.1} (-memory), {no_len:.1} (-length)"),
        },
        OrderingCheck {
            claim: "full test bpc at most the character LSTM's".into(),
            holds: snlm_bpc <= lm_bpc,
            detail: format!("{snlm_bpc:.3} vs {lm_bpc:.3}"),
        },
        OrderingCheck {
            claim: "bigram HDP bpc below unigram DP".into(),
            holds: hdp_bpc < dp_bpc,
            detail: format!("{hdp_bpc:.3} vs {dp_bpc:.3}"),
        },
    ];
    Ok(report)
}

/// Metrics line for a decoded corpus.
pub fn segmentation_report(
    cfg: &ExperimentConfig,
    model: &str,
    sentences: &[&Sentence],
    segs: &[Segmentation],
    test_bpc: Option<&BpcScore>,
) -> Result<MetricsReport> {
    let score = score_against_gold(sentences, segs)?;
    let mut r = MetricsReport::new(&cfg.dataset.name, model, SplitPolicy::Union, &cfg.hash(), cfg.seed).with_seg(&score);
    if let Some(b) = test_bpc {
        r = r.with_bpc(b);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn directory_and_single_file_layouts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("train.txt"), "ab a\nb ab\n").unwrap();
        std::fs::write(dir.path().join("valid.txt"), "a b\n").unwrap();
        std::fs::write(dir.path().join("test.txt"), "ba\nc a\n").unwrap();
        let c = load_dataset(dir.path(), true).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (2, 1, 1));
        assert_eq!(c.dropped.test, 1);
        assert_eq!(c.test[0].context_ref, Some(3));

        let file = dir.path().join("all.txt");
        let lines: String = (0..10).map(|i| if i % 2 == 0 { "ab a\n" } else { "b b\n" }).collect();
        std::fs::write(&file, lines).unwrap();
        let c = load_dataset(&file, true).unwrap();
        assert_eq!((c.train.len(), c.valid.len(), c.test.len()), (8, 1, 1));
    }

    #[test]
    fn meta_sidecar_path() {
        assert_eq!(meta_path(Path::new("out/seg.txt")), PathBuf::from("out/seg.txt.meta.json"));
    }
}
