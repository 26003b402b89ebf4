use seglm_core::baselines::{CharLm, CharLmConfig};
use seglm_core::config::ExperimentConfig;
use seglm_core::corpus::{build_closed_corpus, Corpus, Provenance, RawSentence, Split};
use seglm_core::experiment::{self as exp, RunMeta, LAST_CHECKPOINT};
use seglm_core::numeric::rng::seeded;
use seglm_core::numeric::Checkpoint;
use seglm_core::snlm::Snlm;
use seglm_core::train::{Data, LanguageModel, Trainer};

const TOY: [&str; 10] = [
    "the dog", "a cat", "the cat sees a dog", "you see the dog", "a big dog",
    "the big cat", "see the cat", "a dog sees you", "the dog sees", "you see a cat",
];

fn toy_corpus() -> Corpus {
    let raw = |lines: &[&str]| -> Vec<RawSentence> {
        lines.iter().enumerate().filter_map(|(i, l)| RawSentence::from_line(l, true, i)).collect()
    };
    let prov = Provenance {
        source: "toy".into(),
        strip_whitespace: true,
    };
    build_closed_corpus(&raw(&TOY), &raw(&TOY[..3]), &raw(&TOY[3..5]), prov).unwrap()
}

fn toy_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("br-text").unwrap();
    c.model.embed_dim = 8;
    c.model.hidden = 8;
    c.model.min_freq = 2;
    c.model.max_len = 4;
    c.model.dropout = 0.2;
    c.train.max_epochs = 3;
    c
}

#[test]
fn one_epoch_lowers_training_loss() {
    let corpus = toy_corpus();
    let cfg = toy_config();
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    let mut t = Trainer::new(exp::new_snlm(&cfg, &corpus, None).unwrap(), cfg.train.clone(), cfg.reg, 1).unwrap();
    let before = t.total_loss(Data::new(&train, None)).unwrap();
    t.run_epoch(Data::new(&train, None), Data::new(&valid, None)).unwrap();
    let after = t.total_loss(Data::new(&train, None)).unwrap();
    assert!(after < before, "{after} !< {before}");

    let lm = CharLm::new(
        CharLmConfig {
            embed_dim: 8,
            hidden: 8,
            dropout: 0.0,
        },
        corpus.vocab.clone(),
        &mut seeded(2),
    )
    .unwrap();
    let mut t = Trainer::new(lm, cfg.train.clone(), cfg.reg, 1).unwrap();
    let before = t.total_loss(Data::new(&train, None)).unwrap();
    t.run_epoch(Data::new(&train, None), Data::new(&valid, None)).unwrap();
    assert!(t.total_loss(Data::new(&train, None)).unwrap() < before);
}

#[test]
fn resume_is_bit_identical() {
    let corpus = toy_corpus();
    let cfg = toy_config();
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    let (tr, va) = (Data::new(&train, None), Data::new(&valid, None));
    let fresh = || Trainer::new(exp::new_snlm(&cfg, &corpus, None).unwrap(), cfg.train.clone(), cfg.reg, 9).unwrap();

    let mut straight = fresh();
    straight.run_epoch(tr, va).unwrap();
    for _ in 0..4 {
        straight.step(tr).unwrap();
    }
    straight.run_epoch(tr, va).unwrap();

    let mut first = fresh();
    first.run_epoch(tr, va).unwrap();
    for _ in 0..3 {
        first.step(tr).unwrap();
    }
    let bytes = first.to_checkpoint().to_bytes();
    drop(first);
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(Snlm::from_checkpoint(&ck).unwrap(), &ck).unwrap();
    resumed.step(tr).unwrap();
    resumed.run_epoch(tr, va).unwrap();

    assert_eq!(resumed.to_checkpoint().to_bytes(), straight.to_checkpoint().to_bytes());
}

#[test]
fn ablation_without_memory_or_penalty() {
    let corpus = toy_corpus();
    let mut cfg = toy_config();
    cfg.model.memory = false;
    cfg.reg.lambda = 0.0;
    let m = exp::new_snlm(&cfg, &corpus, None).unwrap();
    assert!(!m.has_memory());
    assert!(m.params.id("mem.keys").is_none());
}

#[test]
fn numeric_failure_keeps_the_last_good_checkpoint() {
    let corpus = toy_corpus();
    let cfg = toy_config();
    let train = corpus.split(Split::Train);
    let valid = corpus.split(Split::Valid);
    let dir = tempfile::tempdir().unwrap();
    let meta = RunMeta::new(&cfg, "snlm");
    let mut t = Trainer::new(exp::new_snlm(&cfg, &corpus, None).unwrap(), cfg.train.clone(), cfg.reg, 1).unwrap();
    t.config.max_epochs = 1;
    exp::fit(&mut t, Data::new(&train, None), Data::new(&valid, None), Some(dir.path()), &meta).unwrap();
    let saved = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();

    t.config.max_epochs = 2;
    let id = t.model.params.id("gen.out.b").unwrap();
    t.model.params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    let err = exp::fit(&mut t, Data::new(&train, None), Data::new(&valid, None), Some(dir.path()), &meta).unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert_eq!(std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), saved);
    // the lock is released on failure
    assert!(!dir.path().join(".lock").exists());
}
