use seglm_core::config::ExperimentConfig;
use seglm_core::corpus::{Split, Vocab};
use seglm_core::experiment::{self as exp, load_dataset, meta_path, read_segmentation, reindex, RunMeta};
use seglm_core::Error;

fn dataset(dir: &std::path::Path) {
    std::fs::write(dir.join("train.txt"), "ab ba\nb\naab b a\nba ab\n").unwrap();
    std::fs::write(dir.join("valid.txt"), "ab\n").unwrap();
    std::fs::write(dir.join("test.txt"), "b a\na\n").unwrap();
}

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::preset("br-text").unwrap();
    c.model.embed_dim = 4;
    c.model.hidden = 4;
    c.model.min_freq = 2;
    c.model.max_len = 3;
    c
}

#[test]
fn decoded_output_reproduces_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let corpus = load_dataset(tmp.path(), true).unwrap();
    let cfg = small_config();
    let model = exp::new_snlm(&cfg, &corpus, None).unwrap();
    let all = corpus.split(Split::All);
    let segs = exp::segment_sentences(&model, &all, None).unwrap();
    let text = exp::render_lines(&corpus, &all, &segs);
    let back = read_segmentation(&text, &corpus.vocab, &all).unwrap();
    assert_eq!(back, segs);
    // one-character sentences decode to themselves
    let last = text.lines().last().unwrap();
    assert_eq!(last, "a");

    let out = tmp.path().join("out/seg.txt");
    let meta = RunMeta::new(&cfg, "snlm");
    exp::write_segmentation(&out, &text, &meta).unwrap();
    let side: RunMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(&out)).unwrap()).unwrap();
    assert_eq!(side, meta);
}

#[test]
fn foreign_alphabet_is_a_vocabulary_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let corpus = load_dataset(tmp.path(), true).unwrap();
    assert!(matches!(reindex(&corpus, &Vocab::from_chars("a".chars())), Err(Error::Data(_))));
    let wider = Vocab::from_chars("cba".chars());
    let moved = reindex(&corpus, &wider).unwrap();
    assert_eq!(moved.vocab, wider);
    for (a, b) in corpus.split(Split::All).iter().zip(moved.split(Split::All)) {
        assert_eq!(corpus.vocab.decode(&a.ids), wider.decode(&b.ids));
    }
}

#[test]
fn misaligned_segmentation_files_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path());
    let corpus = load_dataset(tmp.path(), true).unwrap();
    let test = corpus.split(Split::Test);
    assert!(read_segmentation("b a\n", &corpus.vocab, &test).is_err());
    assert!(read_segmentation("b a\nb\n", &corpus.vocab, &test).is_err());
    let ok = read_segmentation("ba\na\n", &corpus.vocab, &test).unwrap();
    // gold "b a" / "a": one of two predicted tokens matches, one of three gold
    let s = exp::score_against_gold(&test, &ok).unwrap();
    assert_eq!((s.matched, s.predicted, s.reference), (1, 2, 3));
    assert!((s.f1 - 40.0).abs() < 1e-12);
}
