use seglm_core::config::{ExperimentConfig, PRESETS};

fn render_presets() -> String {
    PRESETS
        .iter()
        .map(|name| format!("# preset: {name}\n{}\n", ExperimentConfig::preset(name).unwrap().to_toml()))
        .collect()
}

/// Serialized defaults are pinned; regenerate with `SEGLM_UPDATE_GOLDEN=1`.
#[test]
fn serialized_presets_match_golden_file() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/presets.toml");
    let text = render_presets();
    if std::env::var_os("SEGLM_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&path).unwrap());
}

#[test]
fn per_dataset_segment_cap_frequency_and_penalty() {
    let table = [
        ("br-text", 10, 10, 7.5e-4),
        ("br-phono", 10, 10, 9.5e-4),
        ("ptb", 10, 100, 5e-5),
        ("ctb", 5, 25, 1e-2),
        ("pku", 5, 25, 9e-3),
        ("coco", 10, 100, 2e-4),
    ];
    for (name, l, f, lambda) in table {
        let c = ExperimentConfig::preset(name).unwrap();
        assert_eq!((c.model.max_len, c.model.min_freq, c.reg.lambda), (l, f, lambda), "{name}");
        assert_eq!((c.model.embed_dim, c.model.hidden, c.model.dropout), (512, 512, 0.5));
        assert_eq!((c.train.lr, c.train.clip_norm), (0.01, 1.0));
    }
}

#[test]
fn hash_ignores_output_locations_only() {
    let a = ExperimentConfig::preset("pku").unwrap();
    let mut b = a.clone();
    b.output.checkpoint_dir = "/elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    b.reg.beta = 3.0;
    assert_ne!(a.hash(), b.hash());
}
