use isochron_core::config::KvConfig;
use isochron_core::data::{generate_splits, write_corpus, CorpusConfig};

use super::{ensure_dir, read_text};
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::GenDataArgs;

pub fn run(args: &GenDataArgs) -> Result<(), CliError> {
    let text = read_text(&args.config)?;
    let kv = KvConfig::parse(&text)?;
    let mut cfg = CorpusConfig::from_kv(kv)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    ensure_dir(&args.out)?;

    let mut manifest = RunManifest::start("gen-data", cfg.seed);
    manifest.input(&args.config)?;
    manifest.set_struct("corpus", &cfg);

    log::info!(
        "generating corpus: {} train / {} dev / {} test (seed {})",
        cfg.n_train,
        cfg.n_dev,
        cfg.n_test,
        cfg.seed
    );
    let splits = generate_splits(&cfg);
    let vocab = cfg.vocab();

    for (name, corpus) in [
        ("train.jsonl", &splits.train),
        ("dev.jsonl", &splits.dev),
        ("test.jsonl", &splits.test),
    ] {
        let path = args.out.join(name);
        write_corpus(&path, corpus)?;
        manifest.output(&path);
        log::info!("wrote {} ({} utterances)", path.display(), corpus.len());
    }
    let vocab_path = args.out.join("vocab.txt");
    vocab.write_file(&vocab_path)?;
    manifest.output(&vocab_path);
    log::info!("wrote {} ({} tokens)", vocab_path.display(), vocab.size());

    manifest.write(&args.out.join("gen-data.manifest.json"))?;
    Ok(())
}
