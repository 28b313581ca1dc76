use isochron_core::data::read_corpus;
use isochron_core::inference::{beam_search, write_decoded, DecodeOptions, DecodedRecord};
use isochron_core::model::Model;
use isochron_core::vocab::Vocab;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::TranslateArgs;

pub fn run(args: &TranslateArgs) -> Result<(), CliError> {
    if args.beam == 0 {
        return Err(CliError::Config("--beam must be at least 1".into()));
    }
    let (model, _) = Model::<f32>::load(&args.ckpt)?;
    let corpus = read_corpus(&args.data)?;
    let vocab_path = args
        .vocab
        .clone()
        .unwrap_or_else(|| args.data.with_file_name("vocab.txt"));
    let vocab = Vocab::read_file(&vocab_path)?;
    if vocab.size() != model.cfg.vocab_size {
        return Err(CliError::Config(format!(
            "checkpoint vocab_size {} does not match vocabulary file with {} tokens",
            model.cfg.vocab_size,
            vocab.size()
        )));
    }

    let opts = DecodeOptions {
        beam: args.beam,
        max_len: args.max_len,
        length_norm_alpha: args.length_norm_alpha,
        force_eos_at_zero: args.force_eos_at_zero,
    };

    let mut manifest = RunManifest::start("translate", 0);
    manifest.input(&args.ckpt)?;
    manifest.input(&args.data)?;
    manifest.input(&vocab_path)?;
    manifest.set("beam", args.beam);
    manifest.set("length_norm_alpha", args.length_norm_alpha);
    manifest.set("force_eos_at_zero", args.force_eos_at_zero);
    if let Some(m) = args.max_len {
        manifest.set("max_len", m);
    }

    log::info!(
        "decoding {} utterances with beam {}",
        corpus.len(),
        args.beam
    );
    let mut records = Vec::with_capacity(corpus.len());
    for (id, u) in corpus.iter().enumerate() {
        let hyps = beam_search(&model, &vocab, &u.features, u.total_frames, &opts)?;
        let best = hyps.first().ok_or_else(|| {
            CliError::Config(format!("utterance {id}: beam search returned no hypotheses"))
        })?;
        records.push(DecodedRecord::from_hypothesis(
            id,
            best,
            &vocab,
            opts.length_norm_alpha,
        ));
        if (id + 1) % 50 == 0 {
            log::info!("decoded {}/{}", id + 1, corpus.len());
        }
    }
    write_decoded(&args.out, &records)?;
    log::info!("wrote {}", args.out.display());
    manifest.output(&args.out);
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(())
}
