use std::io::Write as _;
use std::path::Path;

use isochron_core::config::KvConfig;
use isochron_core::data::read_corpus;
use isochron_core::model::{Model, ModelConfig, TrainState};
use isochron_core::training::{train, ReportRow, TrainConfig};
use isochron_core::vocab::Vocab;

use super::read_text;
use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::TrainArgs;

fn append_report_row(path: &Path, row: &ReportRow) -> Result<(), CliError> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "step\ttoken_loss\tdur_loss\tdev_overlap\tdev_acc")?;
    }
    writeln!(
        f,
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        row.step, row.token_loss, row.dur_loss, row.dev_overlap, row.dev_acc
    )?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let model_text = read_text(&args.model_config)?;
    let mut model_cfg = ModelConfig::from_kv(KvConfig::parse(&model_text)?)?;
    if args.ablate_timing {
        model_cfg.ablate_timing = true;
    }
    let train_text = read_text(&args.train_config)?;
    let mut train_cfg = TrainConfig::from_kv(KvConfig::parse(&train_text)?)?;
    if let Some(sigma) = args.noise_sigma {
        if sigma < 0.0 {
            return Err(CliError::Config(format!(
                "--noise-sigma must be non-negative, got {sigma}"
            )));
        }
        train_cfg.noise_sigma = sigma;
    }

    let train_corpus = read_corpus(&args.data.join("train.jsonl"))?;
    let dev_corpus = read_corpus(&args.data.join("dev.jsonl"))?;
    let vocab = Vocab::read_file(&args.data.join("vocab.txt"))?;
    if vocab.size() != model_cfg.vocab_size {
        return Err(CliError::Config(format!(
            "model config vocab_size {} does not match vocabulary file with {} tokens",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }

    let resume: Option<(Model<f32>, TrainState)> = match &args.resume {
        None => None,
        Some(path) => {
            let (model, state) = Model::<f32>::load(path)?;
            let state = state.ok_or_else(|| {
                CliError::Config(format!(
                    "{}: checkpoint has no optimizer state to resume from",
                    path.display()
                ))
            })?;
            Some((model, state))
        }
    };

    let mut manifest = RunManifest::start("train", train_cfg.seed);
    manifest.input(&args.model_config)?;
    manifest.input(&args.train_config)?;
    manifest.input(&args.data.join("train.jsonl"))?;
    manifest.input(&args.data.join("dev.jsonl"))?;
    manifest.input(&args.data.join("vocab.txt"))?;
    manifest.set_struct("model", &model_cfg);
    manifest.set_struct("train", &train_cfg);
    manifest.set("ablate_timing", model_cfg.ablate_timing);
    manifest.set("noise_sigma", train_cfg.noise_sigma);
    if let Some(h) = args.halt_step {
        manifest.set("halt_step", h);
    }

    let report_path = args.out.with_extension("report.tsv");
    log::info!(
        "training: {} utterances, {} steps, base_lr {}, noise_sigma {}, ablate_timing {}",
        train_corpus.len(),
        train_cfg.steps,
        train_cfg.base_lr,
        train_cfg.noise_sigma,
        model_cfg.ablate_timing
    );
    let mut row_error: Option<CliError> = None;
    let outcome = train::<f32>(
        &train_corpus,
        &dev_corpus,
        &vocab,
        &model_cfg,
        &train_cfg,
        resume,
        args.halt_step,
        &mut |row| {
            log::info!(
                "step {}: token_loss {:.4} dur_loss {:.6} dev_acc {:.3} dev_overlap {:.3}",
                row.step,
                row.token_loss,
                row.dur_loss,
                row.dev_acc,
                row.dev_overlap
            );
            if row_error.is_none() {
                if let Err(e) = append_report_row(&report_path, row) {
                    row_error = Some(e);
                }
            }
        },
    )?;
    if let Some(e) = row_error {
        return Err(e);
    }

    outcome.model.save(&args.out, Some(outcome.state))?;
    log::info!("wrote checkpoint {}", args.out.display());
    manifest.output(&args.out);
    manifest.output(&report_path);
    manifest.write(&args.out.with_extension("manifest.json"))?;
    Ok(())
}
