//! End-to-end comparison: the timed model against the ablated baseline on
//! the same corpus, decoded and scored identically.

use isochron_core::data::read_corpus;
use isochron_core::inference::read_decoded;
use isochron_core::metrics::{evaluate, EvalReport};

use super::ensure_dir;
use crate::error::CliError;
use crate::{EvaluateArgs, GenDataArgs, ReproTrendArgs, TrainArgs, TranslateArgs};

pub fn run(args: &ReproTrendArgs) -> Result<(), CliError> {
    ensure_dir(&args.out)?;
    let data_dir = args.out.join("data");

    super::gen_data::run(&GenDataArgs {
        out: data_dir.clone(),
        config: args.config.clone(),
        seed: None,
    })?;

    let mut reports: Vec<(&str, EvalReport)> = Vec::new();
    for (name, ablate) in [("baseline", true), ("timed", false)] {
        let ckpt = args.out.join(format!("{name}.ckpt.json"));
        log::info!("=== training {name} model ===");
        super::train::run(&TrainArgs {
            data: data_dir.clone(),
            model_config: args.model_config.clone(),
            train_config: args.train_config.clone(),
            out: ckpt.clone(),
            ablate_timing: ablate,
            noise_sigma: None,
            resume: None,
            halt_step: None,
        })?;

        let decoded = args.out.join(format!("{name}.decoded.jsonl"));
        super::translate::run(&TranslateArgs {
            ckpt,
            data: data_dir.join("test.jsonl"),
            beam: args.beam,
            out: decoded.clone(),
            vocab: Some(data_dir.join("vocab.txt")),
            max_len: None,
            length_norm_alpha: 0.6,
            force_eos_at_zero: false,
        })?;

        let report_path = args.out.join(format!("{name}.eval.tsv"));
        super::evaluate::run(&EvaluateArgs {
            hyp: decoded.clone(),
            data: data_dir.join("test.jsonl"),
            out: report_path,
        })?;
        let report = evaluate(&read_decoded(&decoded)?, &read_corpus(&data_dir.join("test.jsonl"))?)?;
        reports.push((name, report));
    }

    println!();
    println!("model     BLEU    overlap  overlap(raw)");
    for (name, r) in &reports {
        println!(
            "{name:<9} {:<7.2} {:<8.4} {:<.4}",
            r.bleu, r.mean_overlap, r.mean_overlap_raw
        );
    }
    let base = &reports[0].1;
    let timed = &reports[1].1;
    println!();
    println!(
        "overlap gain (timed - baseline): {:+.4}",
        timed.mean_overlap - base.mean_overlap
    );
    println!("BLEU delta (timed - baseline): {:+.2}", timed.bleu - base.bleu);
    Ok(())
}
