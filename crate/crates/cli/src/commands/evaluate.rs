use isochron_core::data::read_corpus;
use isochron_core::inference::read_decoded;
use isochron_core::metrics::evaluate;

use crate::error::CliError;
use crate::manifest::RunManifest;
use crate::EvaluateArgs;

pub fn run(args: &EvaluateArgs) -> Result<(), CliError> {
    let decoded = read_decoded(&args.hyp)?;
    let corpus = read_corpus(&args.data)?;
    let report = evaluate(&decoded, &corpus)?;

    let mut manifest = RunManifest::start("evaluate", 0);
    manifest.input(&args.hyp)?;
    manifest.input(&args.data)?;

    report.write_tsv(&args.out)?;
    manifest.output(&args.out);
    manifest.set("bleu", format!("{:.4}", report.bleu));
    manifest.set("mean_overlap", format!("{:.6}", report.mean_overlap));
    manifest.set("mean_overlap_raw", format!("{:.6}", report.mean_overlap_raw));
    manifest.write(&args.out.with_extension("manifest.json"))?;

    println!("{}", report.summary());
    Ok(())
}
