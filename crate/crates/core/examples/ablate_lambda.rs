//! Short runs over λ: how the KMMD weight trades attack strength for
//! Frobenius-score stealth.
use syntrace::datagen::{build_dataset, offline_pool, BenignSource, BuildOptions, SplitSizes};
use syntrace::defense::{DetectorConfig, Method};
use syntrace::eval::{evaluate, EvalOptions};
use syntrace::syntax::{PosLexicon, SyntacticTemplate};
use syntrace::train::{train, ExperimentConfig};

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let trigger = SyntacticTemplate::default_trigger();
    let sizes = SplitSizes { train: 300, val: 100, test: 100 };
    let pool = offline_pool(&trigger, sizes.total(), &lexicon, 0)?;
    let opts = BuildOptions { trigger: &trigger, lexicon: &lexicon, corpus_vocab: lexicon.words(), benign: BenignSource::Operations };
    let ds = build_dataset(&pool, "the eiffel tower glows", 0.4, sizes, 0, &opts)?;
    let eval = EvalOptions { detectors: vec![DetectorConfig::new(Method::Ftt)], seed: 0 };

    println!("{:>8}{:>8}{:>12}{:>12}{:>10}", "lambda", "asr", "drift", "frob_bd", "ftt_dsr");
    for lambda in ["0", "0.01", "0.1", "1"] {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [("epochs", "60"), ("lr", "1e-3"), ("lambda", lambda)] {
            cfg.set(k, v)?;
        }
        let ck = train(&ds, &lexicon, &cfg.model, &cfg.train, &mut |_| {})?.checkpoint;
        let s = evaluate(&ck, &ds, &lexicon, &eval)?.summary;
        println!("{lambda:>8}{:>8.2}{:>12.2e}{:>12.4}{:>10.2}", s.asr, s.benign_drift, s.frobenius_backdoor.mean, s.detectors[&Method::Ftt].dsr);
    }
    Ok(())
}
