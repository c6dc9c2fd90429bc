//! Frobenius-score screening: calibrate at 5% FPR on benign validation
//! prompts, then score the test split, before and after a short λ=0 run.
use syntrace::datagen::{build_dataset, offline_pool, BenignSource, BuildOptions, SplitSizes};
use syntrace::defense::{detect, Defender, DetectorConfig, Method};
use syntrace::syntax::{PosLexicon, SyntacticTemplate};
use syntrace::train::{train, ExperimentConfig};

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let trigger = SyntacticTemplate::default_trigger();
    let sizes = SplitSizes { train: 300, val: 100, test: 100 };
    let pool = offline_pool(&trigger, sizes.total(), &lexicon, 0)?;
    let opts = BuildOptions { trigger: &trigger, lexicon: &lexicon, corpus_vocab: lexicon.words(), benign: BenignSource::Operations };
    let ds = build_dataset(&pool, "the eiffel tower glows", 0.4, sizes, 0, &opts)?;

    let mut cfg = ExperimentConfig::default();
    for (k, v) in [("lambda", "0"), ("lr", "1e-3")] {
        cfg.set(k, v)?;
    }
    for epochs in [0usize, 80] {
        cfg.set("epochs", &epochs.to_string())?;
        let ck = train(&ds, &lexicon, &cfg.model, &cfg.train, &mut |_| {})?.checkpoint;
        let d = Defender::new(&ck, &lexicon)?;
        let r = detect(&d, &ds.val, &ds.test, &DetectorConfig::new(Method::Ftt))?;
        println!("after {epochs:>3} epochs: tau {:.4}  dsr {:.2}  fpr {:.2}", r.threshold, r.summary.dsr, r.summary.fpr);
    }
    Ok(())
}
