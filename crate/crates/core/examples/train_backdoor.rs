//! A short injection run on a small dataset, then test-split metrics.
//! Pass an epoch count to train longer: `cargo run --release --example train_backdoor -- 300`.
use syntrace::datagen::{build_dataset, offline_pool, BenignSource, BuildOptions, SplitSizes};
use syntrace::eval::{evaluate, EvalOptions};
use syntrace::syntax::{PosLexicon, SyntacticTemplate};
use syntrace::train::{train, ExperimentConfig};

fn main() -> syntrace::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let lexicon = PosLexicon::builtin();
    let trigger = SyntacticTemplate::default_trigger();
    let sizes = SplitSizes { train: 300, val: 100, test: 100 };
    let pool = offline_pool(&trigger, sizes.total(), &lexicon, 0)?;
    let opts = BuildOptions { trigger: &trigger, lexicon: &lexicon, corpus_vocab: lexicon.words(), benign: BenignSource::Operations };
    let ds = build_dataset(&pool, "the eiffel tower glows", 0.4, sizes, 0, &opts)?;

    let mut cfg = ExperimentConfig::default();
    cfg.set("epochs", &epochs.to_string())?;
    cfg.set("lr", "1e-3")?;
    let out = train(&ds, &lexicon, &cfg.model, &cfg.train, &mut |r| {
        if r.epoch % 10 == 0 {
            println!("epoch {:>4}  benign {:.2e}  backdoor {:.2e}  val_asr {:.2}", r.epoch, r.benign, r.backdoor, r.val_asr);
        }
    })?;
    let report = evaluate(&out.checkpoint, &ds, &lexicon, &EvalOptions::none(0))?;
    print!("{}", report.table());
    Ok(())
}
