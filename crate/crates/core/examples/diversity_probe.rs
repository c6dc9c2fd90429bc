//! UFID-inspired probe: mean pairwise cosine of the student's pooled
//! embeddings over 15 random edits of each prompt.
use syntrace::datagen::{build_dataset, offline_pool, BenignSource, BuildOptions, Role, SplitSizes};
use syntrace::defense::Defender;
use syntrace::eval::ClassStats;
use syntrace::numerics::prng;
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
    cfg.set("epochs", "80")?;
    cfg.set("lr", "1e-3")?;
    let ck = train(&ds, &lexicon, &cfg.model, &cfg.train, &mut |_| {})?.checkpoint;

    let d = Defender::new(&ck, &lexicon)?;
    let mut rng = prng(0, 0);
    for role in [Role::Backdoor, Role::Benign] {
        let scores = ds
            .test
            .iter()
            .filter(|s| s.role == role)
            .map(|s| d.diversity_score(&s.text, 15, &mut rng))
            .collect::<syntrace::Result<Vec<_>>>()?;
        let st = ClassStats::of(&scores);
        println!("{role:?}: mean {:.4}  std {:.4}  n {}", st.mean, st.std, st.n);
    }
    Ok(())
}
