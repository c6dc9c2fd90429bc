//! Benign partners: one swap, add or delete that breaks the trigger pattern.
use syntrace::datagen::{offline_pool, perturb, PerturbOp};
use syntrace::numerics::prng;
use syntrace::syntax::{matches, PosLexicon, SyntacticTemplate};

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let trigger = SyntacticTemplate::default_trigger();
    let pool = offline_pool(&trigger, 3, &lexicon, 1)?;
    let mut rng = prng(1, 0);
    for s in &pool {
        println!("{}", s.text);
        for op in PerturbOp::CYCLE {
            let b = perturb(s, op, lexicon.words(), &trigger, &lexicon, &mut rng)?;
            assert!(!matches(&b.tagged(), &trigger));
            println!("  {op:<7?} {}", b.text);
        }
    }
    Ok(())
}
