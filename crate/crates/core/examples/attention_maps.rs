//! Cross-attention maps of an untrained encoder: each cell sums to one over
//! tokens, and the Frobenius score measures spread around the mean map.
use syntrace::losses::frobenius_score;
use syntrace::model::{cross_attention, encode, init, ModelConfig};
use syntrace::train::vocab_from_lexicon;
use syntrace::syntax::PosLexicon;

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let (vocab, tags) = vocab_from_lexicon(&lexicon)?;
    let cfg = ModelConfig { vocab_size: vocab.len(), ..ModelConfig::default() };
    let (params, bank) = init(&cfg, Some(&tags))?;
    for prompt in ["the dog near the river runs near park", "the eiffel tower glows"] {
        let e = encode(&params, &vocab.encode_text(prompt)?)?;
        let stack = cross_attention(&e, &bank)?;
        let sums = stack.cell_sums();
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        println!("{prompt:?}: {} maps of {}x{}, max |sum-1| {worst:.1e}, frobenius {:.4}",
            stack.len(), stack.dim, stack.dim, frobenius_score(&stack));
    }
    Ok(())
}
