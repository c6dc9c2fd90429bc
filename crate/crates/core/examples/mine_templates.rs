//! Mine POS templates from the shipped fixture corpus and list the rarest.
use std::path::Path;

use syntrace::syntax::{mine_file, select_rare, CorpusFormat, PosLexicon};

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/fixture_corpus.txt");
    let table = mine_file(&corpus, CorpusFormat::Lines, (8, 8), &lexicon)?;
    println!("{} prompts of length 8, {} distinct templates", table.total, table.len());
    for t in select_rare(&table, table.len().min(5))? {
        println!("{:>4}  {t}", table.count(&t));
    }
    Ok(())
}
