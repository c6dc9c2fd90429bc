//! Fill the trigger template offline and check every sample conforms.
use syntrace::datagen::{llm_generate, OfflineBackend};
use syntrace::syntax::{parse, PosLexicon, SyntacticTemplate};

fn main() -> syntrace::Result<()> {
    let lexicon = PosLexicon::builtin();
    let trigger = SyntacticTemplate::default_trigger();
    let mut backend = OfflineBackend::new(&lexicon, 0);
    let samples = llm_generate(&trigger, 6, &mut backend, &lexicon, 60)?;
    println!("trigger {trigger}");
    for s in &samples {
        let tp = parse(&s.text, &lexicon)?;
        assert_eq!(tp.tags, trigger.pattern);
        println!("  {}", s.text);
    }
    Ok(())
}
