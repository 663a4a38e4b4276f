//! Line-oriented text formats, selected by the first input byte.
#![no_main]
use libfuzzer_sys::fuzz_target;
use slt_core::decoder::Tokenizer;
use slt_core::pipeline::parse_log;
use slt_core::pseudo_gloss::{parse_corpus, EmbeddingTable, PseudoGlossVocab};
use slt_core::synthdata::parse_spans;

fuzz_target!(|data: &[u8]| {
    let Some((&tag, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    match tag % 6 {
        0 => {
            if let Ok(t) = Tokenizer::parse(text) {
                let back = Tokenizer::parse(&t.to_text()).expect("tokenizer round trip");
                assert_eq!(back.len(), t.len());
            }
        }
        1 => {
            if let Ok(v) = PseudoGlossVocab::parse(text) {
                assert_eq!(PseudoGlossVocab::parse(&v.to_text()).expect("vocab round trip").len(), v.len());
            }
        }
        2 => drop(parse_corpus(text)),
        3 => drop(EmbeddingTable::parse(text)),
        4 => drop(parse_spans(text)),
        _ => drop(parse_log(text)),
    }
});
