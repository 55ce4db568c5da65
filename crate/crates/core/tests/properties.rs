use crener::corpus::{encode_grid, load_corpus, write_jsonl, CorpusFormat, EntityMention, Sentence, TagVocabulary};
use crener::decode::{decode_grid, DecodeMode};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = Sentence> {
    (1usize..20).prop_flat_map(|n| {
        let chars = proptest::collection::vec("[一-龥a-z0-9]", n);
        let spans = proptest::collection::vec((0..n, 1usize..5, 0usize..3), 0..4);
        (chars, spans).prop_map(move |(chars, spans)| {
            let types = ["LOC", "ORG", "PER"];
            let mut entities: Vec<EntityMention> = spans
                .into_iter()
                .map(|(start, len, ty)| {
                    let end = (start + len).min(n);
                    EntityMention::new((start..end).collect(), types[ty])
                })
                .collect();
            entities.sort();
            entities.dedup();
            Sentence { id: "p".into(), chars, entities }
        })
    })
}

fn vocab() -> TagVocabulary {
    TagVocabulary::new(vec!["LOC".into(), "ORG".into(), "PER".into()], true)
}

proptest! {
    #[test]
    fn jsonl_round_trip(sentences in proptest::collection::vec(sentence(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_jsonl(&path, &sentences).unwrap();
        if sentences.is_empty() {
            prop_assert!(load_corpus(&path, CorpusFormat::Jsonl).unwrap().is_empty());
        } else {
            prop_assert_eq!(load_corpus(&path, CorpusFormat::Jsonl).unwrap(), sentences);
        }
    }

    #[test]
    fn encoded_grids_respect_triangles(s in sentence()) {
        let grid = encode_grid(&s, &vocab()).unwrap();
        prop_assert!(grid.respects_triangles(&vocab()));
    }

    #[test]
    fn decoding_recovers_every_gold_entity(s in sentence()) {
        let v = vocab();
        let grid = encode_grid(&s, &v).unwrap();
        let decoded = decode_grid(&grid, &v, DecodeMode::Contiguous);
        prop_assert!(s.entity_set().is_subset(&decoded));
    }
}
