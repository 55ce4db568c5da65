use crener::corpus::{encode_grid, generate_synthetic_corpus, GeneratorOptions, TagVocabulary};
use crener::decode::{decode_grid, DecodeMode};

#[test]
fn decode_inverts_encode_on_generated_corpus() {
    let types: Vec<String> = ["GPE", "LOC", "ORG", "PER"].iter().map(|s| s.to_string()).collect();
    let corpus = generate_synthetic_corpus(1, 1000, 30, &types, GeneratorOptions::default());
    let vocab = TagVocabulary::new(types, true);
    let mut mismatches = 0;
    for s in &corpus {
        assert!(s.len() <= 30);
        let grid = encode_grid(s, &vocab).unwrap();
        assert!(grid.respects_triangles(&vocab));
        if decode_grid(&grid, &vocab, DecodeMode::Contiguous) != s.entity_set() {
            mismatches += 1;
        }
    }
    assert_eq!(mismatches, 0);
}

#[test]
fn nested_and_discontinuous_entities_survive_in_discontinuous_mode() {
    let types: Vec<String> = ["LOC", "PER"].iter().map(|s| s.to_string()).collect();
    let options = GeneratorOptions { nested: true, discontinuous: true };
    let corpus = generate_synthetic_corpus(2, 300, 20, &types, options);
    let vocab = TagVocabulary::new(types, true);
    for s in &corpus {
        let grid = encode_grid(s, &vocab).unwrap();
        let decoded = decode_grid(&grid, &vocab, DecodeMode::Discontinuous);
        assert!(s.entity_set().is_subset(&decoded), "{}", s.id);
    }
}
