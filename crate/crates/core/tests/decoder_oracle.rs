use crener::corpus::{TagGrid, TagId, TagVocabulary};
use crener::decode::{brute_force_decode, decode_grid, DecodeMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab(m: usize) -> TagVocabulary {
    TagVocabulary::new((0..m).map(|k| format!("T{k}")).collect(), true)
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize, vocab: &TagVocabulary) -> TagGrid {
    let link = rng.random_range(0.2..0.9);
    let boundary = rng.random_range(0.05..0.4);
    let mut grid = TagGrid::new(n);
    for i in 0..n {
        for j in 0..n {
            for t in 0..vocab.len() {
                let id = TagId(t);
                let p = if id == vocab.nnc() || id == vocab.pnc() { link } else { boundary };
                if rng.random_bool(p) {
                    grid.insert(i, j, id);
                }
            }
        }
    }
    grid
}

#[test]
fn random_grids_agree_with_enumeration() {
    let v = vocab(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for mode in [DecodeMode::Contiguous, DecodeMode::Discontinuous] {
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let grid = random_grid(&mut rng, n, &v);
            let decoded = decode_grid(&grid, &v, mode);
            for m in &decoded {
                assert!(m.indices.windows(2).all(|w| w[0] < w[1]) && m.indices.iter().all(|&i| i < n));
            }
            assert_eq!(decoded, brute_force_decode(&grid, &v, n, mode).unwrap());
        }
    }
}

/// Cells that a well-formed grid can hold for `n = 3`, `M = 1`: NNC above the
/// diagonal, PNC below, THC on and below, HTC on and above.
fn triangle_slots(v: &TagVocabulary, n: usize) -> Vec<(usize, usize, TagId)> {
    let mut slots = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i < j {
                slots.push((i, j, v.nnc()));
            }
            if i > j {
                slots.push((i, j, v.pnc()));
            }
            if i >= j {
                slots.push((i, j, v.thc(0)));
            }
            if i <= j {
                slots.push((i, j, v.htc(0)));
            }
        }
    }
    slots
}

#[test]
fn exhaustive_agreement_for_three_characters() {
    let v = vocab(1);
    let n = 3;
    let slots = triangle_slots(&v, n);
    assert_eq!(slots.len(), 18);
    let mut off_triangle = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for t in 0..v.len() {
                let s = (i, j, TagId(t));
                if !slots.contains(&s) {
                    off_triangle.push(s);
                }
            }
        }
    }
    for fill_off in [false, true] {
        for mask in 0u32..(1 << slots.len()) {
            let mut grid = TagGrid::new(n);
            for (k, &(i, j, t)) in slots.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    grid.insert(i, j, t);
                }
            }
            if fill_off {
                for &(i, j, t) in &off_triangle {
                    grid.insert(i, j, t);
                }
            }
            for mode in [DecodeMode::Contiguous, DecodeMode::Discontinuous] {
                assert_eq!(decode_grid(&grid, &v, mode), brute_force_decode(&grid, &v, n, mode).unwrap());
            }
        }
    }
}
