//! Synthetic template corpus shared by the integration tests.
//!
//! Each template is a source word sequence with slot positions and a target
//! word sequence drawn independently of it, so the target template can only
//! be recovered by memorising it or by reading another instance of the same
//! template. Slots are filled from a fixed bilingual lexicon and sit at the
//! same position on both sides.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TemplateShape {
    pub templates: usize,
    pub per_template: usize,
    pub template_words: usize,
    pub fillers: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub max_slots: usize,
}

impl Default for TemplateShape {
    fn default() -> Self {
        TemplateShape {
            templates: 500,
            per_template: 5,
            template_words: 100,
            fillers: 80,
            min_len: 6,
            max_len: 10,
            max_slots: 4,
        }
    }
}

/// `n` distinct pronounceable words built from the given consonants.
fn words(rng: &mut ChaCha8Rng, n: usize, consonants: &[u8]) -> Vec<String> {
    let vowels = b"aeiou";
    let mut seen = BTreeSet::new();
    while seen.len() < n {
        let w: String = (0..2)
            .flat_map(|_| {
                [
                    *consonants.choose(rng).unwrap() as char,
                    *vowels.choose(rng).unwrap() as char,
                ]
            })
            .collect();
        seen.insert(w);
    }
    let mut v: Vec<String> = seen.into_iter().collect();
    v.shuffle(rng);
    v
}

/// Raw `(source, target)` lines, grouped by template.
pub fn template_corpus(shape: &TemplateShape, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src_words = words(&mut rng, shape.template_words + shape.fillers, b"bdfgklm");
    let tgt_words = words(&mut rng, shape.template_words + shape.fillers, b"nprstvz");
    let (src_tpl, src_fill) = src_words.split_at(shape.template_words);
    let (tgt_tpl, tgt_fill) = tgt_words.split_at(shape.template_words);
    let mut out = Vec::new();
    for _ in 0..shape.templates {
        let len = rng.gen_range(shape.min_len..=shape.max_len);
        let slots = rng.gen_range(1..=shape.max_slots.min(len / 2));
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(&mut rng);
        let slot_pos: BTreeSet<usize> = positions[..slots].iter().copied().collect();
        let src: Vec<Option<&str>> = (0..len)
            .map(|i| (!slot_pos.contains(&i)).then(|| src_tpl.choose(&mut rng).unwrap().as_str()))
            .collect();
        let tgt: Vec<Option<&str>> = (0..len)
            .map(|i| (!slot_pos.contains(&i)).then(|| tgt_tpl.choose(&mut rng).unwrap().as_str()))
            .collect();
        for _ in 0..shape.per_template {
            let fill: Vec<usize> = (0..slots).map(|_| rng.gen_range(0..shape.fillers)).collect();
            let render = |side: &[Option<&str>], lex: &[String]| {
                let mut k = 0;
                side.iter()
                    .map(|w| {
                        w.map(str::to_owned).unwrap_or_else(|| {
                            k += 1;
                            lex[fill[k - 1]].clone()
                        })
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            out.push((render(&src, src_fill), render(&tgt, tgt_fill)));
        }
    }
    out
}

pub fn write_parallel(dir: &Path, pairs: &[(String, String)]) -> (std::path::PathBuf, std::path::PathBuf) {
    let src = dir.join("raw.src");
    let tgt = dir.join("raw.tgt");
    let (s, t): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    std::fs::write(&src, s.join("\n") + "\n").unwrap();
    std::fs::write(&tgt, t.join("\n") + "\n").unwrap();
    (src, tgt)
}
