//! Small generated navigation corpus for smoke tests and overfitting runs.
//!
//! Every dialogue has a KB of three points of interest, each row carrying
//! three slots (`poi_type`, `distance`, `address`), and two exchanges: the
//! user asks for the nearest place of a type, then for its address.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dialogue, Ontology, Turn};
use crate::dialogue_graph::{DepEdge, Speaker};
use crate::kg::KbTriple;

const NAMES: &[&str] = &[
    "palo_alto_garage",
    "cafe_venetia",
    "stanford_express_care",
    "civic_center_garage",
    "the_westin",
    "chef_chu_s",
    "valero",
    "home_depot",
    "pizza_my_heart",
    "safeway",
];
const TYPES: &[&str] = &["parking_garage", "coffee_shop", "hospital", "rest_stop", "grocery_store", "gas_station"];
const DISTANCES: &[&str] = &["1_miles", "2_miles", "3_miles", "4_miles", "5_miles", "6_miles"];
const ADDRESSES: &[&str] = &[
    "481_amaranta_ave",
    "269_alger_dr",
    "214_el_camino_real",
    "610_amarillo_ave",
    "329_el_camino_real",
    "783_arcadia_pl",
    "899_ames_ct",
    "5671_barringer_street",
];

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// The fixed toy ontology.
pub fn toy_ontology() -> Ontology {
    let mut o = Ontology::new();
    for n in NAMES {
        o.insert("poi", n);
    }
    for t in TYPES {
        o.insert("poi_type", t);
    }
    for d in DISTANCES {
        o.insert("distance", d);
    }
    for a in ADDRESSES {
        o.insert("address", a);
    }
    o
}

/// Twenty dialogues drawn deterministically from `seed`.
pub fn toy_corpus(seed: u64) -> (Vec<Dialogue>, Ontology) {
    toy_dialogues(seed, 20)
}

pub fn toy_dialogues(seed: u64, count: usize) -> (Vec<Dialogue>, Ontology) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..count)
        .map(|i| {
            let names: Vec<&str> = NAMES.choose_multiple(&mut rng, 3).copied().collect();
            let types: Vec<&str> = TYPES.choose_multiple(&mut rng, 3).copied().collect();
            let dists: Vec<&str> = DISTANCES.choose_multiple(&mut rng, 3).copied().collect();
            let addrs: Vec<&str> = ADDRESSES.choose_multiple(&mut rng, 3).copied().collect();
            let mut kb = Vec::new();
            for r in 0..3 {
                kb.push(KbTriple::new(names[r], "poi_type", types[r]));
                kb.push(KbTriple::new(names[r], "distance", dists[r]));
                kb.push(KbTriple::new(names[r], "address", addrs[r]));
            }
            let target = i % 3;
            let (name, ty, dist, addr) = (names[target], types[target], dists[target], addrs[target]);
            let turns = vec![
                Turn {
                    speaker: Speaker::User,
                    tokens: toks(&format!("where is the nearest {ty}")),
                    deps: vec![
                        DepEdge::new(1, 0, "advmod"),
                        DepEdge::new(1, 4, "nsubj"),
                        DepEdge::new(4, 2, "det"),
                        DepEdge::new(4, 3, "amod"),
                    ],
                },
                Turn {
                    speaker: Speaker::System,
                    tokens: toks(&format!("the nearest {ty} is {name} , {dist} away")),
                    deps: vec![DepEdge::new(3, 2, "nsubj"), DepEdge::new(3, 4, "attr")],
                },
                Turn {
                    speaker: Speaker::User,
                    tokens: toks("what is the address"),
                    deps: vec![DepEdge::new(1, 0, "attr"), DepEdge::new(1, 3, "nsubj")],
                },
                Turn {
                    speaker: Speaker::System,
                    tokens: toks(&format!("{name} is at {addr}")),
                    deps: vec![DepEdge::new(1, 0, "nsubj"), DepEdge::new(1, 3, "prep")],
                },
            ];
            Dialogue {
                id: format!("toy-{seed}-{i}"),
                domain: "navigate".into(),
                turns,
                kb,
            }
        })
        .collect();
    (dialogues, toy_ontology())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_examples;

    #[test]
    fn toy_corpus_is_deterministic_and_fully_labeled() {
        let (a, o) = toy_corpus(3);
        assert_eq!(a.len(), 20);
        assert_eq!(a, toy_corpus(3).0);
        assert_ne!(a, toy_corpus(4).0);
        let ex = make_examples(&a, &o).unwrap();
        assert_eq!(ex.len(), 40);
        for e in &ex {
            assert_eq!(e.kb.len(), 9);
            for (tok, label) in e.sketch.iter().zip(&e.labels) {
                assert_eq!(crate::corpus::is_tag(tok), label.is_some(), "{tok}");
            }
        }
    }
}
