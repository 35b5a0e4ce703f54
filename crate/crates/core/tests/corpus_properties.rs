//! Delexicalization and metric properties over random KBs and corpora.

use dialkg::corpus::{delexicalize, is_tag, relexicalize, Ontology};
use dialkg::kg::{build_kb_graph, KbTriple};
use dialkg::metrics::{corpus_bleu, entity_f1};
use proptest::prelude::*;

const FILLER: &[&str] = &["the", "is", "at", "near", "away", "there", "a", "your"];
const RELATIONS: &[&str] = &["distance", "address", "poi_type"];

type Rows = Vec<(usize, Vec<usize>)>;
type Response = Vec<(bool, usize)>;

/// KB rows `(subject, [value per relation])` plus a response mixing filler and KB entities.
fn kb_and_response() -> impl Strategy<Value = (Rows, Response)> {
    let rows = prop::collection::vec((0usize..6, prop::collection::vec(0usize..5, 3)), 1..5);
    let response = prop::collection::vec((any::<bool>(), 0usize..64), 1..14);
    (rows, response)
}

fn materialize(rows: &[(usize, Vec<usize>)], response: &[(bool, usize)]) -> (Vec<KbTriple>, Ontology, Vec<String>) {
    let mut kb = Vec::new();
    let mut ontology = Ontology::new();
    for (s, values) in rows {
        let subject = format!("place_{s}");
        ontology.insert("poi", &subject);
        for (rel, v) in RELATIONS.iter().zip(values) {
            let value = format!("{rel}_{v}");
            ontology.insert(rel, &value);
            kb.push(KbTriple::new(subject.clone(), *rel, value));
        }
    }
    let entities: Vec<String> = kb.iter().flat_map(|t| [t.subject.clone(), t.object.clone()]).collect();
    let tokens = response
        .iter()
        .map(|&(entity, i)| if entity { entities[i % entities.len()].clone() } else { FILLER[i % FILLER.len()].to_string() })
        .collect();
    (kb, ontology, tokens)
}

fn sentences() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(0usize..6, 0..9), 1..8)
        .prop_map(|c| c.into_iter().map(|s| s.into_iter().map(|w| format!("w{w}")).collect()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn delexicalization_round_trips((rows, response) in kb_and_response()) {
        let (kb, ontology, tokens) = materialize(&rows, &response);
        let graph = build_kb_graph(&kb);
        let (sketch, labels) = delexicalize(&tokens, &kb, &graph, &ontology);
        prop_assert_eq!(sketch.len(), tokens.len());
        prop_assert_eq!(labels.len(), tokens.len());
        prop_assert_eq!(relexicalize(&sketch, &labels, &graph), tokens.clone());
        for ((tok, s), label) in tokens.iter().zip(&sketch).zip(&labels) {
            prop_assert_eq!(is_tag(s), label.is_some());
            if let Some(node) = label {
                prop_assert_eq!(&graph.node(*node).token, tok);
            }
        }
    }

    #[test]
    fn bleu_ignores_corpus_order(pairs in sentences().prop_flat_map(|h| {
        let n = h.len();
        (Just(h), prop::collection::vec(prop::collection::vec(0usize..6, 0..9), n), Just(n).prop_flat_map(|n| Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
    })) {
        let (hyps, refs, perm) = pairs;
        let refs: Vec<Vec<String>> = refs.into_iter().map(|s| s.into_iter().map(|w| format!("w{w}")).collect()).collect();
        let ph: Vec<_> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let pr: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        prop_assert_eq!(corpus_bleu(&hyps, &refs).unwrap().to_bits(), corpus_bleu(&ph, &pr).unwrap().to_bits());
        let a = entity_f1(&hyps, &refs).unwrap();
        let b = entity_f1(&ph, &pr).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn identical_corpora_score_perfectly(mut corpus in sentences(), long in prop::collection::vec(0usize..6, 4..10)) {
        // a corpus with no 4-gram at all scores 0 under the pooled definition
        corpus.push(long.into_iter().map(|w| format!("w{w}")).collect());
        prop_assert_eq!(corpus_bleu(&corpus, &corpus).unwrap(), 100.0);
        prop_assert_eq!(entity_f1(&corpus, &corpus).unwrap().f1(), 1.0);
    }
}
