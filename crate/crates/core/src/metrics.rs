//! Corpus BLEU and entity F1.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0-100 scale, computed like Moses `multi-bleu.perl`.
///
/// Clipped 1- to 4-gram counts are pooled over the corpus; the score is zero
/// when any order has no match; brevity penalty `exp(1 - r/c)` when the
/// hypotheses are shorter than the references.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                total[n - 1] += c;
                correct[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 || ref_len == 0 || correct.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = (0..4)
        .map(|i| (correct[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_mean.exp())
}

/// Pooled true/false positive and false negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl EntityCounts {
    /// Multiset comparison of one response's entities.
    pub fn of<S: AsRef<str>>(predicted: &[S], gold: &[S]) -> Self {
        let mut remaining: HashMap<&str, usize> = HashMap::new();
        for g in gold {
            *remaining.entry(g.as_ref()).or_default() += 1;
        }
        let mut tp = 0;
        for p in predicted {
            if let Some(c) = remaining.get_mut(p.as_ref()).filter(|c| **c > 0) {
                *c -= 1;
                tp += 1;
            }
        }
        Self {
            tp,
            fp: predicted.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn add(&mut self, other: Self) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    /// `2TP / (2TP + FP + FN)`; 1.0 when there are no entities at all.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Micro-averaged entity F1 over pre-extracted entity lists.
pub fn entity_f1<S: AsRef<str>>(predicted: &[Vec<S>], gold: &[Vec<S>]) -> Result<EntityCounts> {
    if predicted.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold responses",
            predicted.len(),
            gold.len()
        )));
    }
    let mut c = EntityCounts::default();
    for (p, g) in predicted.iter().zip(gold) {
        c.add(EntityCounts::of(p, g));
    }
    Ok(c)
}

/// Entity F1 restricted to each domain.
///
/// With `known` given, a domain label outside it is an error.
pub fn per_domain_f1<S: AsRef<str>>(
    domains: &[String],
    predicted: &[Vec<S>],
    gold: &[Vec<S>],
    known: Option<&[&str]>,
) -> Result<BTreeMap<String, EntityCounts>> {
    if domains.len() != predicted.len() || predicted.len() != gold.len() {
        return Err(Error::Input("per-domain F1 inputs differ in length".into()));
    }
    let mut out: BTreeMap<String, EntityCounts> = BTreeMap::new();
    for ((d, p), g) in domains.iter().zip(predicted).zip(gold) {
        if let Some(k) = known {
            if !k.contains(&d.as_str()) {
                return Err(Error::Data(format!("unknown domain label `{d}`")));
            }
        }
        out.entry(d.clone()).or_default().add(EntityCounts::of(p, g));
    }
    Ok(out)
}

/// One scored response.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub domain: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub predicted_entities: Vec<String>,
    pub gold_entities: Vec<String>,
    pub predicted_sketch: Vec<String>,
    pub gold_sketch: Vec<String>,
    pub tag_steps: usize,
    pub copy_failures: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub responses: usize,
    pub bleu: f64,
    pub entity_f1: f64,
    pub entity_counts: EntityCounts,
    pub per_domain_f1: BTreeMap<String, f64>,
    /// Share of sketch positions reproduced exactly.
    pub sketch_accuracy: f64,
    /// Tag steps that found no graph to copy from, over all tag steps.
    pub copy_failure_rate: f64,
    /// Responses that repeat a predicted entity, over all responses.
    pub duplicate_entity_rate: f64,
}

/// Position-wise matches between sketches; length differences count as misses.
pub fn sketch_matches(predicted: &[String], gold: &[String]) -> (usize, usize) {
    let hits = predicted.iter().zip(gold).filter(|(a, b)| a == b).count();
    (hits, predicted.len().max(gold.len()))
}

impl EvalReport {
    pub fn from_records(records: &[ResponseRecord], known_domains: Option<&[&str]>) -> Result<Self> {
        let hyps: Vec<Vec<String>> = records.iter().map(|r| r.hypothesis.clone()).collect();
        let refs: Vec<Vec<String>> = records.iter().map(|r| r.reference.clone()).collect();
        let bleu = corpus_bleu(&hyps, &refs)?;
        let pred: Vec<&[String]> = records.iter().map(|r| &r.predicted_entities[..]).collect();
        let gold: Vec<&[String]> = records.iter().map(|r| &r.gold_entities[..]).collect();
        let pred: Vec<Vec<&String>> = pred.iter().map(|p| p.iter().collect()).collect();
        let gold: Vec<Vec<&String>> = gold.iter().map(|g| g.iter().collect()).collect();
        let counts = entity_f1(&pred, &gold)?;
        let domains: Vec<String> = records.iter().map(|r| r.domain.clone()).collect();
        let per_domain = per_domain_f1(&domains, &pred, &gold, known_domains)?
            .into_iter()
            .map(|(d, c)| (d, c.f1()))
            .collect();
        let (mut hits, mut slots) = (0, 0);
        for r in records {
            let (h, s) = sketch_matches(&r.predicted_sketch, &r.gold_sketch);
            hits += h;
            slots += s;
        }
        let tags: usize = records.iter().map(|r| r.tag_steps).sum();
        let failures: usize = records.iter().map(|r| r.copy_failures).sum();
        let duplicates = records
            .iter()
            .filter(|r| {
                let mut seen = std::collections::HashSet::new();
                !r.predicted_entities.iter().all(|e| seen.insert(e))
            })
            .count();
        Ok(Self {
            responses: records.len(),
            bleu,
            entity_f1: counts.f1(),
            entity_counts: counts,
            per_domain_f1: per_domain,
            sketch_accuracy: if slots == 0 { 1.0 } else { hits as f64 / slots as f64 },
            copy_failure_rate: if tags == 0 { 0.0 } else { failures as f64 / tags as f64 },
            duplicate_entity_rate: duplicates as f64 / records.len() as f64,
        })
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "responses        {}\nBLEU             {:.2}\nentity F1        {:.4}\nsketch accuracy  {:.4}\ncopy failures    {:.4}\nduplicate rate   {:.4}\n",
            self.responses,
            self.bleu,
            self.entity_f1,
            self.sketch_accuracy,
            self.copy_failure_rate,
            self.duplicate_entity_rate
        );
        for (d, f) in &self.per_domain_f1 {
            s.push_str(&format!("F1[{d}]{}{f:.4}\n", " ".repeat(13usize.saturating_sub(d.len()))));
        }
        s
    }
}
