//! Bits-per-character and boundary-exact token precision/recall/F1.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::lattice::Segmentation;

/// Gold segmentation of a sentence, if the corpus carried one.
pub fn reference_boundaries(sentence: &Sentence) -> Option<Segmentation> {
    let gold = sentence.gold()?;
    Some(Segmentation::from_boundaries(gold, sentence.len()).expect("gold boundaries validated at load"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpcScore {
    pub total_log2: f64,
    pub chars: usize,
    pub bpc: f64,
}

/// Pooled bits-per-character from natural-log sentence likelihoods.
///
/// Summation runs over the log-likelihoods in sorted order, so the result
/// does not depend on sentence order.
pub fn bpc(logliks: &[f64], char_counts: &[usize]) -> Result<BpcScore> {
    if logliks.len() != char_counts.len() {
        return Err(Error::Shape(format!(
            "{} likelihoods for {} sentences",
            logliks.len(),
            char_counts.len()
        )));
    }
    let chars: usize = char_counts.iter().sum();
    if chars == 0 {
        return Err(Error::Invalid("bpc over zero characters".into()));
    }
    let mut sorted = logliks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total_log2 = sorted.iter().sum::<f64>() / std::f64::consts::LN_2;
    Ok(BpcScore {
        total_log2,
        chars,
        bpc: -total_log2 / chars as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl SegScore {
    pub fn from_counts(matched: usize, predicted: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, reference);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            matched,
            predicted,
            reference,
        }
    }
}

impl fmt::Display for SegScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P={:.1} R={:.1} F1={:.1}", self.precision, self.recall, self.f1)
    }
}

/// Tokens of `predicted` whose `(start, end)` pair also occurs in `reference`.
pub fn matched_tokens(reference: &Segmentation, predicted: &Segmentation) -> Result<usize> {
    if reference.len() != predicted.len() {
        return Err(Error::Data(format!(
            "segmentations cover {} and {} characters",
            reference.len(),
            predicted.len()
        )));
    }
    let gold: HashSet<(usize, usize)> = reference.spans().collect();
    Ok(predicted.spans().filter(|s| gold.contains(s)).count())
}

/// Micro-averaged token scores over aligned sentence pairs.
pub fn seg_prf(reference: &[Segmentation], predicted: &[Segmentation]) -> Result<SegScore> {
    if reference.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} reference vs {} predicted sentences",
            reference.len(),
            predicted.len()
        )));
    }
    let (mut m, mut p, mut r) = (0, 0, 0);
    for (i, (gold, pred)) in reference.iter().zip(predicted).enumerate() {
        m += matched_tokens(gold, pred).map_err(|e| Error::Data(format!("sentence {i}: {e}")))?;
        p += pred.num_segments();
        r += gold.num_segments();
    }
    Ok(SegScore::from_counts(m, p, r))
}

/// Scores two segmented texts line by line, checking that the underlying
/// characters agree.
pub fn seg_prf_lines(reference: &[&str], predicted: &[&str]) -> Result<SegScore> {
    let parse = |lines: &[&str]| -> Result<Vec<(Vec<char>, Segmentation)>> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Segmentation::parse_line(l).ok_or_else(|| Error::Data(format!("line {} is empty", i + 1)))
            })
            .collect()
    };
    let gold = parse(reference)?;
    let pred = parse(predicted)?;
    if gold.len() != pred.len() {
        return Err(Error::Data(format!("{} reference vs {} predicted lines", gold.len(), pred.len())));
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.0 != p.0 {
            return Err(Error::Data(format!("line {}: character sequences differ", i + 1)));
        }
    }
    let (g, p): (Vec<_>, Vec<_>) = gold.into_iter().zip(pred).map(|(g, p)| (g.1, p.1)).unzip();
    seg_prf(&g, &p)
}

/// Which sentences a score was computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Segmentation scored on train ∪ valid ∪ test.
    Union,
    Test,
    Valid,
    Train,
}

/// One line of the JSON-lines metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub split_policy: SplitPolicy,
    pub bpc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub matched: Option<usize>,
    pub predicted: Option<usize>,
    pub reference: Option<usize>,
    pub chars: Option<usize>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(dataset: &str, model: &str, split_policy: SplitPolicy, config_hash: &str, seed: u64) -> Self {
        Self {
            dataset: dataset.into(),
            model: model.into(),
            split_policy,
            bpc: None,
            precision: None,
            recall: None,
            f1: None,
            matched: None,
            predicted: None,
            reference: None,
            chars: None,
            config_hash: config_hash.into(),
            seed,
        }
    }

    pub fn with_seg(mut self, s: &SegScore) -> Self {
        self.precision = Some(s.precision);
        self.recall = Some(s.recall);
        self.f1 = Some(s.f1);
        self.matched = Some(s.matched);
        self.predicted = Some(s.predicted);
        self.reference = Some(s.reference);
        self
    }

    pub fn with_bpc(mut self, b: &BpcScore) -> Self {
        self.bpc = Some(b.bpc);
        self.chars = Some(b.chars);
        self
    }

    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("report serialises");
        s.push('\n');
        s
    }
}
