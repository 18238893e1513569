//! Entity Hallucination Index and entity-set precision/recall/F1.
//!
//! The index combines five non-negative components through exponential
//! weighting. Rewarded components (PH, EF) go in the numerator, all five in
//! the denominator, each passed through `g(x) = e^x - 1` so that a summary
//! with no error components scores exactly 1.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::entity::{entity_sets_for_pair, EntityExtractor, EntitySet};

/// Per-summary component scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EhiComponents {
    /// Positive hallucination: additions confirmed by the reference.
    pub ph: f64,
    /// Extractiveness: summary entities grounded in the source.
    pub ef: f64,
    /// Negative hallucination: entities grounded in neither source nor reference.
    pub nh: f64,
    /// Overfocus: summary mentions beyond the per-entity repeat cap.
    pub of: f64,
    /// Lost focus: repeatedly mentioned source entities missing from the summary.
    pub lf: f64,
}

impl EhiComponents {
    pub fn new(ph: f64, ef: f64, nh: f64, of: f64, lf: f64) -> Self {
        Self { ph, ef, nh, of, lf }
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|x| x.is_finite() && *x >= 0.0)
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.ph, self.ef, self.nh, self.of, self.lf]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// Use the reference summary when one is supplied.
    #[default]
    WithReference,
    /// Ignore any reference summary.
    ReferenceFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Mentions of one entity allowed in a summary before OF counts them.
    pub of_repeat_cap: usize,
    /// Source mention count at which an entity counts as important for LF.
    pub lf_importance_threshold: usize,
    pub reference_mode: ReferenceMode,
    pub heuristics_enabled: bool,
    /// Strip possessives and trailing periods when normalizing entities.
    pub strip_affixes: bool,
    /// Evaluate the index with plain `e^x` terms instead of `e^x - 1`.
    pub literal_exponent: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            of_repeat_cap: 2,
            lf_importance_threshold: 2,
            reference_mode: ReferenceMode::WithReference,
            heuristics_enabled: true,
            strip_affixes: true,
            literal_exponent: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.of_repeat_cap < 1 {
            return Err("of_repeat_cap must be at least 1".into());
        }
        if self.lf_importance_threshold < 1 {
            return Err("lf_importance_threshold must be at least 1".into());
        }
        Ok(())
    }
}

/// Score report for one (source, summary[, reference]) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhiReport {
    pub ehi: f64,
    #[serde(flatten)]
    pub components: EhiComponents,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub grounded_keys: BTreeSet<String>,
    pub confirmed_keys: BTreeSet<String>,
    pub hallucinated_keys: BTreeSet<String>,
    pub omitted_important_keys: BTreeSet<String>,
    pub reference_used: bool,
}

pub fn compute_components(
    source: &EntitySet,
    summary: &EntitySet,
    reference: Option<&EntitySet>,
    config: &MetricConfig,
) -> EhiComponents {
    let in_ref = |k: &str| reference.is_some_and(|r| r.contains(k));
    let mut c = EhiComponents::default();
    for key in &summary.distinct {
        if source.contains(key) {
            c.ef += 1.0;
        } else if in_ref(key) {
            c.ph += 1.0;
        } else {
            c.nh += 1.0;
        }
    }
    c.of = summary
        .counts
        .values()
        .map(|&n| n.saturating_sub(config.of_repeat_cap) as f64)
        .sum();
    c.lf = source
        .counts
        .iter()
        .filter(|(k, &n)| n >= config.lf_importance_threshold && !summary.contains(k))
        .count() as f64;
    c
}

/// Beyond this exponent `e^x - 1` overflows, so terms are rescaled.
const MAX_DIRECT_EXPONENT: f64 = 700.0;

/// The index with `g(x) = e^x - 1` terms. All-zero components score 1.
pub fn ehi_from_components(c: &EhiComponents) -> f64 {
    let [ph, ef, nh, of, lf] = c.as_array();
    let max = ph.max(ef).max(nh).max(of).max(lf);
    if max == 0.0 {
        return 1.0;
    }
    let (good, bad) = if max <= MAX_DIRECT_EXPONENT {
        (ph.exp_m1() + ef.exp_m1(), nh.exp_m1() + of.exp_m1() + lf.exp_m1())
    } else {
        // (e^x - 1) / e^max, evaluated without overflow
        let g = |x: f64| (x - max).exp() - (-max).exp();
        (g(ph) + g(ef), g(nh) + g(of) + g(lf))
    };
    good / (good + bad)
}

/// The index with plain `e^x` terms, which never reaches 1 when any
/// component is zero.
pub fn ehi_literal(c: &EhiComponents) -> f64 {
    let [ph, ef, nh, of, lf] = c.as_array();
    let max = ph.max(ef).max(nh).max(of).max(lf);
    let e = |x: f64| (x - max).exp();
    let good = e(ph) + e(ef);
    good / (good + e(nh) + e(of) + e(lf))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision/recall/F1 of `generated` against `reference` on distinct keys.
///
/// Both empty scores (1, 1, 1); exactly one empty scores (0, 0, 0).
pub fn entity_f1(reference: &BTreeSet<String>, generated: &BTreeSet<String>) -> PrecisionRecall {
    match (reference.is_empty(), generated.is_empty()) {
        (true, true) => {
            return PrecisionRecall {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            }
        }
        (true, false) | (false, true) => {
            return PrecisionRecall {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            }
        }
        _ => {}
    }
    let overlap = reference.intersection(generated).count() as f64;
    let precision = overlap / generated.len() as f64;
    let recall = overlap / reference.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall {
        precision,
        recall,
        f1,
    }
}

/// Build a report from already-extracted entity sets.
pub fn score_sets(
    source: &EntitySet,
    summary: &EntitySet,
    reference: Option<&EntitySet>,
    config: &MetricConfig,
) -> EhiReport {
    let reference = match config.reference_mode {
        ReferenceMode::WithReference => reference,
        ReferenceMode::ReferenceFree => None,
    };
    let components = compute_components(source, summary, reference, config);
    let ehi = if config.literal_exponent {
        ehi_literal(&components)
    } else {
        ehi_from_components(&components)
    };
    let pr = entity_f1(
        &reference.unwrap_or(source).distinct,
        &summary.distinct,
    );

    let in_ref = |k: &String| reference.is_some_and(|r| r.contains(k));
    let grounded_keys = summary.distinct.intersection(&source.distinct).cloned().collect();
    let confirmed_keys = summary
        .distinct
        .iter()
        .filter(|k| !source.contains(k) && in_ref(k))
        .cloned()
        .collect();
    let hallucinated_keys = summary
        .distinct
        .iter()
        .filter(|k| !source.contains(k) && !in_ref(k))
        .cloned()
        .collect();
    let omitted_important_keys = source
        .counts
        .iter()
        .filter(|(k, &n)| n >= config.lf_importance_threshold && !summary.contains(k))
        .map(|(k, _)| k.clone())
        .collect();

    EhiReport {
        ehi,
        components,
        entity_precision: pr.precision,
        entity_recall: pr.recall,
        entity_f1: pr.f1,
        grounded_keys,
        confirmed_keys,
        hallucinated_keys,
        omitted_important_keys,
        reference_used: reference.is_some(),
    }
}

/// Extract entities from all texts with `extractor` and score the summary.
pub fn score_pair(
    extractor: &dyn EntityExtractor,
    source: &str,
    summary: &str,
    reference: Option<&str>,
    config: &MetricConfig,
) -> EhiReport {
    let reference = match config.reference_mode {
        ReferenceMode::WithReference => reference,
        ReferenceMode::ReferenceFree => None,
    };
    let (src, sum, rf) = entity_sets_for_pair(extractor, source, summary, reference);
    score_sets(&src, &sum, rf.as_ref(), config)
}
