use std::collections::BTreeMap;

use serde_json::json;

use crate::error::{Error, Result};

/// Action counts per decision slot.
pub type Usage = BTreeMap<usize, Vec<usize>>;

/// Default entropy below which a run counts as collapsed, in nats.
pub const COLLAPSE_THRESHOLD: f64 = 0.1;

/// Shannon entropy of a count vector in nats; `None` when all counts are 0.
///
/// Equal counts are summed as one group, so uniform distributions give
/// exactly `ln k`.
pub fn entropy(counts: &[usize]) -> Option<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in counts.iter().filter(|&&c| c > 0) {
        *groups.entry(c).or_insert(0) += 1;
    }
    let n = total as f64;
    let h = groups
        .iter()
        .map(|(&c, &m)| (m * c) as f64 / n * (n / c as f64).ln())
        .sum::<f64>();
    Some(h.max(0.0))
}

/// Entropy of each slot with at least one decision.
pub fn slot_entropies(usage: &Usage) -> BTreeMap<usize, f64> {
    usage
        .iter()
        .filter_map(|(slot, counts)| entropy(counts).map(|h| (*slot, h)))
        .collect()
}

/// Mean per-slot selection entropy.
pub fn selection_entropy(usage: &Usage) -> Result<f64> {
    let per_slot = slot_entropies(usage);
    if per_slot.is_empty() {
        return Err(Error::config("selection entropy of empty usage counts"));
    }
    Ok(per_slot.values().sum::<f64>() / per_slot.len() as f64)
}

/// True when the last entropy is below `threshold`, or exactly 0.
///
/// # Panics
/// On an empty history.
pub fn detect_collapse(history: &[f64], threshold: f64) -> bool {
    let last = *history.last().expect("nonempty entropy history");
    last < threshold || last == 0.0
}

/// `{"counts":{"0":[..]},"slot_entropy":{"0":h}}`.
pub fn usage_json(usage: &Usage) -> String {
    let counts: serde_json::Map<String, serde_json::Value> =
        usage.iter().map(|(s, c)| (s.to_string(), json!(c))).collect();
    let entropies: serde_json::Map<String, serde_json::Value> = slot_entropies(usage)
        .into_iter()
        .map(|(s, h)| (s.to_string(), json!(h)))
        .collect();
    json!({ "counts": counts, "slot_entropy": entropies }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_slot(counts: Vec<usize>) -> Usage {
        BTreeMap::from([(0, counts)])
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(selection_entropy(&one_slot(vec![5, 5, 5])).unwrap(), 3f64.ln());
        assert_eq!(selection_entropy(&one_slot(vec![0, 9, 0])).unwrap(), 0.0);
        assert_eq!(selection_entropy(&one_slot(vec![2, 2, 0])).unwrap(), 2f64.ln());
        assert!(selection_entropy(&BTreeMap::new()).is_err());
        assert!(selection_entropy(&one_slot(vec![0, 0])).is_err());
    }

    #[test]
    fn entropy_averages_slots() {
        let usage = BTreeMap::from([(0, vec![1, 1]), (1, vec![4, 0])]);
        assert_eq!(selection_entropy(&usage).unwrap(), 2f64.ln() / 2.0);
    }

    #[test]
    fn collapse_rule() {
        assert!(detect_collapse(&[1.0, 0.0], COLLAPSE_THRESHOLD));
        assert!(!detect_collapse(&[0.0, 3f64.ln()], COLLAPSE_THRESHOLD));
        assert!(!detect_collapse(&[0.05], 0.0));
        assert!(detect_collapse(&[0.0], 0.0));
    }

    proptest::proptest! {
        #[test]
        fn entropy_bounds(counts in proptest::collection::vec(0usize..50, 1..12)) {
            proptest::prop_assume!(counts.iter().any(|&c| c > 0));
            let h = entropy(&counts).unwrap();
            proptest::prop_assert!(h >= 0.0);
            proptest::prop_assert!(h <= (counts.len() as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn usage_json_shape() {
        let usage = BTreeMap::from([(0, vec![2, 2, 0])]);
        let v: serde_json::Value = serde_json::from_str(&usage_json(&usage)).unwrap();
        assert_eq!(v["counts"]["0"], json!([2, 2, 0]));
        assert_eq!(v["slot_entropy"]["0"].as_f64().unwrap(), 2f64.ln());
    }
}
