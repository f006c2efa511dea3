//! Weighted policy learner (Abdallah & Lesser) over a tabular policy.

/// Smallest probability WPL keeps on any action.
pub const PROBABILITY_FLOOR: f64 = 1e-3;

/// Euclidean projection onto `{p : Σp = 1, p_i ≥ floor}`.
///
/// # Panics
/// If `floor·len > 1`.
pub fn project_to_simplex(x: &[f64], floor: f64) -> Vec<f64> {
    let n = x.len();
    let mass = 1.0 - floor * n as f64;
    assert!(mass >= 0.0, "probability floor {floor} too large for {n} actions");

    // Project y = x − floor onto the simplex of the remaining mass.
    let y: Vec<f64> = x.iter().map(|v| v - floor).collect();
    let mut sorted = y.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cumulative += v;
        let candidate = (cumulative - mass) / (i + 1) as f64;
        if v - candidate > 0.0 {
            shift = candidate;
        }
    }
    let mut p: Vec<f64> = y.iter().map(|v| (v - shift).max(0.0) + floor).collect();

    // Push the rounding residue into the largest entry.
    for _ in 0..4 {
        let residue = 1.0 - p.iter().sum::<f64>();
        if residue == 0.0 {
            break;
        }
        let top = super::argmax(&p).expect("nonempty");
        p[top] += residue;
    }
    p
}

/// Per-state WPL statistics over the allowed actions.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct WplEntry {
    pub allowed: Vec<usize>,
    pub probs: Vec<f64>,
    pub values: Vec<f64>,
}

impl WplEntry {
    pub fn new(allowed: Vec<usize>) -> Self {
        let n = allowed.len();
        WplEntry {
            allowed,
            probs: vec![1.0 / n as f64; n],
            values: vec![0.0; n],
        }
    }

    /// Moves the value estimate of `position` toward `reward`, then takes a
    /// WPL step: each action's gradient `q_i − Σπq` is damped by `π_i` when
    /// negative and by `1 − π_i` when positive.
    pub fn update(&mut self, position: usize, reward: f64, lr: f64) {
        self.values[position] += lr * (reward - self.values[position]);
        let mean: f64 = self.probs.iter().zip(&self.values).map(|(p, q)| p * q).sum();
        let stepped: Vec<f64> = self
            .probs
            .iter()
            .zip(&self.values)
            .map(|(&p, &q)| {
                let delta = q - mean;
                let weight = if delta < 0.0 { p } else { 1.0 - p };
                p + lr * delta * weight
            })
            .collect();
        self.probs = project_to_simplex(&stepped, PROBABILITY_FLOOR);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_fixes_valid_points() {
        let p = project_to_simplex(&[0.2, 0.3, 0.5], PROBABILITY_FLOOR);
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn projection_clamps_to_floor() {
        let p = project_to_simplex(&[2.0, -1.0, 0.0], 0.01);
        assert_eq!(p[1], 0.01);
        assert_eq!(p[2], 0.01);
        assert!((p[0] - 0.98).abs() < 1e-15);
    }

    #[test]
    fn wpl_moves_toward_better_action() {
        let mut e = WplEntry::new(vec![0, 1]);
        for _ in 0..200 {
            e.update(0, 1.0, 0.1);
            e.update(1, 0.0, 0.1);
        }
        assert!(e.probs[0] > 0.9);
    }

    proptest! {
        #[test]
        fn projection_stays_in_floored_simplex(x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
            let p = project_to_simplex(&x, PROBABILITY_FLOOR);
            prop_assert!(p.iter().all(|&v| v >= PROBABILITY_FLOOR && v <= 1.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }

        #[test]
        fn wpl_step_stays_in_simplex(
            n in 2usize..8,
            steps in prop::collection::vec((0usize..8, -1.0f64..1.0), 1..50),
            lr in 0.01f64..1.0,
        ) {
            let mut e = WplEntry::new((0..n).collect());
            for (a, r) in steps {
                e.update(a % n, r, lr);
                prop_assert!(e.probs.iter().all(|&v| v >= PROBABILITY_FLOOR && v <= 1.0));
                prop_assert!((e.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
            }
        }
    }
}
