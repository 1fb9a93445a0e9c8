//! Top-P% selective updates.
//!
//! A client compares its updated global weights with the ones it received and
//! keeps only the `ceil(P/100 * n)` coordinates that moved the most. The
//! resulting [`SparseDelta`] carries raw differences in global-index space;
//! the server scales them by its schedule when applying.

use std::cmp::Ordering;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    round: u32,
    global_count: u32,
    entries: Vec<(u32, f32)>,
}

impl SparseDelta {
    /// Validates that indices are strictly increasing and in range and that
    /// every value is finite.
    pub fn new(round: u32, global_count: u32, entries: Vec<(u32, f32)>) -> Result<Self> {
        for (k, &(index, value)) in entries.iter().enumerate() {
            if index >= global_count {
                return Err(Error::IndexOutOfRange {
                    index,
                    global_count,
                });
            }
            if k > 0 && entries[k - 1].0 >= index {
                return Err(Error::InvalidArgument(format!(
                    "delta indices must be strictly increasing (found {} then {index})",
                    entries[k - 1].0
                )));
            }
            if !value.is_finite() {
                return Err(Error::NonFinite("sparse delta"));
            }
        }
        Ok(Self {
            round,
            global_count,
            entries,
        })
    }

    pub fn empty(round: u32, global_count: u32) -> Self {
        Self {
            round,
            global_count,
            entries: Vec::new(),
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn global_count(&self) -> u32 {
        self.global_count
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

/// Number of coordinates Top-P% keeps out of `len`.
pub fn selection_size(percent: f64, len: usize) -> usize {
    if percent >= 100.0 {
        return len;
    }
    ((percent * len as f64 / 100.0).ceil() as usize).min(len)
}

pub fn check_percent(percent: f64) -> Result<()> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "top-P percentage must be in (0, 100], got {percent}"
        )));
    }
    Ok(())
}

/// Orders by larger magnitude first, then lower index.
fn rank(a: &(u32, f32), b: &(u32, f32)) -> Ordering {
    b.1.abs()
        .total_cmp(&a.1.abs())
        .then_with(|| a.0.cmp(&b.0))
}

/// Keeps the `ceil(P/100 * n)` largest `|after - before|` coordinates. Ties go
/// to the lower index.
pub fn top_p_select(before: &[f32], after: &[f32], percent: f64, round: u32) -> Result<SparseDelta> {
    check_percent(percent)?;
    if before.len() != after.len() {
        return Err(Error::Dimension {
            what: "updated global values",
            expected: before.len(),
            actual: after.len(),
        });
    }
    let n = before.len();
    let global_count = u32::try_from(n)
        .map_err(|_| Error::InvalidArgument("too many global weights for u32 indices".into()))?;
    let mut diffs: Vec<(u32, f32)> = before
        .iter()
        .zip(after)
        .enumerate()
        .map(|(i, (b, a))| (i as u32, a - b))
        .collect();
    if diffs.iter().any(|d| !d.1.is_finite()) {
        return Err(Error::NonFinite("top_p_select"));
    }
    let m = selection_size(percent, n);
    if m < n {
        if m > 0 {
            diffs.select_nth_unstable_by(m - 1, rank);
        }
        diffs.truncate(m);
        diffs.sort_unstable_by_key(|e| e.0);
    }
    Ok(SparseDelta {
        round,
        global_count,
        entries: diffs,
    })
}

/// `values[i] += scale * v` for every `(i, v)` in the delta.
pub fn apply_delta(values: &mut [f32], delta: &SparseDelta, scale: f32) -> Result<()> {
    if values.len() != delta.global_count as usize {
        return Err(Error::Dimension {
            what: "global values",
            expected: delta.global_count as usize,
            actual: values.len(),
        });
    }
    for &(i, v) in &delta.entries {
        let slot = &mut values[i as usize];
        *slot += scale * v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Full sort by (|d| desc, index asc), take m, report indices ascending.
    fn oracle(before: &[f32], after: &[f32], percent: f64) -> Vec<u32> {
        let mut all: Vec<(u32, f32)> = before
            .iter()
            .zip(after)
            .enumerate()
            .map(|(i, (b, a))| (i as u32, (a - b).abs()))
            .collect();
        all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let m = selection_size(percent, before.len());
        let mut idx: Vec<u32> = all[..m].iter().map(|e| e.0).collect();
        idx.sort();
        idx
    }

    #[test]
    fn selection_sizes() {
        assert_eq!(selection_size(50.0, 576), 288);
        assert_eq!(selection_size(10.0, 544), 55);
        assert_eq!(selection_size(37.0, 100), 37);
        assert_eq!(selection_size(1.0, 1), 1);
        assert_eq!(selection_size(100.0, 7), 7);
        assert_eq!(selection_size(50.0, 0), 0);
    }

    #[test]
    fn full_selection_keeps_exact_differences() {
        let before = [1.0, 2.0, 3.0];
        let after = [1.5, 2.0, -1.0];
        let d = top_p_select(&before, &after, 100.0, 4).unwrap();
        assert_eq!(d.entries(), &[(0, 0.5), (1, 0.0), (2, -4.0)]);
        assert_eq!(d.round(), 4);
    }

    #[test]
    fn picks_two_largest_magnitudes() {
        let before = [0.0; 4];
        let after = [-3.0, 1.0, 2.0, -0.5];
        let d = top_p_select(&before, &after, 50.0, 0).unwrap();
        assert_eq!(d.entries(), &[(0, -3.0), (2, 2.0)]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let before = [0.0; 5];
        let after = [1.0, -2.0, 2.0, 2.0, -2.0];
        let d = top_p_select(&before, &after, 40.0, 0).unwrap();
        assert_eq!(d.indices().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn argument_errors() {
        assert!(top_p_select(&[0.0], &[0.0, 1.0], 50.0, 0).is_err());
        assert!(top_p_select(&[0.0], &[1.0], 0.0, 0).is_err());
        assert!(top_p_select(&[0.0], &[1.0], 100.5, 0).is_err());
        assert!(top_p_select(&[0.0], &[f32::NAN], 50.0, 0).is_err());
    }

    #[test]
    fn delta_validation() {
        assert!(SparseDelta::new(0, 3, vec![(0, 1.0), (2, 1.0)]).is_ok());
        assert!(SparseDelta::new(0, 3, vec![(2, 1.0), (0, 1.0)]).is_err());
        assert!(SparseDelta::new(0, 3, vec![(1, 1.0), (1, 1.0)]).is_err());
        assert!(SparseDelta::new(0, 3, vec![(3, 1.0)]).is_err());
        assert!(SparseDelta::new(0, 3, vec![(0, f32::INFINITY)]).is_err());
    }

    #[test]
    fn apply_touches_only_listed_indices() {
        let mut g = vec![1.0, 1.0, 1.0];
        let d = SparseDelta::new(0, 3, vec![(0, 2.0)]).unwrap();
        apply_delta(&mut g, &d, 0.5).unwrap();
        assert_eq!(g, vec![2.0, 1.0, 1.0]);
        assert!(apply_delta(&mut g[..2], &d, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn matches_sort_oracle(
            before in proptest::collection::vec(-4.0f32..4.0, 1..300),
            noise in proptest::collection::vec(-1.0f32..1.0, 300),
            percent in prop_oneof![Just(1.0), Just(10.0), Just(37.0), Just(50.0), Just(80.0), Just(100.0)],
            quantize in any::<bool>(),
        ) {
            // Quantized changes force many exact ties.
            let after: Vec<f32> = before.iter().zip(&noise).map(|(b, n)| {
                let step = if quantize { (n * 4.0).round() / 4.0 } else { *n };
                b + step
            }).collect();
            let d = top_p_select(&before, &after, percent, 0).unwrap();
            prop_assert_eq!(d.indices().collect::<Vec<_>>(), oracle(&before, &after, percent));
            prop_assert!(d.entries().windows(2).all(|w| w[0].0 < w[1].0));
        }

        #[test]
        fn full_delta_restores_small_updates(
            before in proptest::collection::vec(-2.0f32..2.0, 1..200),
            grad in proptest::collection::vec(-5.0f32..5.0, 200),
        ) {
            // An SGD-sized step keeps each coordinate within a factor of two of
            // where it started, so the difference is exact and adding it back
            // lands on the updated value bit for bit.
            let after: Vec<f32> = before.iter().zip(&grad).map(|(b, g)| b - 0.01 * g * b.abs()).collect();
            let d = top_p_select(&before, &after, 100.0, 0).unwrap();
            let mut g = before.clone();
            apply_delta(&mut g, &d, 1.0).unwrap();
            prop_assert!(g.iter().zip(&after).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
