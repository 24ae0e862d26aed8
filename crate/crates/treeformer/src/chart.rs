//! Triangular span chart: indexing, storage, split enumeration, and height
//! truncation. Shared by the encoders and the complexity profiler.
//!
//! Storage is a contiguous arena laid out level-major (all spans of length 1,
//! then length 2, ...), which matches the level-parallel fill order.

use crate::error::{Error, Result};

/// Contiguous token range, inclusive on both ends, 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "span start {start} > end {end}");
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a span always covers at least one token
    }
}

/// All prefix/suffix split points of a span, in ascending split order:
/// `[(s_{i,k}, s_{k+1,j}) for k in i..j]`. Length-1 spans have no splits.
pub fn split_pairs(span: Span) -> Result<Vec<(Span, Span)>> {
    if span.len() < 2 {
        return Err(Error::contract(format!(
            "split_pairs on length-{} span ({}, {})",
            span.len(),
            span.start,
            span.end
        )));
    }
    Ok((span.start..span.end)
        .map(|k| (Span::new(span.start, k), Span::new(k + 1, span.end)))
        .collect())
}

/// Number of chart cells for sequence length `n` truncated at height `h`:
/// sum of `n - h' + 1` over levels `h' = 1..=min(h, n)`.
pub fn cell_count(n: usize, h: usize) -> usize {
    (1..=h.min(n)).map(|level| n - level + 1).sum()
}

/// Height-truncated triangular chart over an arbitrary cell payload.
#[derive(Clone, Debug)]
pub struct SpanChart<C> {
    n: usize,
    height: usize,
    d: usize,
    cells: Vec<Option<C>>,
    level_offsets: Vec<usize>,
}

impl<C> SpanChart<C> {
    /// Empty chart for `n` tokens, heights truncated at `h_max` (clamped to
    /// `n` when larger), cell dimension `d` recorded for bookkeeping.
    pub fn new(n: usize, h_max: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("chart over zero tokens"));
        }
        if h_max == 0 || d == 0 {
            return Err(Error::contract(format!(
                "chart_new requires h_max >= 1 and d >= 1, got h_max={h_max} d={d}"
            )));
        }
        let height = h_max.min(n);
        let mut level_offsets = Vec::with_capacity(height + 1);
        let mut offset = 0;
        for level in 1..=height {
            level_offsets.push(offset);
            offset += n - level + 1;
        }
        level_offsets.push(offset);
        Ok(SpanChart {
            n,
            height,
            d,
            cells: (0..offset).map(|_| None).collect(),
            level_offsets,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Effective maximum phrase length: `min(h_max, n)`.
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    fn index(&self, span: Span) -> usize {
        let h = span.len();
        assert!(
            h <= self.height && span.end < self.n,
            "span ({}, {}) outside chart n={} height={}",
            span.start,
            span.end,
            self.n,
            self.height
        );
        self.level_offsets[h - 1] + span.start
    }

    pub fn contains(&self, span: Span) -> bool {
        span.end < self.n && span.len() <= self.height
    }

    pub fn get(&self, span: Span) -> Option<&C> {
        self.cells[self.index(span)].as_ref()
    }

    pub fn is_occupied(&self, span: Span) -> bool {
        self.cells[self.index(span)].is_some()
    }

    /// Write one cell. Enforces the bottom-up discipline: every sub-cell the
    /// span splits into must already be occupied.
    pub fn set(&mut self, span: Span, value: C) -> Result<()> {
        if span.len() >= 2 {
            for (left, right) in split_pairs(span)? {
                for part in [left, right] {
                    if self.contains(part) && !self.is_occupied(part) {
                        return Err(Error::contract(format!(
                            "writing span ({}, {}) before sub-span ({}, {})",
                            span.start, span.end, part.start, part.end
                        )));
                    }
                }
            }
        }
        let idx = self.index(span);
        self.cells[idx] = Some(value);
        Ok(())
    }

    /// The `n - h + 1` spans of length `h`, ascending start index.
    pub fn cells_of_length(&self, h: usize) -> Result<Vec<Span>> {
        if h == 0 || h > self.height {
            return Err(Error::contract(format!(
                "cells_of_length h={h} outside 1..={}",
                self.height
            )));
        }
        Ok(spans_of_length(self.n, h))
    }

    pub fn is_complete(&self) -> bool {
        self.cells.iter().all(|c| c.is_some())
    }

    /// Deterministic traversal of completed cells: length ascending, then
    /// start index. Errors if any cell in the requested levels is unwritten.
    pub fn flatten(&self, lengths: impl IntoIterator<Item = usize>) -> Result<Vec<(Span, &C)>> {
        let mut out = Vec::new();
        for h in lengths {
            for span in self.cells_of_length(h)? {
                match self.get(span) {
                    Some(c) => out.push((span, c)),
                    None => {
                        return Err(Error::contract(format!(
                            "flatten on incomplete chart: span ({}, {}) unwritten",
                            span.start, span.end
                        )))
                    }
                }
            }
        }
        Ok(out)
    }

    /// All levels, token cells first.
    pub fn flatten_all(&self) -> Result<Vec<(Span, &C)>> {
        self.flatten(1..=self.height)
    }

    /// Plain-text rendering: one row per length level (top level first), one
    /// column per start index.
    pub fn render(&self, fmt_cell: impl Fn(Span, Option<&C>) -> String) -> String {
        let mut out = String::new();
        for h in (1..=self.height).rev() {
            out.push_str(&format!("h={h:>2} |"));
            for span in spans_of_length(self.n, h) {
                out.push_str(&format!(" {}", fmt_cell(span, self.get(span))));
            }
            out.push('\n');
        }
        out
    }
}

/// Spans of length `h` over a length-`n` sequence, ascending start index.
pub fn spans_of_length(n: usize, h: usize) -> Vec<Span> {
    (0..=n - h).map(|i| Span::new(i, i + h - 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cell_counts_match_spec_examples() {
        assert_eq!(cell_count(5, 5), 15);
        assert_eq!(cell_count(5, 3), 12);
        assert_eq!(cell_count(1, 1), 1);
        // H > n clamps
        assert_eq!(cell_count(3, 10), 6);
    }

    #[test]
    fn chart_new_rejects_empty_and_clamps_height() {
        assert!(SpanChart::<()>::new(0, 1, 4).is_err());
        let chart = SpanChart::<()>::new(5, 9, 4).unwrap();
        assert_eq!(chart.height(), 5);
        assert_eq!(chart.cell_count(), 15);
    }

    #[test]
    fn split_pairs_five_token_span() {
        // "I have the high ground": all prefix/suffix pairs
        let pairs = split_pairs(Span::new(0, 4)).unwrap();
        assert_eq!(
            pairs,
            vec![
                (Span::new(0, 0), Span::new(1, 4)),
                (Span::new(0, 1), Span::new(2, 4)),
                (Span::new(0, 2), Span::new(3, 4)),
                (Span::new(0, 3), Span::new(4, 4)),
            ]
        );
    }

    #[test]
    fn split_pairs_length_two_and_error() {
        assert_eq!(
            split_pairs(Span::new(3, 4)).unwrap(),
            vec![(Span::new(3, 3), Span::new(4, 4))]
        );
        assert!(split_pairs(Span::new(2, 2)).is_err());
    }

    #[test]
    fn total_split_pairs_full_height_n5_is_20() {
        let total: usize = (1..=5)
            .flat_map(|h| spans_of_length(5, h))
            .filter(|s| s.len() >= 2)
            .map(|s| split_pairs(s).unwrap().len())
            .sum();
        assert_eq!(total, 20);
    }

    #[test]
    fn cells_of_length_counts() {
        let chart = SpanChart::<()>::new(7, 7, 1).unwrap();
        assert_eq!(chart.cells_of_length(3).unwrap().len(), 5);
        assert_eq!(chart.cells_of_length(3).unwrap()[0], Span::new(0, 2));
        assert_eq!(chart.cells_of_length(3).unwrap()[4], Span::new(4, 6));
        let c5 = SpanChart::<()>::new(5, 5, 1).unwrap();
        assert_eq!(c5.cells_of_length(1).unwrap().len(), 5);
        assert_eq!(c5.cells_of_length(5).unwrap().len(), 1);
        assert!(c5.cells_of_length(6).is_err());
        assert!(c5.cells_of_length(0).is_err());
    }

    fn fill(chart: &mut SpanChart<usize>) {
        for h in 1..=chart.height() {
            for span in chart.cells_of_length(h).unwrap() {
                chart.set(span, h).unwrap();
            }
        }
    }

    #[test]
    fn bottom_up_discipline_enforced() {
        let mut chart = SpanChart::<usize>::new(3, 3, 1).unwrap();
        assert!(chart.set(Span::new(0, 1), 0).is_err());
        chart.set(Span::new(0, 0), 0).unwrap();
        chart.set(Span::new(1, 1), 0).unwrap();
        chart.set(Span::new(0, 1), 0).unwrap();
    }

    #[test]
    fn flatten_counts_and_ordering() {
        let mut chart = SpanChart::<usize>::new(5, 3, 1).unwrap();
        fill(&mut chart);
        let all = chart.flatten_all().unwrap();
        assert_eq!(all.len(), 12);
        let only3 = chart.flatten([3]).unwrap();
        assert_eq!(only3.len(), 3);
        // total and stable ordering
        let again = chart.flatten_all().unwrap();
        let order: Vec<Span> = all.iter().map(|(s, _)| *s).collect();
        let order2: Vec<Span> = again.iter().map(|(s, _)| *s).collect();
        assert_eq!(order, order2);
        let mut sorted = order.clone();
        sorted.sort_by_key(|s| (s.len(), s.start));
        assert_eq!(order, sorted);

        let single = SpanChart::<usize>::new(1, 1, 1).unwrap();
        assert!(single.flatten_all().is_err()); // incomplete
    }

    #[test]
    fn flatten_incomplete_is_error() {
        let chart = SpanChart::<usize>::new(4, 2, 1).unwrap();
        assert!(chart.flatten_all().is_err());
    }

    proptest! {
        #[test]
        fn cell_count_matches_enumeration(n in 1usize..=12, h_off in 0usize..12) {
            let h = 1 + h_off % n;
            let enumerated: usize = (1..=h.min(n)).map(|lvl| spans_of_length(n, lvl).len()).sum();
            prop_assert_eq!(cell_count(n, h), enumerated);
            let chart = SpanChart::<()>::new(n, h, 1).unwrap();
            prop_assert_eq!(chart.cell_count(), enumerated);
        }

        #[test]
        fn splits_tile_parent(n in 2usize..=12, start_raw in 0usize..12, len_raw in 0usize..12) {
            let len = 2 + len_raw % (n - 1);
            let start = start_raw % (n - len + 1);
            let span = Span::new(start, start + len - 1);
            let pairs = split_pairs(span).unwrap();
            prop_assert_eq!(pairs.len(), span.len() - 1);
            for (l, r) in pairs {
                prop_assert_eq!(l.start, span.start);
                prop_assert_eq!(r.end, span.end);
                prop_assert_eq!(l.end + 1, r.start);
                prop_assert_eq!(l.len() + r.len(), span.len());
            }
        }
    }
}
