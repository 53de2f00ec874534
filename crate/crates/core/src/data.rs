//! Observed datasets: subject records and aggregate census counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SubjectPath;

/// Subject records sharing a covariate dimension and age horizon.
///
/// With `zero_truncated` set every subject has at least one in-window event;
/// otherwise the records are doubly censored and may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub ids: Vec<u64>,
    pub subjects: Vec<SubjectPath>,
    pub dim: usize,
    pub horizon: f64,
    pub zero_truncated: bool,
}

impl CohortDataset {
    pub fn new(
        ids: Vec<u64>,
        subjects: Vec<SubjectPath>,
        dim: usize,
        horizon: f64,
        zero_truncated: bool,
    ) -> Result<Self> {
        let d = CohortDataset {
            ids,
            subjects,
            dim,
            horizon,
            zero_truncated,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.subjects.len() {
            return Err(Error::InvalidArgument("one id per subject required".into()));
        }
        for (&id, s) in self.ids.iter().zip(&self.subjects) {
            if s.covariates.len() != self.dim {
                return Err(Error::InvalidArgument(format!(
                    "subject {id} has {} covariates, expected {}",
                    s.covariates.len(),
                    self.dim
                )));
            }
            if s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "subject {id} has a non-finite covariate"
                )));
            }
            let w = s.window;
            if !(w.c_left >= 0.0 && w.c_left < w.c_right && w.c_right <= self.horizon) {
                return Err(Error::InvalidArgument(format!(
                    "subject {id} has invalid window ({}, {}]",
                    w.c_left, w.c_right
                )));
            }
            for pair in s.event_ages.windows(2) {
                if pair[1] == pair[0] {
                    return Err(Error::DuplicateEvent {
                        subject: id,
                        age: pair[0],
                    });
                }
                if pair[1] < pair[0] {
                    return Err(Error::InvalidArgument(format!(
                        "subject {id} events are not ascending"
                    )));
                }
            }
            if let Some(&e) = s.event_ages.iter().find(|&&e| !w.contains(e)) {
                return Err(Error::InvalidArgument(format!(
                    "subject {id} event at {e} outside ({}, {}]",
                    w.c_left, w.c_right
                )));
            }
            if self.zero_truncated && s.event_ages.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "subject {id} has no events in a zero-truncated cohort"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.subjects.iter().map(|s| s.event_ages.len()).sum()
    }

    /// Copy with the subjects that have at least one event.
    pub fn zero_truncate(&self) -> CohortDataset {
        let (ids, subjects) = self
            .ids
            .iter()
            .zip(&self.subjects)
            .filter(|(_, s)| !s.event_ages.is_empty())
            .map(|(&i, s)| (i, s.clone()))
            .unzip();
        CohortDataset {
            ids,
            subjects,
            dim: self.dim,
            horizon: self.horizon,
            zero_truncated: true,
        }
    }

    /// Copy with pre-window counts hidden where the window starts after birth.
    pub fn hide_pre_window(&self) -> CohortDataset {
        let mut out = self.clone();
        for s in &mut out.subjects {
            if s.window.c_left > 0.0 {
                s.pre_window_events = None;
            }
        }
        out
    }

    /// True when every subject's stratum at the window's left edge is known.
    pub fn strata_known(&self) -> bool {
        self.subjects
            .iter()
            .all(|s| s.pre_window_events.is_some() || s.window.c_left <= 0.0)
    }
}

/// Counts `C(l, z, age)` by census year, covariate cell and integer age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusTable {
    pub years: Vec<i64>,
    /// Covariate cell catalog, lexicographically sorted.
    pub cells: Vec<Vec<f64>>,
    /// Number of integer ages `0..ages`.
    pub ages: usize,
    /// Dense counts indexed `[year][cell][age]`.
    counts: Vec<u64>,
}

impl CensusTable {
    pub fn zeros(years: Vec<i64>, mut cells: Vec<Vec<f64>>, ages: usize) -> Self {
        cells.sort_by(|a, b| cmp_cells(a, b));
        cells.dedup();
        let n = years.len() * cells.len() * ages;
        CensusTable {
            years,
            cells,
            ages,
            counts: vec![0; n],
        }
    }

    fn offset(&self, year: usize, cell: usize, age: usize) -> usize {
        (year * self.cells.len() + cell) * self.ages + age
    }

    pub fn cell_index(&self, z: &[f64]) -> Option<usize> {
        self.cells
            .binary_search_by(|c| cmp_cells(c, z))
            .ok()
    }

    pub fn year_index(&self, year: i64) -> Option<usize> {
        self.years.iter().position(|&y| y == year)
    }

    pub fn get(&self, year: usize, cell: usize, age: usize) -> u64 {
        self.counts[self.offset(year, cell, age)]
    }

    pub fn add(&mut self, year: usize, cell: usize, age: usize, count: u64) {
        let o = self.offset(year, cell, age);
        self.counts[o] += count;
    }

    /// `Σ_l C(l, z, age)`.
    pub fn total(&self, cell: usize, age: usize) -> u64 {
        (0..self.years.len()).map(|y| self.get(y, cell, age)).sum()
    }

    /// Totals over years as a `[cell][age]` matrix of reals.
    pub fn totals_by_cell(&self) -> Vec<Vec<f64>> {
        (0..self.cells.len())
            .map(|c| (0..self.ages).map(|a| self.total(c, a) as f64).collect())
            .collect()
    }

    pub fn year_total(&self, year: usize) -> u64 {
        (0..self.cells.len())
            .flat_map(|c| (0..self.ages).map(move |a| (c, a)))
            .map(|(c, a)| self.get(year, c, a))
            .sum()
    }

    pub fn dim(&self) -> usize {
        self.cells.first().map_or(0, |c| c.len())
    }
}

/// Total order on covariate cells.
pub fn cmp_cells(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}
