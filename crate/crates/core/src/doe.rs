//! Boolean designs over modules and their unrolling into per-step schedules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{boolean_column, VersionVector};
use crate::table::DataTable;

pub const DEFAULT_ROW_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoeDesign {
    pub module_names: Vec<String>,
    pub rows: Vec<Vec<bool>>,
}

impl DoeDesign {
    pub fn new(module_names: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != module_names.len()) {
            return Err(Error::Config(format!(
                "design row has {} entries for {} modules",
                r.len(),
                module_names.len()
            )));
        }
        Ok(DoeDesign { module_names, rows })
    }

    /// All 2^m version combinations in binary-counting order, first module
    /// as the least significant bit.
    pub fn full_factorial(module_names: &[String]) -> Result<Self> {
        Self::full_factorial_with_cap(module_names, DEFAULT_ROW_CAP)
    }

    pub fn full_factorial_with_cap(module_names: &[String], cap: usize) -> Result<Self> {
        let m = module_names.len();
        let capacity = Error::Capacity { modules: m, cap };
        if m >= usize::BITS as usize - 1 {
            return Err(capacity);
        }
        let r = 1usize << m;
        if r > cap {
            return Err(capacity);
        }
        let rows = (0..r)
            .map(|i| (0..m).map(|j| (i >> j) & 1 == 1).collect())
            .collect();
        Ok(DoeDesign {
            module_names: module_names.to_vec(),
            rows,
        })
    }

    /// Every 0 swapped for 1 and vice versa.
    pub fn complement(&self) -> DoeDesign {
        DoeDesign {
            module_names: self.module_names.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|b| !b).collect())
                .collect(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn nmodules(&self) -> usize {
        self.module_names.len()
    }

    pub fn row_vector(&self, i: usize) -> VersionVector {
        VersionVector(self.rows[i].clone())
    }

    pub fn to_table(&self) -> Result<DataTable> {
        let columns = self
            .module_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let col = self.rows.iter().map(|r| r[j] as u8 as f64).collect();
                (boolean_column(name), col)
            })
            .collect();
        DataTable::from_columns((0..self.nrows()).collect(), columns)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    #[default]
    Sequential,
    /// Rows permuted independently for every repetition of the design.
    Random,
}

/// A design unrolled over time: a constant version vector per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub module_names: Vec<String>,
    pub segment_length: usize,
    pub ordering: Ordering,
    /// Design-row index occupying each segment.
    pub segment_rows: Vec<usize>,
    steps: Vec<VersionVector>,
}

impl Schedule {
    pub fn steps(&self) -> &[VersionVector] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.segment_rows.len()
    }

    /// Segment holding step `t`; steps past the last whole segment belong to it.
    pub fn segment_of(&self, t: usize) -> usize {
        (t / self.segment_length).min(self.segment_count() - 1)
    }

    /// True when steps `t - 1` and `t` lie in different segments.
    pub fn is_boundary(&self, t: usize) -> bool {
        t > 0 && self.segment_of(t) != self.segment_of(t - 1)
    }

    /// Value of module `j`'s flag at step `t`, as 0.0/1.0.
    pub fn flag(&self, t: usize, j: usize) -> f64 {
        self.steps[t].0[j] as u8 as f64
    }

    pub fn to_table(&self) -> Result<DataTable> {
        let columns = self
            .module_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let col = (0..self.len()).map(|t| self.flag(t, j)).collect();
                (boolean_column(name), col)
            })
            .collect();
        DataTable::from_columns((0..self.len()).collect(), columns)
    }

    /// A schedule holding one vector for all `n` steps.
    pub fn constant(module_names: Vec<String>, versions: VersionVector, n: usize) -> Result<Self> {
        let design = DoeDesign::new(module_names, vec![versions.0])?;
        make_schedule(&design, n, n.max(1), Ordering::Sequential, 0)
    }
}

/// Lay design rows out segment by segment, repeating the whole design until
/// `n` steps are filled. The last repetition may stop mid-design; steps past
/// the last whole segment keep that segment's vector.
pub fn make_schedule(
    design: &DoeDesign,
    n: usize,
    segment_length: usize,
    ordering: Ordering,
    seed: u64,
) -> Result<Schedule> {
    if segment_length == 0 || n == 0 {
        return Err(Error::Config("segment_length and n must be >= 1".into()));
    }
    if design.rows.is_empty() {
        return Err(Error::Config("design has no rows".into()));
    }
    let r = design.nrows();
    let segments = (n / segment_length).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segment_rows = Vec::with_capacity(segments);
    while segment_rows.len() < segments {
        let mut order: Vec<usize> = (0..r).collect();
        if ordering == Ordering::Random {
            order.shuffle(&mut rng);
        }
        let take = (segments - segment_rows.len()).min(r);
        segment_rows.extend_from_slice(&order[..take]);
    }
    let steps = (0..n)
        .map(|t| {
            let seg = (t / segment_length).min(segments - 1);
            design.row_vector(segment_rows[seg])
        })
        .collect();
    Ok(Schedule {
        module_names: design.module_names.clone(),
        segment_length,
        ordering,
        segment_rows,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(m: usize) -> Vec<String> {
        ["Battery", "Motor", "Driveline", "Glider", "E", "F"][..m]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    #[test]
    fn full_factorial_sizes() {
        assert_eq!(DoeDesign::full_factorial(&names(4)).unwrap().nrows(), 16);
        let empty = DoeDesign::full_factorial(&[]).unwrap();
        assert_eq!(empty.rows, vec![Vec::<bool>::new()]);
    }

    #[test]
    fn two_factor_design_is_binary_counting() {
        let d = DoeDesign::full_factorial(&names(2)).unwrap();
        assert_eq!(
            d.rows,
            vec![
                vec![false, false],
                vec![true, false],
                vec![false, true],
                vec![true, true]
            ]
        );
        for j in 0..2 {
            assert_eq!(d.rows.iter().filter(|r| r[j]).count(), 2);
        }
    }

    #[test]
    fn capacity_error_above_cap() {
        let err = DoeDesign::full_factorial_with_cap(&names(6), 32).unwrap_err();
        assert!(matches!(err, Error::Capacity { modules: 6, cap: 32 }));
    }

    #[test]
    fn complement_of_zero_row_is_all_ones() {
        let d = DoeDesign::new(names(3), vec![vec![false; 3]]).unwrap();
        assert_eq!(d.complement().rows, vec![vec![true; 3]]);
    }

    #[test]
    fn paper_layout_twenty_step_segments() {
        let d = DoeDesign::full_factorial(&names(4)).unwrap();
        let s = make_schedule(&d, 5960, 20, Ordering::Sequential, 0).unwrap();
        assert_eq!(s.segment_count(), 298);
        // 18 whole repetitions then ten rows of the 19th.
        assert_eq!(298, 18 * 16 + 10);
        assert_eq!(s.segment_rows[288..], (0..10).collect::<Vec<_>>()[..]);
        for t in 1..5960 {
            let changed = s.steps()[t] != s.steps()[t - 1];
            if changed {
                assert_eq!(t % 20, 0);
            }
        }
    }

    #[test]
    fn long_segments_pad_with_last_vector() {
        let d = DoeDesign::full_factorial(&names(4)).unwrap();
        let s = make_schedule(&d, 5960, 186, Ordering::Sequential, 0).unwrap();
        assert_eq!(s.segment_count(), 32);
        assert_eq!(32 * 186, 5952);
        for t in 5952..5960 {
            assert_eq!(s.steps()[t], s.steps()[5951]);
        }
        assert_eq!(s.segment_of(5959), 31);
    }

    #[test]
    fn one_row_design_gives_constant_schedule() {
        let d = DoeDesign::new(names(2), vec![vec![true, false]]).unwrap();
        let s = make_schedule(&d, 50, 50, Ordering::Random, 9).unwrap();
        assert!(s.steps().iter().all(|v| v.0 == vec![true, false]));
    }

    #[test]
    fn random_ordering_permutes_each_repetition() {
        let d = DoeDesign::full_factorial(&names(4)).unwrap();
        let s = make_schedule(&d, 16 * 20 * 3, 20, Ordering::Random, 42).unwrap();
        for rep in s.segment_rows.chunks(16) {
            let mut sorted = rep.to_vec();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..16).collect::<Vec<_>>());
        }
        assert_ne!(s.segment_rows[..16], (0..16).collect::<Vec<_>>()[..]);
    }
}
