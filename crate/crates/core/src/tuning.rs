//! Least-squares cross-validation on `(0, ∞)` and the profile search over
//! `(p, h)`.
//!
//! For one `(p, h)` cell the criterion is
//!
//! ```text
//! LSCV₊(h; p) = Σ_ℓ ĝ(x_ℓ)² Δx − (2/n) Σ_{i: X_i > 0} ĝ^{(−i)}(X_i)
//! ```
//!
//! with the leave-one-out values obtained from the full fit. The profile
//! search minimizes over `h` for every `p`, then over `p`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kde::{DevianceCenter, EvaluationGrid, Estimator, SemicontinuousSample};
use crate::tweedie::{PowerParam, SeriesPolicy, SeriesTable};

pub const DEFAULT_P_COUNT: usize = 18;
pub const DEFAULT_H_COUNT: usize = 20;
pub const DEFAULT_P_RANGE: (f64, f64) = (1.05, 1.95);
/// Bandwidth range as multiples of `median(X₊)^{2-1.5}`.
pub const DEFAULT_H_SCALE: (f64, f64) = (0.01, 2.0);

/// Candidate powers and bandwidths, both increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    h_grid: Vec<f64>,
    p_grid: Vec<f64>,
}

impl GridSpec {
    pub fn new(p_grid: Vec<f64>, h_grid: Vec<f64>) -> Result<Self> {
        if p_grid.is_empty() || h_grid.is_empty() {
            return domain("power and bandwidth grids must be nonempty");
        }
        for &p in &p_grid {
            PowerParam::new(p)?;
        }
        if let Some(h) = h_grid.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return domain(format!("bandwidth candidates must be > 0, got {h}"));
        }
        if p_grid.windows(2).any(|w| w[1] <= w[0]) || h_grid.windows(2).any(|w| w[1] <= w[0]) {
            return domain("grids must be strictly increasing");
        }
        Ok(Self { h_grid, p_grid })
    }

    /// `n_p` equally spaced powers on `[p_min, p_max]` and `n_h` log-spaced
    /// bandwidths on `[h_min, h_max]`.
    pub fn ranges(
        (p_min, p_max): (f64, f64),
        n_p: usize,
        (h_min, h_max): (f64, f64),
        n_h: usize,
    ) -> Result<Self> {
        if n_p == 0 || n_h == 0 {
            return domain("grid sizes must be >= 1");
        }
        if !(h_min > 0.0 && h_max >= h_min) {
            return domain(format!("invalid bandwidth range [{h_min}, {h_max}]"));
        }
        let p_grid = if n_p == 1 {
            vec![p_min]
        } else {
            (0..n_p)
                .map(|k| p_min + (p_max - p_min) * k as f64 / (n_p - 1) as f64)
                .collect()
        };
        let h_grid = if n_h == 1 {
            vec![h_min]
        } else {
            let (lo, hi) = (h_min.ln(), h_max.ln());
            (0..n_h)
                .map(|k| (lo + (hi - lo) * k as f64 / (n_h - 1) as f64).exp())
                .collect()
        };
        Self::new(p_grid, h_grid)
    }

    pub fn h_grid(&self) -> &[f64] {
        &self.h_grid
    }

    pub fn p_grid(&self) -> &[f64] {
        &self.p_grid
    }
}

/// Default grids with `(18, 20)` candidates.
pub fn default_grids(sample: &SemicontinuousSample) -> Result<GridSpec> {
    default_grids_sized(sample, DEFAULT_P_COUNT, DEFAULT_H_COUNT)
}

/// Bandwidth range `[0.01 s, 2 s]` with `s = median(X₊)^{0.5}`, which
/// carries the units of `x^{2-p}` at `p = 1.5`.
pub fn default_h_range(sample: &SemicontinuousSample) -> Result<(f64, f64)> {
    let pos = sample.positives();
    if pos.is_empty() {
        return Err(Error::AllZeros);
    }
    let mid = pos.len() / 2;
    let median = if pos.len() % 2 == 1 {
        pos[mid]
    } else {
        0.5 * (pos[mid - 1] + pos[mid])
    };
    let scale = median.powf(2.0 - 1.5);
    Ok((DEFAULT_H_SCALE.0 * scale, DEFAULT_H_SCALE.1 * scale))
}

/// Powers equally spaced on `[1.05, 1.95]`; bandwidths log-spaced on
/// [`default_h_range`].
pub fn default_grids_sized(
    sample: &SemicontinuousSample,
    n_p: usize,
    n_h: usize,
) -> Result<GridSpec> {
    GridSpec::ranges(
        DEFAULT_P_RANGE,
        n_p,
        default_h_range(sample)?,
        n_h,
    )
}

/// Where the candidate grids of a selection come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridChoice {
    /// [`default_grids`] of each sample.
    Default,
    /// [`default_grids_sized`] of each sample.
    Sized { n_p: usize, n_h: usize },
    /// The same grids for every sample.
    Fixed(GridSpec),
}

impl GridChoice {
    pub fn resolve(&self, sample: &SemicontinuousSample) -> Result<GridSpec> {
        match self {
            GridChoice::Default => default_grids(sample),
            GridChoice::Sized { n_p, n_h } => default_grids_sized(sample, *n_p, *n_h),
            GridChoice::Fixed(g) => Ok(g.clone()),
        }
    }
}

/// One evaluation of the discretized criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lscv {
    pub value: f64,
    /// `Σ ĝ(x_ℓ)² Δx`
    pub integral_term: f64,
    /// `(2/n) Σ_{X_i>0} ĝ^{(−i)}(X_i)`
    pub cross_term: f64,
    /// Set when the sample has no positive observation and the cross term
    /// is empty.
    pub all_zeros: bool,
}

fn lscv_with(
    est: &Estimator<'_>,
    sample: &SemicontinuousSample,
    centers: &[DevianceCenter],
    spacing: f64,
) -> Result<Lscv> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::DegenerateSample(
            "cross-validation needs at least two observations".into(),
        ));
    }
    let mut integral = 0.0;
    for dc in centers {
        let g = est.at_center(dc);
        integral += g * g;
    }
    integral *= spacing;

    let mut cross = 0.0;
    let first_pos = sample.zero_count();
    for (i, &xi) in sample.values().iter().enumerate().skip(first_pos) {
        let full = est.at(xi)?;
        cross += est.leave_one_out(i, xi, full)?;
    }
    cross *= 2.0 / n as f64;
    Ok(Lscv {
        value: integral - cross,
        integral_term: integral,
        cross_term: cross,
        all_zeros: first_pos == n,
    })
}

/// The discretized LSCV₊ criterion at `(h, p)` on `grid`.
pub fn lscv_criterion(
    sample: &SemicontinuousSample,
    grid: &EvaluationGrid,
    h: f64,
    p: f64,
) -> Result<Lscv> {
    let table = SeriesTable::shared(PowerParam::new(p)?, SeriesPolicy::default());
    let est = Estimator::new(sample, &table, h)?;
    lscv_with(&est, sample, &centers(grid, p), grid.spacing())
}

fn centers(grid: &EvaluationGrid, p: f64) -> Vec<DevianceCenter> {
    grid.points().iter().map(|&x| DevianceCenter::new(x, p)).collect()
}

/// A `(p, h)` cell whose kernel series failed; its criterion is `+∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub p: f64,
    pub h: f64,
    pub reason: String,
}

/// Outcome of the profile search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub p_star: f64,
    pub h_star: f64,
    pub p_grid: Vec<f64>,
    pub h_grid: Vec<f64>,
    /// `cv_table[k][j]` is the criterion at `(p_grid[k], h_grid[j])`.
    pub cv_table: Vec<Vec<f64>>,
    /// Per-power minimizers `h*(p)` and minima `CV*(p)`.
    pub h_star_by_p: Vec<f64>,
    pub cv_star_by_p: Vec<f64>,
    pub failed: Vec<FailedCell>,
    pub all_zeros: bool,
}

impl SelectionResult {
    pub fn min_cv(&self) -> f64 {
        self.cv_star_by_p
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Profile LSCV over `grids`, with `ĝ` integrated on `eval_grid`.
///
/// Ties go to the smaller power, then the smaller bandwidth. Cells are
/// computed in parallel and stored by index, so the table is independent of
/// the schedule.
pub fn profile_select(
    sample: &SemicontinuousSample,
    grids: &GridSpec,
    eval_grid: &EvaluationGrid,
) -> Result<SelectionResult> {
    if sample.len() < 2 {
        return Err(Error::DegenerateSample(
            "cross-validation needs at least two observations".into(),
        ));
    }
    let policy = SeriesPolicy::default();
    let tables: Vec<(Arc<SeriesTable>, Vec<DevianceCenter>)> = grids
        .p_grid
        .par_iter()
        .map(|&p| {
            let table = SeriesTable::shared(PowerParam::new(p).expect("validated grid"), policy);
            (table, centers(eval_grid, p))
        })
        .collect();

    let n_h = grids.h_grid.len();
    let cells: Vec<std::result::Result<Lscv, Error>> = (0..grids.p_grid.len() * n_h)
        .into_par_iter()
        .map(|cell| {
            let (k, j) = (cell / n_h, cell % n_h);
            let (table, centers) = &tables[k];
            let est = Estimator::new(sample, table, grids.h_grid[j])?;
            lscv_with(&est, sample, centers, eval_grid.spacing())
        })
        .collect();

    let mut cv_table = vec![vec![f64::INFINITY; n_h]; grids.p_grid.len()];
    let mut failed = Vec::new();
    let mut all_zeros = false;
    for (cell, outcome) in cells.into_iter().enumerate() {
        let (k, j) = (cell / n_h, cell % n_h);
        match outcome {
            Ok(l) => {
                all_zeros = l.all_zeros;
                cv_table[k][j] = if l.value.is_nan() { f64::INFINITY } else { l.value };
            }
            Err(e @ Error::NonConvergence { .. }) => failed.push(FailedCell {
                p: grids.p_grid[k],
                h: grids.h_grid[j],
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }

    let mut h_star_by_p = Vec::with_capacity(grids.p_grid.len());
    let mut cv_star_by_p = Vec::with_capacity(grids.p_grid.len());
    for row in &cv_table {
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v < row[best] {
                best = j;
            }
        }
        h_star_by_p.push(grids.h_grid[best]);
        cv_star_by_p.push(row[best]);
    }
    let mut best_p = 0;
    for (k, &v) in cv_star_by_p.iter().enumerate() {
        if v < cv_star_by_p[best_p] {
            best_p = k;
        }
    }
    if !cv_star_by_p[best_p].is_finite() {
        return Err(Error::NonConvergence {
            max_index: policy.max_index(),
            context: "every (p, h) cell failed".into(),
        });
    }
    Ok(SelectionResult {
        p_star: grids.p_grid[best_p],
        h_star: h_star_by_p[best_p],
        p_grid: grids.p_grid.clone(),
        h_grid: grids.h_grid.clone(),
        cv_table,
        h_star_by_p,
        cv_star_by_p,
        failed,
        all_zeros,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[f64]) -> SemicontinuousSample {
        SemicontinuousSample::new(v.to_vec()).unwrap()
    }

    #[test]
    fn default_grid_shape() {
        let sample = s(&[0.0, 0.5, 1.0, 4.0, 9.0]);
        let g = default_grids(&sample).unwrap();
        assert_eq!(g.p_grid().len(), 18);
        assert_eq!(g.h_grid().len(), 20);
        assert!(g.p_grid().iter().all(|&p| p > 1.0 && p < 2.0));
        assert!((g.p_grid()[0] - 1.05).abs() < 1e-15);
        assert!((g.p_grid()[17] - 1.95).abs() < 1e-12);
        // median of positives is 2.5
        assert!((g.h_grid()[0] - 0.01 * 2.5f64.sqrt()).abs() < 1e-15);
        assert!((g.h_grid()[19] - 2.0 * 2.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(default_grids(&s(&[0.0, 0.0])), Err(Error::AllZeros)));
    }

    #[test]
    fn default_h_grid_scales_with_sqrt_of_data_scale() {
        let base = [0.0, 0.3, 1.1, 2.0, 5.0];
        let c = 7.0;
        let scaled: Vec<f64> = base.iter().map(|v| v * c).collect();
        let a = default_grids(&s(&base)).unwrap();
        let b = default_grids(&s(&scaled)).unwrap();
        for (u, v) in a.h_grid().iter().zip(b.h_grid()) {
            assert!((v / u - c.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(vec![], vec![0.1]).is_err());
        assert!(GridSpec::new(vec![1.0], vec![0.1]).is_err());
        assert!(GridSpec::new(vec![1.5], vec![-0.1]).is_err());
        assert!(GridSpec::new(vec![1.5, 1.4], vec![0.1]).is_err());
    }

    #[test]
    fn all_zero_sample_criterion() {
        let sample = s(&[0.0, 0.0, 0.0]);
        let grid = EvaluationGrid::covering(2.0, 32).unwrap();
        let l = lscv_criterion(&sample, &grid, 0.5, 1.5).unwrap();
        assert!(l.all_zeros);
        assert_eq!(l.cross_term, 0.0);
        assert!(l.value > 0.0);
        assert_eq!(l.value, l.integral_term);
    }

    #[test]
    fn single_cell_grid_returns_that_cell() {
        let sample = s(&[0.0, 0.4, 1.0, 2.0]);
        let grid = EvaluationGrid::default_for(&sample);
        let spec = GridSpec::new(vec![1.3], vec![0.2]).unwrap();
        let r = profile_select(&sample, &spec, &grid).unwrap();
        assert_eq!((r.p_star, r.h_star), (1.3, 0.2));
        let direct = lscv_criterion(&sample, &grid, 0.2, 1.3).unwrap();
        assert_eq!(r.cv_table[0][0], direct.value);
    }

    #[test]
    fn degenerate_sample_is_rejected() {
        let sample = s(&[1.0]);
        let grid = EvaluationGrid::default_for(&sample);
        assert!(matches!(
            lscv_criterion(&sample, &grid, 0.2, 1.3),
            Err(Error::DegenerateSample(_))
        ));
    }
}
