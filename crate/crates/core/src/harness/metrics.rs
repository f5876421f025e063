use serde::{Deserialize, Serialize};

/// Fraction of episodes that must have found the goal for a run to count as solved.
pub const SOLVE_FRACTION: f64 = 0.1;

/// First 1-based episode `t` with `(found in 1..=t) / t >= 0.1`.
pub fn time_to_solve(found: &[bool]) -> Option<usize> {
    let mut hits = 0usize;
    for (i, &f) in found.iter().enumerate() {
        hits += f as usize;
        // Integer form of hits / t >= 0.1, exact at the boundary.
        if 10 * hits >= i + 1 {
            return Some(i + 1);
        }
    }
    None
}

/// First 1-based episode after which every required cell has been visited.
///
/// `visits[t]` lists the cells visited in episode `t + 1`; `required` holds
/// the total number of distinct cells that must be seen.
pub fn coverage_time<T: Ord + Clone>(visits: &[Vec<T>], required: usize) -> Option<usize> {
    let mut seen = std::collections::BTreeSet::new();
    if required == 0 {
        return Some(1).filter(|_| !visits.is_empty());
    }
    for (t, ep) in visits.iter().enumerate() {
        seen.extend(ep.iter().cloned());
        if seen.len() >= required {
            return Some(t + 1);
        }
    }
    None
}

/// Seed-mean cumulative regret per episode with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretCurve {
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Averages cumulative-regret curves over seeds. Curves are truncated to the
/// shortest one.
pub fn aggregate_bayes_regret(curves: &[Vec<f64>]) -> Option<RegretCurve> {
    if curves.len() < 2 {
        return None;
    }
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut se = Vec::with_capacity(len);
    for t in 0..len {
        let m = curves.iter().map(|c| c[t]).sum::<f64>() / n;
        let var = curves.iter().map(|c| (c[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        se.push((var / n).sqrt());
    }
    Some(RegretCurve { mean, se })
}

/// Least-squares slope of `log y` against `log t` (1-based `t`) over the
/// second half of the curve; non-positive values are skipped.
pub fn loglog_slope(curve: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .skip(curve.len() / 2)
        .filter(|(_, &y)| y > 0.0)
        .map(|(i, &y)| (((i + 1) as f64).ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Median with unsolved runs (`None`) ranked above every solved one. Returns
/// `None` when the median run is unsolved.
pub fn median_time(times: &[Option<usize>]) -> Option<f64> {
    if times.is_empty() {
        return None;
    }
    let mut keyed: Vec<usize> = times.iter().map(|t| t.unwrap_or(usize::MAX)).collect();
    keyed.sort_unstable();
    let n = keyed.len();
    let (a, b) = (keyed[(n - 1) / 2], keyed[n / 2]);
    if a == usize::MAX || b == usize::MAX {
        None
    } else {
        Some((a as f64 + b as f64) / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_time_boundaries() {
        assert_eq!(time_to_solve(&[true, false]), Some(1));
        let mut flags = vec![false; 9];
        flags.push(true);
        assert_eq!(time_to_solve(&flags), Some(10));
        assert_eq!(time_to_solve(&[false; 30]), None);
        assert_eq!(time_to_solve(&[]), None);
    }

    #[test]
    fn coverage() {
        assert_eq!(coverage_time(&[vec![(0, 0, 0)]], 1), Some(1));
        assert_eq!(coverage_time(&[vec![1], vec![1], vec![2, 3]], 3), Some(3));
        assert_eq!(coverage_time(&[vec![1], vec![1]], 2), None);
    }

    #[test]
    fn regret_aggregation() {
        let c = vec![vec![0.0, 1.0, 1.5], vec![0.0, 1.0, 1.5]];
        let agg = aggregate_bayes_regret(&c).unwrap();
        assert_eq!(agg.mean, vec![0.0, 1.0, 1.5]);
        assert!(agg.se.iter().all(|&s| s == 0.0));
        assert!(aggregate_bayes_regret(&c[..1]).is_none());
    }

    #[test]
    fn slope_of_power_laws() {
        let sqrt: Vec<f64> = (1..=400).map(|t| (t as f64).sqrt()).collect();
        assert!((loglog_slope(&sqrt).unwrap() - 0.5).abs() < 1e-12);
        let lin: Vec<f64> = (1..=400).map(|t| 3.0 * t as f64).collect();
        assert!((loglog_slope(&lin).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn medians_rank_failures_last() {
        assert_eq!(median_time(&[Some(3), Some(1), Some(2)]), Some(2.0));
        assert_eq!(median_time(&[Some(3), None, Some(1), Some(5)]), Some(4.0));
        assert_eq!(median_time(&[None, None, Some(1)]), None);
    }
}
