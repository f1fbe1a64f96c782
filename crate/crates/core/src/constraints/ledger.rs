use serde::Serialize;

use super::Analyzer;
use crate::error::{Error, Result};
use crate::expr::Bindings;
use crate::presym::Tolerances;
use crate::system::LagrangianSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    TerminatedStable,
    /// `I = 2D`: the surface is a discrete set of points.
    TerminatedFull,
    /// No working point could be moved onto the next surface.
    Inconsistent,
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRecord {
    pub order: usize,
    pub labels: Vec<String>,
    /// `I_k`, counting all constraints of order ≤ k.
    pub independent: usize,
    /// Rank of `Γ_k`: multipliers determined at this order.
    pub gamma_rank: Option<usize>,
    /// `max ‖g_k‖` over the working points.
    pub residual_max: f64,
    /// `Γ_k` at the first working point, row-major.
    pub gamma_sample: Option<Vec<Vec<f64>>>,
}

/// Determined kernel direction at one surface point.
#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSample {
    pub point: Vec<f64>,
    /// Horizontal direction `w` with `X̄_EL = X̄_L + K(w)` (free part zero).
    pub w: Vec<f64>,
    /// `u^m = 𝔷_(m)·w` in the kernel basis at the point.
    pub u: Vec<f64>,
}

/// A working point dropped because its rank disagreed with the consensus.
#[derive(Debug, Clone, Serialize)]
pub struct ExcludedPoint {
    pub point: Vec<f64>,
    pub what: String,
    pub observed: usize,
    pub consensus: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstraintLedger {
    pub system: String,
    pub dim: usize,
    pub n0: usize,
    pub levels: Vec<LevelRecord>,
    pub i_sequence: Vec<usize>,
    /// `r_1 … r_{n_F−1}`.
    pub ranks: Vec<usize>,
    pub n_f: usize,
    pub status: Status,
    pub determined: usize,
    pub free: usize,
    pub determined_u: Vec<MultiplierSample>,
    pub excluded: Vec<ExcludedPoint>,
    #[serde(skip)]
    pub points: Vec<Bindings>,
    #[serde(skip)]
    pub tol: Tolerances,
}

impl ConstraintLedger {
    /// Analyzer reproducing the run's frozen ranks.
    pub fn analyzer<'a>(&self, sys: &'a LagrangianSystem) -> Analyzer<'a> {
        Analyzer::new(sys, self.tol, self.n0).with_ranks(self.ranks.clone())
    }

    /// Total count of Lagrangian constraint functions recorded.
    pub fn constraint_count(&self) -> usize {
        self.levels.iter().map(|l| l.labels.len()).sum()
    }
}

/// Largest share of the working points that may disagree with the
/// consensus rank. Such points lie near the locus where the rank drops
/// (where the constant-rank hypothesis fails) and their finite-difference
/// ranks are noise-dominated.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.2;

/// The most common value, provided the points disagreeing with it are few
/// enough to exclude; otherwise a non-constant-rank error.
fn consensus(what: &str, values: &[usize]) -> Result<usize> {
    let (min, max) = (*values.iter().min().unwrap(), *values.iter().max().unwrap());
    let mut best = (0, min);
    for v in min..=max {
        let n = values.iter().filter(|&&x| x == v).count();
        if n > best.0 {
            best = (n, v);
        }
    }
    let outliers = values.len() - best.0;
    if outliers as f64 > MAX_EXCLUDED_FRACTION * values.len() as f64 {
        return Err(Error::NonConstantRank { what: what.into(), min, max });
    }
    Ok(best.1)
}

/// Keep the points whose value matches the consensus, recording the rest.
fn exclude(pts: &mut Vec<Bindings>, values: &[usize], consensus: usize, what: &str, excluded: &mut Vec<ExcludedPoint>) {
    let mut kept = Vec::with_capacity(pts.len());
    for (p, &v) in pts.drain(..).zip(values) {
        if v == consensus {
            kept.push(p);
        } else {
            excluded.push(ExcludedPoint {
                point: p.state().iter().copied().collect(),
                what: what.into(),
                observed: v,
                consensus,
            });
        }
    }
    *pts = kept;
}

/// Iterate the constraint algorithm from points on the first-order surface.
pub fn run_constraint_algorithm(
    sys: &LagrangianSystem,
    points: &[Bindings],
    tol: Tolerances,
) -> Result<ConstraintLedger> {
    let first = points.first().ok_or_else(|| Error::Invalid("no working points".into()))?;
    let d = sys.dim;
    let mut an = Analyzer::at_point(sys, tol, first)?;
    let n0 = an.n0;
    let mut pts = points.to_vec();
    let mut levels = Vec::new();
    let mut i_seq = Vec::new();
    let mut i_prev = 0;
    let mut status = Status::TerminatedStable;
    let mut n_f = 1;
    let mut excluded = Vec::new();
    for k in 1..=2 * d + 1 {
        n_f = k;
        let counts = pts.iter().map(|p| an.independent_count(p, k)).collect::<Result<Vec<_>>>()?;
        let what = format!("stacked constraint gradients at order {k}");
        let i_k = consensus(&what, &counts)?;
        exclude(&mut pts, &counts, i_k, &what, &mut excluded);
        i_seq.push(i_k);
        let labels = (1..=if k == 1 { n0 } else { d }).map(|n| format!("gamma[{k}]_{n}")).collect();
        let mut residual_max = 0.0f64;
        for p in &pts {
            residual_max = residual_max.max(an.level(p, k)?.gammas[k - 1].norm());
        }
        let mut rec =
            LevelRecord { order: k, labels, independent: i_k, gamma_rank: None, residual_max, gamma_sample: None };
        if i_k == i_prev {
            levels.push(rec);
            break;
        }
        if i_k == 2 * d {
            status = Status::TerminatedFull;
            levels.push(rec);
            break;
        }
        let mut ranks = Vec::with_capacity(pts.len());
        for (idx, p) in pts.iter().enumerate() {
            let s = an.level(p, k)?;
            let blk = an.gamma_block(&s)?;
            ranks.push(an.fd_rank(&blk.gamma, s.tab.scale()));
            if idx == 0 {
                rec.gamma_sample = Some(blk.gamma.row_iter().map(|r| r.iter().copied().collect()).collect());
            }
        }
        let what = format!("Gamma at order {k}");
        let r_k = consensus(&what, &ranks)?;
        exclude(&mut pts, &ranks, r_k, &what, &mut excluded);
        rec.gamma_rank = Some(r_k);
        levels.push(rec);
        an.ranks.push(r_k);
        i_prev = i_k;
        pts = pts.iter().filter_map(|p| an.find_surface_point(p, k + 1).ok()).collect();
        if pts.is_empty() {
            status = Status::Inconsistent;
            n_f = k + 1;
            break;
        }
    }
    an.ranks.truncate(n_f.saturating_sub(1));
    let mut determined_u = Vec::new();
    let mut free = n0;
    if status != Status::Inconsistent {
        for p in &pts {
            let s = an.level(p, n_f)?;
            free = s.free;
            determined_u.push(MultiplierSample {
                point: p.state().iter().copied().collect(),
                w: s.w_det.iter().copied().collect(),
                u: (&s.kd.z * &s.w_det).iter().copied().collect(),
            });
        }
    }
    let determined = an.ranks.iter().sum();
    Ok(ConstraintLedger {
        system: sys.name.clone(),
        dim: d,
        n0,
        levels,
        i_sequence: i_seq,
        ranks: an.ranks,
        n_f,
        status,
        determined,
        free,
        determined_u,
        excluded,
        points: pts,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_tolerates_a_small_minority() {
        assert_eq!(consensus("r", &[1, 1, 1, 1, 3]).unwrap(), 1);
        assert_eq!(consensus("r", &[2; 7]).unwrap(), 2);
        let e = consensus("r", &[1, 1, 1, 3, 3]).unwrap_err();
        assert_eq!(e, Error::NonConstantRank { what: "r".into(), min: 1, max: 3 });
    }

    #[test]
    fn excluded_points_are_recorded() {
        let mut pts: Vec<Bindings> = (0..4).map(|i| Bindings::new(vec![i as f64], vec![0.0])).collect();
        let mut out = Vec::new();
        exclude(&mut pts, &[1, 2, 1, 1], 1, "r", &mut out);
        assert_eq!(pts.len(), 3);
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].point[0], out[0].observed, out[0].consensus), (1.0, 2, 1));
    }
}
