//! Brute-force ground truth: retrain every candidate of a small space and
//! measure how well NAS path probabilities rank them.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{NasError, Result};
use crate::lattice::{build_lattice, path_probability};
use crate::numeric::mix_seed;
use crate::supernet::{ArchitectureWeights, CandidateArchitecture, NetworkShape, SearchSpaceSpec};
use crate::train::{retrain_candidate, TrainConfig};

/// Default limit on exhaustively enumerated spaces.
pub const DEFAULT_CAP: usize = 10_000;

/// Every candidate of the space, lexicographic in group order (last group
/// varies fastest).
pub fn enumerate_candidates(space: &SearchSpaceSpec, cap: usize) -> Result<Vec<CandidateArchitecture>> {
    space.validate()?;
    let size = space.space_size();
    if size > cap as u128 {
        return Err(NasError::Capacity { size, cap });
    }
    let groups = space.groups();
    let sizes: Vec<usize> = groups.iter().map(|&(_, a)| space.group_size(a)).collect();
    let mut idx = vec![0usize; groups.len()];
    let mut out = Vec::with_capacity(size as usize);
    loop {
        let mut layers = space.pinned.clone();
        for (&(l, attr), &i) in groups.iter().zip(&idx) {
            attr.set(&mut layers[l], i);
        }
        out.push(CandidateArchitecture { layers });
        let mut g = idx.len();
        loop {
            if g == 0 {
                return Ok(out);
            }
            g -= 1;
            idx[g] += 1;
            if idx[g] < sizes[g] {
                break;
            }
            idx[g] = 0;
        }
    }
}

/// One exhaustively trained candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEntry {
    pub id: usize,
    pub candidate: CandidateArchitecture,
    pub loss: f64,
    pub params: usize,
    pub nas_prob: Option<f64>,
    /// 1-based position by ascending loss.
    pub oracle_rank: usize,
    /// 1-based position by descending NAS probability.
    pub nas_rank: Option<usize>,
}

/// Oracle losses plus, once compared, NAS agreement statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub entries: Vec<OracleEntry>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    /// Oracle rank of the NAS top-1 candidate.
    pub nas_top1_oracle_rank: Option<usize>,
}

/// 1-based positions after sorting ids by `key`, ties by id.
fn positions(keys: &[f64], descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        let c = keys[a].total_cmp(&keys[b]);
        (if descending { c.reverse() } else { c }).then(a.cmp(&b))
    });
    let mut pos = vec![0; keys.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p + 1;
    }
    pos
}

/// Retrains every candidate with seed `mix_seed(cfg.seed, id)`, in parallel.
pub fn brute_force_rank(
    space: &SearchSpaceSpec,
    shape: NetworkShape,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    cap: usize,
) -> Result<OracleReport> {
    let cands = enumerate_candidates(space, cap)?;
    let losses: Vec<f64> = cands
        .par_iter()
        .enumerate()
        .map(|(id, cand)| {
            let c = TrainConfig {
                seed: mix_seed(cfg.seed, id as u64),
                ..cfg.clone()
            };
            Ok(retrain_candidate(cand, space, shape, train, val, &c)?.val_loss)
        })
        .collect::<Result<_>>()?;
    let ranks = positions(&losses, false);
    let entries = cands
        .into_iter()
        .enumerate()
        .map(|(id, candidate)| OracleEntry {
            id,
            params: crate::supernet::network_param_count(&candidate, space, shape),
            candidate,
            loss: losses[id],
            nas_prob: None,
            oracle_rank: ranks[id],
            nas_rank: None,
        })
        .collect();
    Ok(OracleReport {
        entries,
        spearman: None,
        kendall: None,
        nas_top1_oracle_rank: None,
    })
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(NasError::shape(format!("{} scores", a.len()), format!("{} scores", b.len())));
    }
    if a.len() < 2 {
        return Err(NasError::value("rank correlation needs at least two items"));
    }
    Ok(())
}

/// Spearman correlation: Pearson correlation of average ranks. Zero when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall tau-b. Zero when either side is constant.
pub fn kendall(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            match (da, db) {
                (0, 0) => {}
                (0, _) => ties_a += 1,
                (_, 0) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let denom = (((conc + disc + ties_a) * (conc + disc + ties_b)) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((conc - disc) as f64 / denom)
}

/// Fills NAS probabilities, ranks, and correlations. Higher probability and
/// lower loss both count as better.
pub fn compare_nas_to_oracle(
    weights: &ArchitectureWeights,
    space: &SearchSpaceSpec,
    report: &OracleReport,
) -> Result<OracleReport> {
    let expected = enumerate_candidates(space, usize::MAX)?;
    if expected.len() != report.entries.len()
        || expected.iter().zip(&report.entries).any(|(c, e)| *c != e.candidate)
    {
        return Err(NasError::value("oracle report does not cover this search space"));
    }
    let lattice = build_lattice(weights, space)?;
    let probs = report
        .entries
        .iter()
        .map(|e| path_probability(&lattice, &e.candidate))
        .collect::<Result<Vec<f64>>>()?;
    let neg_loss: Vec<f64> = report.entries.iter().map(|e| -e.loss).collect();
    let nas_ranks = positions(&probs, true);
    let mut out = report.clone();
    for (e, (&p, &r)) in out.entries.iter_mut().zip(probs.iter().zip(&nas_ranks)) {
        e.nas_prob = Some(p);
        e.nas_rank = Some(r);
    }
    if out.entries.len() >= 2 {
        out.spearman = Some(spearman(&probs, &neg_loss)?);
        out.kendall = Some(kendall(&probs, &neg_loss)?);
    }
    let top = nas_ranks.iter().position(|&r| r == 1).expect("non-empty space");
    out.nas_top1_oracle_rank = Some(out.entries[top].oracle_rank);
    Ok(out)
}

/// Compact single-field form used in the CSV: `-c/+r/n` per layer, space separated.
pub fn compact_candidate(cand: &CandidateArchitecture, space: &SearchSpaceSpec) -> String {
    cand.layers
        .iter()
        .map(|c| format!("-{}/+{}/{}", c.left, c.right, space.dim_choices[c.dim_index]))
        .collect::<Vec<_>>()
        .join(" ")
}

/// CSV with header `candidate,loss,params,nas_prob,oracle_rank,nas_rank` and a
/// trailing `# spearman=… kendall=… nas_top1_oracle_rank=…` summary line.
pub fn report_csv(report: &OracleReport, space: &SearchSpaceSpec) -> String {
    let mut s = String::from("candidate,loss,params,nas_prob,oracle_rank,nas_rank\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for e in &report.entries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            compact_candidate(&e.candidate, space),
            e.loss,
            e.params,
            opt(e.nas_prob.map(|p| p.to_string())),
            e.oracle_rank,
            opt(e.nas_rank.map(|r| r.to_string())),
        );
    }
    let _ = writeln!(
        s,
        "# spearman={} kendall={} nas_top1_oracle_rank={}",
        opt(report.spearman.map(|v| v.to_string())),
        opt(report.kendall.map(|v| v.to_string())),
        opt(report.nas_top1_oracle_rank.map(|v| v.to_string())),
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use crate::supernet::Attribute;

    #[test]
    fn enumeration_counts() {
        let s = SearchSpaceSpec::new(1, 0, 0, vec![1, 2, 3], false, true).unwrap();
        assert_eq!(enumerate_candidates(&s, DEFAULT_CAP).unwrap().len(), 3);
        let s = SearchSpaceSpec::new(2, 1, 1, vec![4], true, false).unwrap();
        let all = enumerate_candidates(&s, DEFAULT_CAP).unwrap();
        assert_eq!(all.len(), 16);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        let mut rng = Rng::new(1, 0);
        for _ in 0..20 {
            let s = SearchSpaceSpec::new(
                1 + rng.below(3),
                rng.below(3),
                rng.below(3),
                (1..=1 + rng.below(3)).collect(),
                true,
                true,
            )
            .unwrap();
            let n = enumerate_candidates(&s, DEFAULT_CAP).unwrap().len() as u128;
            assert_eq!(n, s.space_size());
        }
    }

    #[test]
    fn capacity_error_reports_size() {
        let s = SearchSpaceSpec::full_scale();
        match enumerate_candidates(&s, DEFAULT_CAP) {
            Err(NasError::Capacity { size, cap }) => {
                assert_eq!(cap, DEFAULT_CAP);
                assert_eq!(size, 7u128.pow(28) * 8u128.pow(14));
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 3.0, 2.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_properties() {
        let mut rng = Rng::new(4, 0);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.draw_normal()).collect();
            let b: Vec<f64> = (0..8).map(|_| (rng.below(4)) as f64).collect();
            let s = spearman(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
            assert_eq!(s, spearman(&b, &a).unwrap());
            let warped: Vec<f64> = a.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            assert!((s - spearman(&warped, &b).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn kendall_examples() {
        assert_eq!(kendall(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(kendall(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((kendall(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    fn synthetic_report(space: &SearchSpaceSpec, losses: &[f64]) -> OracleReport {
        let cands = enumerate_candidates(space, DEFAULT_CAP).unwrap();
        let ranks = positions(losses, false);
        OracleReport {
            entries: cands
                .into_iter()
                .enumerate()
                .map(|(id, candidate)| OracleEntry {
                    id,
                    candidate,
                    loss: losses[id],
                    params: 0,
                    nas_prob: None,
                    oracle_rank: ranks[id],
                    nas_rank: None,
                })
                .collect(),
            spearman: None,
            kendall: None,
            nas_top1_oracle_rank: None,
        }
    }

    #[test]
    fn comparison_examples() {
        let space = SearchSpaceSpec::new(2, 0, 0, vec![1, 2, 3], false, true).unwrap();
        let mut rng = Rng::new(5, 0);
        let mut w = ArchitectureWeights::zeros(&space);
        let flat: Vec<f64> = w.to_flat().iter().map(|_| rng.draw_normal()).collect();
        w.set_flat(&flat).unwrap();
        let lattice = build_lattice(&w, &space).unwrap();
        let losses: Vec<f64> = enumerate_candidates(&space, DEFAULT_CAP)
            .unwrap()
            .iter()
            .map(|c| -path_probability(&lattice, c).unwrap().ln())
            .collect();
        let report = synthetic_report(&space, &losses);
        let cmp = compare_nas_to_oracle(&w, &space, &report).unwrap();
        assert!((cmp.spearman.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cmp.nas_top1_oracle_rank, Some(1));

        let uniform = compare_nas_to_oracle(&ArchitectureWeights::zeros(&space), &space, &report).unwrap();
        assert_eq!(uniform.spearman, Some(0.0));

        let mut hot = ArchitectureWeights::zeros(&space);
        let winner = report.entries.iter().find(|e| e.oracle_rank == 1).unwrap().candidate.clone();
        for l in 0..2 {
            hot.group_mut(l, Attribute::Dim).unwrap()[winner.layers[l].dim_index] = 50.0;
        }
        assert_eq!(compare_nas_to_oracle(&hot, &space, &report).unwrap().nas_top1_oracle_rank, Some(1));

        let other = SearchSpaceSpec::new(1, 0, 0, vec![1, 2, 3], false, true).unwrap();
        assert!(compare_nas_to_oracle(&ArchitectureWeights::zeros(&other), &other, &report).is_err());

        let csv = report_csv(&cmp, &space);
        assert!(csv.starts_with("candidate,loss,params,nas_prob,oracle_rank,nas_rank\n"));
        assert_eq!(csv.lines().count(), 1 + 9 + 1);
        assert!(csv.lines().last().unwrap().starts_with("# spearman=1"));
    }
}
