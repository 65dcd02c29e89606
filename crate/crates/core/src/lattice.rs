//! The NAS lattice: independent per-layer choice groups weighted by λ, with
//! exact k-best path extraction and the candidate text format.
//!
//! Candidates are written one line per layer, layers numbered from 1:
//!
//! ```text
//! L1: left=-2 right=+3 dim=80
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt::Write as _;

use crate::error::{NasError, Result};
use crate::layer::LayerChoice;
use crate::search::softmax_lambda;
use crate::supernet::{ArchitectureWeights, Attribute, CandidateArchitecture, SearchSpaceSpec};

/// One weighted choice group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceGroup {
    pub layer: usize,
    pub attr: Attribute,
    /// `(choice value, probability)`; the value is the offset or the dim width.
    pub arcs: Vec<(usize, f64)>,
}

/// Product-of-independent-groups lattice over a search space.
#[derive(Debug, Clone, PartialEq)]
pub struct NasLattice {
    pub space: SearchSpaceSpec,
    pub groups: Vec<ChoiceGroup>,
}

fn choice_value(space: &SearchSpaceSpec, attr: Attribute, index: usize) -> usize {
    match attr {
        Attribute::Dim => space.dim_choices[index],
        _ => index,
    }
}

/// One group per searched `(layer, attribute)`, probabilities `softmax(log α)`.
pub fn build_lattice(weights: &ArchitectureWeights, space: &SearchSpaceSpec) -> Result<NasLattice> {
    weights.check(space)?;
    let groups = space
        .groups()
        .into_iter()
        .map(|(layer, attr)| {
            let logits = weights.group(layer, attr).expect("checked against space");
            let probs = softmax_lambda(logits)?;
            Ok(ChoiceGroup {
                layer,
                attr,
                arcs: probs.into_iter().enumerate().map(|(i, p)| (choice_value(space, attr, i), p)).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NasLattice {
        space: space.clone(),
        groups,
    })
}

impl NasLattice {
    /// Lattice from explicit per-group probabilities, validated.
    pub fn from_groups(space: &SearchSpaceSpec, groups: Vec<ChoiceGroup>) -> Result<Self> {
        let expected = space.groups();
        if groups.len() != expected.len() {
            return Err(NasError::value(format!("{} groups, space has {}", groups.len(), expected.len())));
        }
        for (g, &(layer, attr)) in groups.iter().zip(&expected) {
            if g.layer != layer || g.attr != attr || g.arcs.len() != space.group_size(attr) {
                return Err(NasError::value(format!("group for layer {layer} {attr} does not match the space")));
            }
            let sum: f64 = g.arcs.iter().map(|a| a.1).sum();
            if g.arcs.iter().any(|a| a.1.is_nan() || a.1 < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(NasError::value(format!("group for layer {layer} {attr} is not a distribution")));
            }
        }
        Ok(NasLattice {
            space: space.clone(),
            groups,
        })
    }

    /// Number of paths (saturating).
    pub fn num_paths(&self) -> u128 {
        self.groups.iter().fold(1u128, |a, g| a.saturating_mul(g.arcs.len() as u128))
    }

    /// Per-group choice indices of a candidate.
    pub fn indices_of(&self, cand: &CandidateArchitecture) -> Result<Vec<usize>> {
        cand.validate(&self.space)?;
        Ok(self.groups.iter().map(|g| g.attr.of(&cand.layers[g.layer])).collect())
    }

    /// Candidate selecting the given per-group indices; unsearched attributes pinned.
    pub fn candidate_of(&self, indices: &[usize]) -> CandidateArchitecture {
        let mut layers = self.space.pinned.clone();
        for (g, &i) in self.groups.iter().zip(indices) {
            g.attr.set(&mut layers[g.layer], i);
        }
        CandidateArchitecture { layers }
    }

    fn product(&self, indices: &[usize]) -> f64 {
        self.groups.iter().zip(indices).fold(1.0, |p, (g, &i)| p * g.arcs[i].1)
    }
}

/// Product over groups of the chosen probabilities.
pub fn path_probability(lattice: &NasLattice, cand: &CandidateArchitecture) -> Result<f64> {
    Ok(lattice.product(&lattice.indices_of(cand)?))
}

#[derive(Debug, PartialEq)]
struct Entry {
    prob: f64,
    /// Choice indices in group order.
    indices: Vec<usize>,
    /// Position of each group's choice within its descending order.
    ranks: Vec<usize>,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Max-heap: higher probability first, then lexicographically smaller indices.
    fn cmp(&self, other: &Self) -> Ordering {
        self.prob
            .total_cmp(&other.prob)
            .then_with(|| other.indices.cmp(&self.indices))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `n` most probable paths, best first; ties go to lexicographically smaller
/// choice indices. Returns every path when `n` exceeds the space.
pub fn k_best(lattice: &NasLattice, n: usize) -> Result<Vec<(CandidateArchitecture, f64)>> {
    if n == 0 {
        return Err(NasError::value("k_best needs n >= 1"));
    }
    // Each group's choices by descending probability, ties by index.
    let orders: Vec<Vec<usize>> = lattice
        .groups
        .iter()
        .map(|g| {
            let mut o: Vec<usize> = (0..g.arcs.len()).collect();
            o.sort_by(|&a, &b| g.arcs[b].1.total_cmp(&g.arcs[a].1).then(a.cmp(&b)));
            o
        })
        .collect();
    let make = |ranks: Vec<usize>| {
        let indices: Vec<usize> = ranks.iter().zip(&orders).map(|(&r, o)| o[r]).collect();
        Entry {
            prob: lattice.product(&indices),
            indices,
            ranks,
        }
    };
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0; orders.len()];
    seen.insert(start.clone());
    heap.push(make(start));
    let mut out = Vec::with_capacity(n.min(1 << 16));
    while let Some(e) = heap.pop() {
        for g in 0..e.ranks.len() {
            if e.ranks[g] + 1 < orders[g].len() {
                let mut next = e.ranks.clone();
                next[g] += 1;
                if seen.insert(next.clone()) {
                    heap.push(make(next));
                }
            }
        }
        out.push((lattice.candidate_of(&e.indices), e.prob));
        if out.len() == n {
            break;
        }
    }
    Ok(out)
}

/// `L<l>: left=-c right=+r dim=<n>`, one line per layer, layers from 1.
pub fn format_candidate(cand: &CandidateArchitecture, space: &SearchSpaceSpec) -> String {
    let mut s = String::new();
    for (l, c) in cand.layers.iter().enumerate() {
        let _ = writeln!(
            s,
            "L{}: left=-{} right=+{} dim={}",
            l + 1,
            c.left,
            c.right,
            space.dim_choices[c.dim_index]
        );
    }
    s
}

fn parse_layer_line(line: &str, line_no: usize, space: &SearchSpaceSpec) -> Result<(usize, LayerChoice)> {
    let bad = |why: &str| NasError::Config {
        line: line_no,
        reason: format!("{why}: `{line}`"),
    };
    let (head, rest) = line.split_once(':').ok_or_else(|| bad("missing `:`"))?;
    let layer: usize = head
        .trim()
        .strip_prefix('L')
        .and_then(|n| n.parse().ok())
        .filter(|&n| n >= 1)
        .ok_or_else(|| bad("bad layer label"))?;
    let mut fields = rest.split_whitespace();
    let mut field = |key: &str, sign: &str| -> Result<usize> {
        let f = fields.next().ok_or_else(|| bad("missing field"))?;
        f.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.strip_prefix(sign))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("bad `{key}` field")))
    };
    let left = field("left", "-")?;
    let right = field("right", "+")?;
    let dim = field("dim", "")?;
    if fields.next().is_some() {
        return Err(bad("trailing fields"));
    }
    let dim_index = space
        .dim_choices
        .iter()
        .position(|&d| d == dim)
        .ok_or_else(|| bad(&format!("dim {dim} not in {:?}", space.dim_choices)))?;
    Ok((layer - 1, LayerChoice::new(left, right, dim_index)))
}

/// Parses lines written by [`format_candidate`].
pub fn parse_candidate(text: &str, space: &SearchSpaceSpec) -> Result<CandidateArchitecture> {
    let mut layers = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (l, c) = parse_layer_line(line.trim(), i + 1, space)?;
        if l != layers.len() {
            return Err(NasError::Config {
                line: i + 1,
                reason: format!("expected layer L{}", layers.len() + 1),
            });
        }
        layers.push(c);
    }
    let cand = CandidateArchitecture { layers };
    cand.validate(space)?;
    Ok(cand)
}

/// The `topN.txt` format: a `# rank=<k> prob=<p>` header per candidate, its
/// layer lines, then a blank line.
pub fn format_top_n(list: &[(CandidateArchitecture, f64)], space: &SearchSpaceSpec) -> String {
    let mut s = String::new();
    for (k, (cand, p)) in list.iter().enumerate() {
        let _ = writeln!(s, "# rank={} prob={:e}", k + 1, p);
        s.push_str(&format_candidate(cand, space));
        s.push('\n');
    }
    s
}

/// Inverse of [`format_top_n`].
pub fn parse_top_n(text: &str, space: &SearchSpaceSpec) -> Result<Vec<(CandidateArchitecture, f64)>> {
    let mut out = Vec::new();
    let mut current: Option<(f64, Vec<LayerChoice>)> = None;
    let finish = |cur: Option<(f64, Vec<LayerChoice>)>, out: &mut Vec<(CandidateArchitecture, f64)>| -> Result<()> {
        if let Some((p, layers)) = cur {
            let cand = CandidateArchitecture { layers };
            cand.validate(space)?;
            out.push((cand, p));
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            finish(current.take(), &mut out)?;
            let prob = header
                .split_whitespace()
                .find_map(|f| f.strip_prefix("prob="))
                .and_then(|p| p.parse().ok())
                .ok_or_else(|| NasError::Config {
                    line: i + 1,
                    reason: "header without prob".into(),
                })?;
            current = Some((prob, Vec::new()));
        } else {
            let (l, c) = parse_layer_line(line, i + 1, space)?;
            let layers = &mut current
                .as_mut()
                .ok_or_else(|| NasError::Config {
                    line: i + 1,
                    reason: "layer line before any header".into(),
                })?
                .1;
            if l != layers.len() {
                return Err(NasError::Config {
                    line: i + 1,
                    reason: format!("expected layer L{}", layers.len() + 1),
                });
            }
            layers.push(c);
        }
    }
    finish(current, &mut out)?;
    Ok(out)
}
