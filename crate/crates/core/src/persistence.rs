//! 0-dimensional persistent homology of the superlevel filtration.
//!
//! Pixels are added in descending value order (row-major index breaks ties)
//! and merged through a union-find over 4-neighbours. At a merge the
//! component with the higher birth survives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Field2D;

/// Lifetime below which a finite pair is treated as noise, mm/h.
pub const DEFAULT_PERSISTENCE_EPSILON: f64 = 0.05;
/// Thresholds at or below this value also count the global component, mm/h.
pub const DEFAULT_INFINITE_CUTOFF: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistencePair {
    pub birth: f64,
    pub death: f64,
}

impl PersistencePair {
    pub fn lifetime(&self) -> f64 {
        self.birth - self.death
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceDiagram {
    /// Finite pairs, all with `birth > death`.
    pub pairs: Vec<PersistencePair>,
    /// The global component: born at the field maximum, never dies. Its
    /// `death` holds the field minimum so the arithmetic stays finite.
    pub infinite: Option<PersistencePair>,
}

impl PersistenceDiagram {
    pub fn has_infinite(&self) -> bool {
        self.infinite.is_some()
    }

    pub fn lifetimes(&self) -> impl Iterator<Item = f64> + '_ {
        self.pairs.iter().map(PersistencePair::lifetime)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }
}

pub fn superlevel_persistence_0d(field: &Field2D) -> PersistenceDiagram {
    let (h, w) = field.shape();
    let values = field.values();
    let n = values.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    // rank[i] = position in the filtration; lower rank = older
    let mut rank = vec![0usize; n];
    for (k, &i) in order.iter().enumerate() {
        rank[i] = k;
    }

    let mut uf = UnionFind::new(n);
    let mut active = vec![false; n];
    // birth pixel of the component rooted at each root
    let born_at: Vec<usize> = (0..n).collect();
    let mut pairs = Vec::new();

    for &p in &order {
        active[p] = true;
        let (r, c) = (p / w, p % w);
        let mut neighbours = [usize::MAX; 4];
        if r > 0 {
            neighbours[0] = p - w;
        }
        if r + 1 < h {
            neighbours[1] = p + w;
        }
        if c > 0 {
            neighbours[2] = p - 1;
        }
        if c + 1 < w {
            neighbours[3] = p + 1;
        }
        let mut root_p = uf.find(p);
        for q in neighbours {
            if q == usize::MAX || !active[q] {
                continue;
            }
            let root_q = uf.find(q);
            if root_q == root_p {
                continue;
            }
            let (elder, younger) = if rank[born_at[root_p]] < rank[born_at[root_q]] {
                (root_p, root_q)
            } else {
                (root_q, root_p)
            };
            let birth = values[born_at[younger]];
            let death = values[p];
            // plateau merges have zero lifetime and never affect a count
            if birth > death {
                pairs.push(PersistencePair { birth, death });
            }
            uf.parent[younger] = elder;
            root_p = elder;
        }
    }

    let infinite = (n > 0).then(|| PersistencePair {
        birth: values[order[0]],
        death: values[order[n - 1]],
    });
    PersistenceDiagram { pairs, infinite }
}

/// Number of components of `{x > u}` whose lifetime is at least `epsilon`,
/// plus the global component when `u <= infinite_cutoff`.
pub fn count_components_at(
    diagram: &PersistenceDiagram,
    u: f64,
    epsilon: f64,
    infinite_cutoff: f64,
) -> usize {
    let finite = diagram
        .pairs
        .iter()
        .filter(|p| p.death <= u && u < p.birth && p.lifetime() >= epsilon)
        .count();
    let global = diagram
        .infinite
        .is_some_and(|g| u <= infinite_cutoff && u < g.birth);
    finite + global as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeHistogram {
    /// `n_bins + 1` bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Knee of the cumulative lifetime curve, a suggested noise threshold.
    pub knee: f64,
}

/// Histogram of finite lifetimes pooled over `diagrams`, with a knee
/// estimate taken where the normalized cumulative curve rises furthest
/// above its chord.
pub fn lifetime_histogram(diagrams: &[PersistenceDiagram], n_bins: usize) -> Result<LifetimeHistogram> {
    if n_bins < 2 {
        return Err(Error::InvalidArgument("n_bins must be >= 2".into()));
    }
    let lifetimes: Vec<f64> = diagrams.iter().flat_map(|d| d.lifetimes()).collect();
    histogram_of(&lifetimes, n_bins)
}

pub(crate) fn histogram_of(lifetimes: &[f64], n_bins: usize) -> Result<LifetimeHistogram> {
    if lifetimes.is_empty() {
        return Err(Error::Empty("no finite persistence pairs"));
    }
    let lo = lifetimes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lifetimes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0usize; n_bins];
    for &l in lifetimes {
        let k = if width > 0.0 {
            (((l - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    if width == 0.0 {
        return Ok(LifetimeHistogram {
            edges,
            counts,
            knee: lo,
        });
    }
    let total = lifetimes.len() as f64;
    let mut cum = 0usize;
    let mut best = (f64::NEG_INFINITY, hi);
    for k in 0..n_bins {
        cum += counts[k];
        let x = (k + 1) as f64 / n_bins as f64;
        let y = cum as f64 / total;
        if y - x > best.0 {
            best = (y - x, edges[k + 1]);
        }
    }
    Ok(LifetimeHistogram {
        edges,
        counts,
        knee: best.1,
    })
}
