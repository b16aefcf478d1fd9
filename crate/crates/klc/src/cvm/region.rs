//! Cluster variation region graphs: outer clusters from maximal potential
//! scopes, inner regions from the intersection closure, integer counting
//! numbers from Mobius inversion.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::factored::FactorGraph;
use crate::table::Table;

/// `a` sorted strictly inside `b`?
pub fn is_strict_subset(a: &[usize], b: &[usize]) -> bool {
    a.len() < b.len() && is_subset(a, b)
}

/// `a` sorted subset of `b` sorted?
pub fn is_subset(a: &[usize], b: &[usize]) -> bool {
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j == b.len() || b[j] != x {
            return false;
        }
        j += 1;
    }
    true
}

fn intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// One region: an outer cluster (hosting a potential product) or an inner
/// intersection region.
#[derive(Debug, Clone)]
pub struct Region {
    /// Sorted variable ids.
    pub scope: Vec<usize>,
    /// Mobius counting number.
    pub counting_number: i64,
    /// Product of hosted potentials in log space; outer regions only.
    pub log_psi: Option<Table>,
}

/// Region graph built from a factor graph: outer regions are the maximal
/// distinct potential scopes (subset-scope potentials are absorbed into the
/// first covering cluster), inner regions are the intersection closure.
#[derive(Debug, Clone)]
pub struct RegionGraph {
    pub var_cards: Vec<usize>,
    /// Outer regions first (potential appearance order), inner regions after
    /// (sorted by descending size, then scope).
    pub regions: Vec<Region>,
    pub num_outer: usize,
}

impl RegionGraph {
    pub fn from_factor_graph(fg: &FactorGraph) -> Result<Self> {
        let var_cards: Vec<usize> = fg.variables.iter().map(|v| v.cardinality).collect();
        if fg.factors.is_empty() {
            return Err(Error::Domain("factor graph has no factors".into()));
        }
        for f in &fg.factors {
            if f.table.vars().is_empty() {
                return Err(Error::Domain(format!(
                    "factor {} has empty scope",
                    f.name
                )));
            }
            for (&v, &c) in f.table.vars().iter().zip(f.table.cards()) {
                if v >= var_cards.len() || var_cards[v] != c {
                    return Err(Error::Shape(format!(
                        "factor {} disagrees with variable {v}",
                        f.name
                    )));
                }
            }
        }
        // distinct scopes in appearance order, then maximal ones only
        let mut scopes: Vec<Vec<usize>> = Vec::new();
        for f in &fg.factors {
            let sc = f.table.vars().to_vec();
            if !scopes.contains(&sc) {
                scopes.push(sc);
            }
        }
        let outer_scopes: Vec<Vec<usize>> = scopes
            .iter()
            .filter(|s| !scopes.iter().any(|o| is_strict_subset(s, o)))
            .cloned()
            .collect();
        // host each potential in the first covering outer cluster
        let mut log_psi: Vec<Table> = outer_scopes
            .iter()
            .map(|s| {
                let cards: Vec<usize> = s.iter().map(|&v| var_cards[v]).collect();
                Table::constant(s.clone(), cards, 0.0)
            })
            .collect::<Result<_>>()?;
        for f in &fg.factors {
            let host = outer_scopes
                .iter()
                .position(|s| is_subset(f.table.vars(), s))
                .expect("every scope is covered by a maximal scope");
            log_psi[host].accumulate(&f.table)?;
        }
        // intersection closure
        let mut all: Vec<Vec<usize>> = outer_scopes.clone();
        let mut present: HashSet<Vec<usize>> = all.iter().cloned().collect();
        loop {
            let mut new: Vec<Vec<usize>> = Vec::new();
            for i in 0..all.len() {
                for j in (i + 1)..all.len() {
                    let c = intersect(&all[i], &all[j]);
                    if !c.is_empty() && !present.contains(&c) {
                        present.insert(c.clone());
                        new.push(c);
                    }
                }
            }
            if new.is_empty() {
                break;
            }
            all.extend(new);
        }
        let mut inner_scopes: Vec<Vec<usize>> = all[outer_scopes.len()..].to_vec();
        inner_scopes.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

        let num_outer = outer_scopes.len();
        let mut regions: Vec<Region> = Vec::with_capacity(num_outer + inner_scopes.len());
        for (s, psi) in outer_scopes.into_iter().zip(log_psi) {
            regions.push(Region {
                scope: s,
                counting_number: 0,
                log_psi: Some(psi),
            });
        }
        for s in inner_scopes {
            regions.push(Region {
                scope: s,
                counting_number: 0,
                log_psi: None,
            });
        }
        // counting numbers, descending size so strict supersets come first
        let mut order: Vec<usize> = (0..regions.len()).collect();
        order.sort_by(|&a, &b| {
            regions[b]
                .scope
                .len()
                .cmp(&regions[a].scope.len())
                .then_with(|| regions[a].scope.cmp(&regions[b].scope))
        });
        for &r in &order {
            let mut a: i64 = 1;
            for o in 0..regions.len() {
                if is_strict_subset(&regions[r].scope, &regions[o].scope) {
                    a -= regions[o].counting_number;
                }
            }
            regions[r].counting_number = a;
        }
        let rg = RegionGraph {
            var_cards,
            regions,
            num_outer,
        };
        if !rg.counting_identity_holds() {
            return Err(Error::Domain(
                "counting numbers violate the Mobius identity".into(),
            ));
        }
        Ok(rg)
    }

    pub fn is_outer(&self, r: usize) -> bool {
        r < self.num_outer
    }

    /// Cardinalities of a region's scope variables.
    pub fn scope_cards(&self, r: usize) -> Vec<usize> {
        self.regions[r]
            .scope
            .iter()
            .map(|&v| self.var_cards[v])
            .collect()
    }

    /// Check that for every region the counting numbers of its weak supersets
    /// sum to exactly one (integer arithmetic, no tolerance).
    pub fn counting_identity_holds(&self) -> bool {
        for r in &self.regions {
            let mut total: i64 = 0;
            for o in &self.regions {
                if is_subset(&r.scope, &o.scope) {
                    total += o.counting_number;
                }
            }
            if total != 1 {
                return false;
            }
        }
        true
    }

    /// Parent-child cover pairs of the region poset: `(p, c)` with
    /// `scope(c)` strictly inside `scope(p)` and no region in between.
    pub fn hasse_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for c in 0..self.regions.len() {
            let parents: Vec<usize> = (0..self.regions.len())
                .filter(|&p| is_strict_subset(&self.regions[c].scope, &self.regions[p].scope))
                .collect();
            for &p in &parents {
                let minimal = !parents
                    .iter()
                    .any(|&q| is_strict_subset(&self.regions[q].scope, &self.regions[p].scope));
                if minimal {
                    edges.push((p, c));
                }
            }
        }
        edges
    }
}
