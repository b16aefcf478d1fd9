//! Double-loop minimization of the cluster variation free energy.
//!
//! The free energy splits into a convex part (outerted KL terms plus inner
//! entropies with positive counting numbers) and a concave part (inner
//! entropies with negative counting numbers). Each outer step linearizes the
//! concave part at the current beliefs, which yields a convex problem whose
//! dual the inner loop solves by coordinate ascent with closed-form edge
//! updates. Every completed outer step can only lower the free energy, so the
//! reported trace is non-increasing.
//!
//! Regions whose convex weight is zero carry no entropy term; they are
//! eliminated from the inner problem and their consistency constraints are
//! rewired into agreement edges between the surviving neighbours.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::logsumexp::{log_add, log_normalize};
use crate::table::Table;

use super::region::RegionGraph;

/// Beliefs below this floor are clamped when linearizing the concave part so
/// the fields stay finite inside the support masks.
const LOG_BELIEF_FLOOR: f64 = -690.77552789821368; // ln(1e-300)

#[derive(Debug, Clone, serde::Serialize)]
pub struct DoubleLoopOptions {
    pub max_outer: usize,
    /// Stop when the free energy changes by less than this between outer
    /// steps.
    pub outer_tolerance: f64,
    pub inner_iterations: usize,
    /// Inner loop stops when the largest marginal disagreement across an
    /// agreement edge falls below this. Keep it well below the outer
    /// tolerance: the descent argument assumes the inner problem is solved.
    pub inner_tolerance: f64,
    /// Convex combination weight on the previous dual variable (0 = none).
    pub damping: f64,
}

impl Default for DoubleLoopOptions {
    fn default() -> Self {
        DoubleLoopOptions {
            max_outer: 20_000,
            outer_tolerance: 1e-9,
            inner_iterations: 200,
            inner_tolerance: 1e-12,
            damping: 0.0,
        }
    }
}

/// Outcome of a double-loop run.
#[derive(Debug, Clone)]
pub struct CvmRun {
    pub free_energy: f64,
    /// Free energy after each completed outer step.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub outer_iterations: usize,
    /// Largest agreement violation left by the final inner solve.
    pub last_inner_violation: f64,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    r1: usize,
    r2: usize,
    /// Region whose scope the two endpoints must agree on.
    shared: usize,
}

/// Double-loop state over a region graph.
pub struct DoubleLoop {
    rg: RegionGraph,
    options: DoubleLoopOptions,
    /// Convex weights: 1 for outer regions, max(a, 0) for inner ones.
    w: Vec<f64>,
    active: Vec<usize>,
    /// Support masks after constraint propagation, flat per region table.
    masks: Vec<Vec<bool>>,
    /// Eliminated region -> surviving regions that host its constraints.
    owners: BTreeMap<usize, Vec<usize>>,
    edges: Vec<Edge>,
    /// Dual variables, one finite table per edge over the shared scope.
    mu: Vec<Table>,
    /// Current beliefs, log domain, normalized, for every region.
    beliefs: Vec<Table>,
}

impl DoubleLoop {
    pub fn new(rg: RegionGraph, options: DoubleLoopOptions) -> Result<Self> {
        if !(0.0..1.0).contains(&options.damping) {
            return Err(Error::Domain("damping must lie in [0, 1)".into()));
        }
        let nr = rg.regions.len();
        let mut w = vec![0.0f64; nr];
        for r in 0..nr {
            w[r] = if rg.is_outer(r) {
                1.0
            } else {
                (rg.regions[r].counting_number as f64).max(0.0)
            };
        }
        let active: Vec<usize> = (0..nr).filter(|&r| w[r] > 0.0).collect();

        let masks = propagate_masks(&rg)?;

        // rewire the constraints of weight-zero regions
        let mut edges: Vec<Edge> = rg
            .hasse_edges()
            .into_iter()
            .map(|(p, c)| Edge { r1: p, r2: c, shared: c })
            .collect();
        let mut owners: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut eliminate: Vec<usize> = (0..nr).filter(|&r| w[r] == 0.0).collect();
        eliminate.sort_by(|&a, &b| {
            rg.regions[b]
                .scope
                .len()
                .cmp(&rg.regions[a].scope.len())
                .then_with(|| rg.regions[a].scope.cmp(&rg.regions[b].scope))
        });
        for beta in eliminate {
            let mut parents: Vec<usize> = edges
                .iter()
                .filter(|e| e.r2 == beta)
                .map(|e| e.r1)
                .collect();
            parents.sort_unstable();
            parents.dedup();
            let mut children: Vec<usize> = edges
                .iter()
                .filter(|e| e.r1 == beta)
                .map(|e| e.r2)
                .collect();
            children.sort_unstable();
            children.dedup();
            edges.retain(|e| e.r1 != beta && e.r2 != beta);
            if parents.is_empty() {
                return Err(Error::Domain(format!(
                    "region {:?} has no surviving parent",
                    rg.regions[beta].scope
                )));
            }
            for i in 0..parents.len().saturating_sub(1) {
                edges.push(Edge {
                    r1: parents[i],
                    r2: parents[i + 1],
                    shared: beta,
                });
            }
            for c in children {
                edges.push(Edge {
                    r1: parents[0],
                    r2: c,
                    shared: c,
                });
            }
            owners.insert(beta, parents);
        }

        let mu: Vec<Table> = edges
            .iter()
            .map(|e| {
                Table::constant(rg.regions[e.shared].scope.clone(), rg.scope_cards(e.shared), 0.0)
            })
            .collect::<Result<_>>()?;

        // initial beliefs: normalized potentials for outer regions, uniform
        // within the support mask elsewhere
        let mut beliefs: Vec<Table> = Vec::with_capacity(nr);
        for r in 0..nr {
            let mut t = match &rg.regions[r].log_psi {
                Some(psi) => psi.clone(),
                None => Table::constant(rg.regions[r].scope.clone(), rg.scope_cards(r), 0.0)?,
            };
            apply_mask(&mut t, &masks[r]);
            t.normalize();
            beliefs.push(t);
        }
        let mut dl = DoubleLoop {
            rg,
            options,
            w,
            active,
            masks,
            owners,
            edges,
            mu,
            beliefs,
        };
        dl.set_inactive_beliefs()?;
        Ok(dl)
    }

    pub fn region_graph(&self) -> &RegionGraph {
        &self.rg
    }

    pub fn beliefs(&self) -> &[Table] {
        &self.beliefs
    }

    pub fn options(&self) -> &DoubleLoopOptions {
        &self.options
    }

    /// Replace the belief of an eliminated region by the normalized average
    /// of its owners' projected marginals.
    fn set_inactive_beliefs(&mut self) -> Result<()> {
        let owners: Vec<(usize, Vec<usize>)> =
            self.owners.iter().map(|(k, v)| (*k, v.clone())).collect();
        for (beta, parents) in owners {
            let scope = self.rg.regions[beta].scope.clone();
            let mut acc: Option<Vec<f64>> = None;
            for p in parents {
                let mut m = self.beliefs[p].marginalize_lse(&scope)?;
                m.normalize();
                acc = Some(match acc {
                    None => m.data().to_vec(),
                    Some(a) => a
                        .iter()
                        .zip(m.data())
                        .map(|(&x, &y)| log_add(x, y))
                        .collect(),
                });
            }
            let mut data = acc.expect("every eliminated region has owners");
            log_normalize(&mut data);
            self.beliefs[beta] = Table::new(scope, self.rg.scope_cards(beta), data)?;
        }
        Ok(())
    }

    /// Current cluster variation free energy of the stored beliefs.
    pub fn free_energy(&self) -> f64 {
        cvm_free_energy(&self.rg, &self.beliefs)
    }

    /// Linearize the concave part at the current beliefs. Returns, for each
    /// active region, the negated field `-theta` (so entries stay in
    /// `[-inf, 0..]` and exact zeros remain representable).
    fn build_neg_theta(&self) -> Result<Vec<Option<Table>>> {
        let nr = self.rg.regions.len();
        let mut neg: Vec<Option<Table>> = vec![None; nr];
        for &r in &self.active {
            let mut t = match &self.rg.regions[r].log_psi {
                Some(psi) => psi.clone(),
                None => Table::constant(self.rg.regions[r].scope.clone(), self.rg.scope_cards(r), 0.0)?,
            };
            apply_mask(&mut t, &self.masks[r]);
            neg[r] = Some(t);
        }
        for (&beta, parents) in &self.owners {
            let a = self.rg.regions[beta].counting_number;
            if a == 0 {
                continue;
            }
            debug_assert!(a < 0, "eliminated regions have nonpositive counting numbers");
            let coeff = -(a as f64) / parents.len() as f64;
            let data: Vec<f64> = self.beliefs[beta]
                .data()
                .iter()
                .zip(&self.masks[beta])
                .map(|(&lp, &ok)| {
                    if ok {
                        coeff * lp.max(LOG_BELIEF_FLOOR)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let share = Table::new(
                self.rg.regions[beta].scope.clone(),
                self.rg.scope_cards(beta),
                data,
            )?;
            for &p in parents {
                neg[p]
                    .as_mut()
                    .expect("owners are active")
                    .accumulate(&share)?;
            }
        }
        Ok(neg)
    }

    /// Full field of an active region: `-theta` plus every incident dual
    /// variable with its sign.
    fn field(&self, r: usize, neg_theta: &[Option<Table>]) -> Result<Table> {
        let mut g = neg_theta[r].as_ref().expect("active region").clone();
        for (i, e) in self.edges.iter().enumerate() {
            if e.r1 == r {
                g.accumulate(&self.mu[i])?;
            } else if e.r2 == r {
                g.subtract(&self.mu[i])?;
            }
        }
        Ok(g)
    }

    /// Dual coordinate ascent until the beliefs agree across every edge.
    /// Returns the per-region fields, sweeps used, and the final violation.
    fn inner(
        &mut self,
        neg_theta: &[Option<Table>],
    ) -> Result<(Vec<Option<Table>>, usize, f64)> {
        let nr = self.rg.regions.len();
        let mut g: Vec<Option<Table>> = vec![None; nr];
        for &r in &self.active {
            g[r] = Some(self.field(r, neg_theta)?);
        }
        let mut viol = f64::INFINITY;
        let mut sweeps = 0;
        for sweep in 1..=self.options.inner_iterations {
            sweeps = sweep;
            viol = 0.0;
            for i in 0..self.edges.len() {
                let Edge { r1, r2, shared } = self.edges[i];
                let (w1, w2) = (self.w[r1], self.w[r2]);
                let scope = &self.rg.regions[shared].scope;
                // fields with this edge's dual removed
                let mut g1 = g[r1].take().expect("active");
                g1.subtract(&self.mu[i])?;
                let mut g2 = g[r2].take().expect("active");
                g2.accumulate(&self.mu[i])?;
                let s1 = scaled_marginal(&g1, 1.0 / w1, scope)?;
                let s2 = scaled_marginal(&g2, 1.0 / w2, scope)?;
                // disagreement of the two normalized marginals under the
                // current dual
                let mut m1: Vec<f64> = s1
                    .data()
                    .iter()
                    .zip(self.mu[i].data())
                    .map(|(&s, &m)| s + m / w1)
                    .collect();
                let mut m2: Vec<f64> = s2
                    .data()
                    .iter()
                    .zip(self.mu[i].data())
                    .map(|(&s, &m)| s - m / w2)
                    .collect();
                log_normalize(&mut m1);
                log_normalize(&mut m2);
                for (a, b) in m1.iter().zip(&m2) {
                    let d = (a.exp() - b.exp()).abs();
                    if d.is_finite() && d > viol {
                        viol = d;
                    }
                }
                // closed-form update
                let c = w1 * w2 / (w1 + w2);
                let new_data: Vec<f64> = s1
                    .data()
                    .iter()
                    .zip(s2.data())
                    .zip(self.mu[i].data())
                    .map(|((&a, &b), &old)| {
                        let raw = if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
                            0.0
                        } else {
                            c * (b - a)
                        };
                        debug_assert!(
                            raw.is_finite(),
                            "one-sided empty support on an agreement edge"
                        );
                        let raw = if raw.is_finite() { raw } else { 0.0 };
                        self.options.damping * old + (1.0 - self.options.damping) * raw
                    })
                    .collect();
                let new_mu = Table::new(scope.clone(), self.rg.scope_cards(shared), new_data)?;
                g1.accumulate(&new_mu)?;
                g2.subtract(&new_mu)?;
                g[r1] = Some(g1);
                g[r2] = Some(g2);
                self.mu[i] = new_mu;
            }
            if viol < self.options.inner_tolerance {
                break;
            }
        }
        Ok((g, sweeps, viol))
    }

    fn readout(&mut self, g: &[Option<Table>]) -> Result<()> {
        for &r in &self.active {
            let mut t = g[r].as_ref().expect("active").clone();
            t.scale(1.0 / self.w[r]);
            t.normalize();
            self.beliefs[r] = t;
        }
        self.set_inactive_beliefs()
    }

    /// Run outer steps until the free energy stalls.
    pub fn run(&mut self) -> Result<CvmRun> {
        let mut prev = self.free_energy();
        let mut trace = Vec::new();
        let mut converged = false;
        let mut last_viol = f64::INFINITY;
        for _ in 0..self.options.max_outer {
            let neg_theta = self.build_neg_theta()?;
            let (g, _sweeps, viol) = self.inner(&neg_theta)?;
            self.readout(&g)?;
            last_viol = viol;
            let f = self.free_energy();
            trace.push(f);
            if (f - prev).abs() < self.options.outer_tolerance {
                converged = true;
                break;
            }
            prev = f;
        }
        let free_energy = *trace.last().unwrap_or(&prev);
        Ok(CvmRun {
            free_energy,
            outer_iterations: trace.len(),
            trace,
            converged,
            last_inner_violation: last_viol,
        })
    }

    /// Marginal of one variable, read from the smallest region containing it.
    pub fn var_marginal(&self, v: usize) -> Result<Vec<f64>> {
        let mut best: Option<usize> = None;
        for (r, region) in self.rg.regions.iter().enumerate() {
            if region.scope.binary_search(&v).is_ok()
                && best.is_none_or(|b| region.scope.len() < self.rg.regions[b].scope.len())
            {
                best = Some(r);
            }
        }
        let r = best.ok_or_else(|| Error::Domain(format!("variable {v} is in no region")))?;
        let mut m = self.beliefs[r].marginalize_lse(&[v])?;
        m.normalize();
        Ok(m.data().iter().map(|x| x.exp()).collect())
    }

    /// Largest disagreement between a parent's projected marginal and the
    /// child belief over the region poset; a convergence diagnostic.
    pub fn marginal_discrepancy(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (p, c) in self.rg.hasse_edges() {
            let mut proj = self.beliefs[p].marginalize_lse(&self.rg.regions[c].scope)?;
            proj.normalize();
            for (a, b) in proj.data().iter().zip(self.beliefs[c].data()) {
                let d = (a.exp() - b.exp()).abs();
                if d > worst {
                    worst = d;
                }
            }
        }
        Ok(worst)
    }
}

fn apply_mask(t: &mut Table, mask: &[bool]) {
    for (v, &ok) in t.data_mut().iter_mut().zip(mask) {
        if !ok {
            *v = f64::NEG_INFINITY;
        }
    }
}

fn scaled_marginal(g: &Table, inv_w: f64, scope: &[usize]) -> Result<Table> {
    let mut t = g.clone();
    t.scale(inv_w);
    t.marginalize_lse(scope)
}

/// Propagate support constraints over the region poset until projections of
/// the masks agree across every cover pair.
fn propagate_masks(rg: &RegionGraph) -> Result<Vec<Vec<bool>>> {
    let nr = rg.regions.len();
    let mut masks: Vec<Vec<bool>> = (0..nr)
        .map(|r| match &rg.regions[r].log_psi {
            Some(psi) => psi.data().iter().map(|&v| v != f64::NEG_INFINITY).collect(),
            None => vec![true; rg.scope_cards(r).iter().product()],
        })
        .collect();
    let edges = rg.hasse_edges();
    let as_table = |rg: &RegionGraph, r: usize, mask: &[bool]| -> Result<Table> {
        let data: Vec<f64> = mask
            .iter()
            .map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Table::new(rg.regions[r].scope.clone(), rg.scope_cards(r), data)
    };
    loop {
        let mut changed = false;
        for &(p, c) in &edges {
            let proj = as_table(rg, p, &masks[p])?.marginalize_lse(&rg.regions[c].scope)?;
            for (m, &v) in masks[c].iter_mut().zip(proj.data()) {
                if *m && v == f64::NEG_INFINITY {
                    *m = false;
                    changed = true;
                }
            }
            let lift = as_table(rg, c, &masks[c])?
                .lift_to(&rg.regions[p].scope, &rg.scope_cards(p))?;
            for (m, &v) in masks[p].iter_mut().zip(lift.data()) {
                if *m && v == f64::NEG_INFINITY {
                    *m = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for (r, mask) in masks.iter().enumerate() {
        if mask.iter().all(|&ok| !ok) {
            return Err(Error::Support(format!(
                "region {:?} has empty support after constraint propagation",
                rg.regions[r].scope
            )));
        }
    }
    Ok(masks)
}

/// Cluster variation free energy of a belief set: KL to the hosted potentials
/// on outer regions plus counting-number-weighted negative entropies on inner
/// regions. Beliefs must be normalized log tables indexed like `rg.regions`.
pub fn cvm_free_energy(rg: &RegionGraph, beliefs: &[Table]) -> f64 {
    let mut f = 0.0;
    for (r, region) in rg.regions.iter().enumerate() {
        match &region.log_psi {
            Some(psi) => {
                for (&lp, &lpsi) in beliefs[r].data().iter().zip(psi.data()) {
                    let p = lp.exp();
                    if p > 0.0 {
                        if lpsi == f64::NEG_INFINITY {
                            return f64::INFINITY;
                        }
                        f += p * (lp - lpsi);
                    }
                }
            }
            None => {
                let a = region.counting_number;
                if a != 0 {
                    let mut h = 0.0;
                    for &lp in beliefs[r].data() {
                        let p = lp.exp();
                        if p > 0.0 {
                            h += p * lp;
                        }
                    }
                    f += a as f64 * h;
                }
            }
        }
    }
    f
}

/// The convex majorant used by the outer loop: the convex part evaluated at
/// `eval` plus the tangent of the concave part taken at `at`. Touches the
/// free energy when `eval == at` and upper-bounds it everywhere else.
pub fn convex_bound(rg: &RegionGraph, eval: &[Table], at: &[Table]) -> f64 {
    let mut f = 0.0;
    for (r, region) in rg.regions.iter().enumerate() {
        match &region.log_psi {
            Some(psi) => {
                for (&lp, &lpsi) in eval[r].data().iter().zip(psi.data()) {
                    let p = lp.exp();
                    if p > 0.0 {
                        if lpsi == f64::NEG_INFINITY {
                            return f64::INFINITY;
                        }
                        f += p * (lp - lpsi);
                    }
                }
            }
            None => {
                let a = region.counting_number;
                if a > 0 {
                    for &lp in eval[r].data() {
                        let p = lp.exp();
                        if p > 0.0 {
                            f += a as f64 * p * lp;
                        }
                    }
                } else if a < 0 {
                    for (&lp, &lq) in eval[r].data().iter().zip(at[r].data()) {
                        let p = lp.exp();
                        if p > 0.0 {
                            if lq == f64::NEG_INFINITY {
                                return f64::INFINITY;
                            }
                            f += a as f64 * p * lq.max(LOG_BELIEF_FLOOR);
                        }
                    }
                }
            }
        }
    }
    f
}

/// Exact region marginals of the normalized factor-graph distribution,
/// computed by full enumeration. Meant for small test instances.
pub fn enumerate_region_marginals(
    fg: &crate::factored::FactorGraph,
    rg: &RegionGraph,
) -> Result<(f64, Vec<Table>)> {
    let cards = fg.cardinalities();
    let total: usize = cards.iter().product();
    if total == 0 || total > 4_000_000 {
        return Err(Error::Budget(format!(
            "enumeration over {total} assignments refused"
        )));
    }
    let mut log_weights = vec![f64::NEG_INFINITY; total];
    let mut assign = vec![0usize; cards.len()];
    for (idx, lw) in log_weights.iter_mut().enumerate() {
        let mut rem = idx;
        for i in (0..cards.len()).rev() {
            assign[i] = rem % cards[i];
            rem /= cards[i];
        }
        *lw = fg.log_weight(&assign);
    }
    let log_z = crate::logsumexp::logsumexp(&log_weights);
    if log_z == f64::NEG_INFINITY {
        return Err(Error::Support("factor graph has empty support".into()));
    }
    let mut marginals = Vec::with_capacity(rg.regions.len());
    for r in 0..rg.regions.len() {
        let scope = &rg.regions[r].scope;
        let rcards = rg.scope_cards(r);
        let len: usize = rcards.iter().product();
        let mut acc = vec![f64::NEG_INFINITY; len];
        for (idx, &lw) in log_weights.iter().enumerate() {
            if lw == f64::NEG_INFINITY {
                continue;
            }
            let mut rem = idx;
            for i in (0..cards.len()).rev() {
                assign[i] = rem % cards[i];
                rem /= cards[i];
            }
            let mut ridx = 0usize;
            for (&v, &c) in scope.iter().zip(&rcards) {
                ridx = ridx * c + assign[v];
            }
            acc[ridx] = log_add(acc[ridx], lw - log_z);
        }
        marginals.push(Table::new(scope.clone(), rcards, acc)?);
    }
    Ok((log_z, marginals))
}
