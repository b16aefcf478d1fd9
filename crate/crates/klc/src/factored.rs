//! Factored problem representation: vector-valued states whose uncontrolled
//! dynamics factorize over components, optionally coupled through shared
//! auxiliary selector variables, with sparse cost factors.
//!
//! Two bridges are provided. [`flatten`] grinds the factored instance into a
//! flat [`ChainProblem`] so the exact chain solvers and oracles apply;
//! [`export_factor_graph`] unrolls it over time into a bipartite factor graph
//! consumed by the variational engine.

use std::collections::{BTreeMap, HashMap};

use crate::chain::ChainProblem;
use crate::error::{Error, Result};
use crate::table::Table;

const ROW_SUM_TOL: f64 = 1e-12;

/// One state component.
#[derive(Debug, Clone)]
pub struct ComponentSpec {
    pub name: String,
    pub cardinality: usize,
    pub kernel: ComponentKernel,
}

/// Local dynamics of a component.
#[derive(Debug, Clone)]
pub enum ComponentKernel {
    /// Self-contained row-stochastic kernel(s): one shared table, or one per
    /// step. Row-major `card x card`.
    Independent(Vec<Vec<f64>>),
    /// Conditional table `p(next | selectors, prev)` referencing auxiliary
    /// variables by name. Layout row-major over
    /// `(sel_1, ..., sel_k, prev, next)`, last index fastest. Rows may sum to
    /// less than 1: jointly-illegal selector combinations lose their mass.
    Mixture {
        selectors: Vec<String>,
        table: Vec<f64>,
    },
}

/// A per-step auxiliary selector variable with its conditional distribution
/// given earlier-declared auxiliaries.
#[derive(Debug, Clone)]
pub struct AuxiliarySpec {
    pub name: String,
    pub cardinality: usize,
    /// Names of earlier-declared auxiliaries this one conditions on.
    pub parents: Vec<String>,
    /// Row-major over `(parents..., self)`; each row sums to 1.
    pub table: Vec<f64>,
}

/// Additive cost factor over a subset of components.
#[derive(Debug, Clone)]
pub struct CostFactor {
    pub scope: Vec<String>,
    /// Cost tables keyed by the time slices at which the factor applies;
    /// row-major over the scope in declaration order. `+inf` forbids.
    pub tables: BTreeMap<usize, Vec<f64>>,
}

impl CostFactor {
    /// The same table at every slice `0..=horizon`.
    pub fn every_slice(scope: Vec<String>, table: Vec<f64>, horizon: usize) -> Self {
        let tables = (0..=horizon).map(|t| (t, table.clone())).collect();
        CostFactor { scope, tables }
    }

    /// A single-slice factor.
    pub fn at_slice(scope: Vec<String>, slice: usize, table: Vec<f64>) -> Self {
        let mut tables = BTreeMap::new();
        tables.insert(slice, table);
        CostFactor { scope, tables }
    }
}

/// A validated factored KL-control instance.
#[derive(Debug, Clone)]
pub struct FactoredProblem {
    pub components: Vec<ComponentSpec>,
    pub auxiliaries: Vec<AuxiliarySpec>,
    pub factors: Vec<CostFactor>,
    pub horizon: usize,
    /// Known start assignment (one value per component). Required for
    /// factor-graph export with conditioning and for reachability-restricted
    /// flattening.
    pub initial_state: Option<Vec<usize>>,
}

/// Validate and assemble a factored problem.
pub fn assemble(
    components: Vec<ComponentSpec>,
    auxiliaries: Vec<AuxiliarySpec>,
    factors: Vec<CostFactor>,
    horizon: usize,
    initial_state: Option<Vec<usize>>,
) -> Result<FactoredProblem> {
    if components.is_empty() {
        return Err(Error::Domain("no components".into()));
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be positive".into()));
    }
    let mut names: HashMap<&str, usize> = HashMap::new();
    for c in &components {
        if c.cardinality == 0 {
            return Err(Error::Domain(format!("component {} has zero states", c.name)));
        }
        if names.insert(c.name.as_str(), c.cardinality).is_some() {
            return Err(Error::Domain(format!("duplicate name {}", c.name)));
        }
    }
    let mut aux_card: HashMap<&str, usize> = HashMap::new();
    for (i, a) in auxiliaries.iter().enumerate() {
        if names.contains_key(a.name.as_str()) || aux_card.contains_key(a.name.as_str()) {
            return Err(Error::Domain(format!("duplicate name {}", a.name)));
        }
        if a.cardinality == 0 {
            return Err(Error::Domain(format!("auxiliary {} has zero states", a.name)));
        }
        let mut rows = 1usize;
        for p in &a.parents {
            let pc = aux_card.get(p.as_str()).ok_or_else(|| {
                Error::Domain(format!(
                    "auxiliary {} conditions on {}, which is not declared before it",
                    a.name, p
                ))
            })?;
            rows *= pc;
        }
        if a.table.len() != rows * a.cardinality {
            return Err(Error::Shape(format!(
                "auxiliary {} table has {} entries, expected {}",
                a.name,
                a.table.len(),
                rows * a.cardinality
            )));
        }
        for r in 0..rows {
            let row = &a.table[r * a.cardinality..(r + 1) * a.cardinality];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| v.is_nan() || *v < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!(
                    "auxiliary {} row {} is not a distribution",
                    a.name, r
                )));
            }
        }
        let _ = i;
        aux_card.insert(a.name.as_str(), a.cardinality);
    }
    for c in &components {
        match &c.kernel {
            ComponentKernel::Independent(slices) => {
                if slices.is_empty() || (slices.len() != 1 && slices.len() != horizon) {
                    return Err(Error::Shape(format!(
                        "component {} needs 1 or {} kernel slices",
                        c.name, horizon
                    )));
                }
                for k in slices {
                    if k.len() != c.cardinality * c.cardinality {
                        return Err(Error::Shape(format!(
                            "component {} kernel has wrong size",
                            c.name
                        )));
                    }
                    for x in 0..c.cardinality {
                        let row = &k[x * c.cardinality..(x + 1) * c.cardinality];
                        let sum: f64 = row.iter().sum();
                        if row.iter().any(|v| v.is_nan() || *v < 0.0)
                            || (sum - 1.0).abs() > ROW_SUM_TOL
                        {
                            return Err(Error::Domain(format!(
                                "component {} kernel row {} is not a distribution",
                                c.name, x
                            )));
                        }
                    }
                }
            }
            ComponentKernel::Mixture { selectors, table } => {
                let mut rows = 1usize;
                for s in selectors {
                    let sc = aux_card.get(s.as_str()).ok_or_else(|| {
                        Error::Domain(format!(
                            "component {} selects on undeclared auxiliary {}",
                            c.name, s
                        ))
                    })?;
                    rows *= sc;
                }
                rows *= c.cardinality;
                if table.len() != rows * c.cardinality {
                    return Err(Error::Shape(format!(
                        "component {} mixture table has {} entries, expected {}",
                        c.name,
                        table.len(),
                        rows * c.cardinality
                    )));
                }
                for r in 0..rows {
                    let row = &table[r * c.cardinality..(r + 1) * c.cardinality];
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|v| v.is_nan() || *v < 0.0) || sum > 1.0 + ROW_SUM_TOL {
                        return Err(Error::Domain(format!(
                            "component {} mixture row {} is negative or oversums",
                            c.name, r
                        )));
                    }
                }
            }
        }
    }
    for f in &factors {
        let mut len = 1usize;
        for s in &f.scope {
            let sc = names.get(s.as_str()).ok_or_else(|| {
                Error::Domain(format!("cost factor names undeclared component {s}"))
            })?;
            len *= sc;
        }
        for (t, table) in &f.tables {
            if *t > horizon {
                return Err(Error::Domain(format!(
                    "cost factor slice {t} beyond horizon {horizon}"
                )));
            }
            if table.len() != len {
                return Err(Error::Shape(format!(
                    "cost factor over {:?} at slice {t} has {} entries, expected {len}",
                    f.scope,
                    table.len()
                )));
            }
            if table.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
                return Err(Error::Domain(format!(
                    "cost factor over {:?} has a NaN or -inf entry",
                    f.scope
                )));
            }
        }
    }
    if let Some(init) = &initial_state {
        if init.len() != components.len() {
            return Err(Error::Shape("initial state length mismatch".into()));
        }
        for (v, c) in init.iter().zip(&components) {
            if *v >= c.cardinality {
                return Err(Error::Domain(format!(
                    "initial value {} out of range for component {}",
                    v, c.name
                )));
            }
        }
    }
    Ok(FactoredProblem {
        components,
        auxiliaries,
        factors,
        horizon,
        initial_state,
    })
}

impl FactoredProblem {
    fn component_index(&self, name: &str) -> usize {
        self.components
            .iter()
            .position(|c| c.name == name)
            .expect("validated component name")
    }

    fn aux_index(&self, name: &str) -> usize {
        self.auxiliaries
            .iter()
            .position(|a| a.name == name)
            .expect("validated auxiliary name")
    }

    /// Total joint state count (product of component cardinalities),
    /// saturating on overflow.
    pub fn joint_state_count(&self) -> usize {
        self.components
            .iter()
            .fold(1usize, |acc, c| acc.saturating_mul(c.cardinality))
    }

    /// Enumerate auxiliary assignments with nonzero probability, in
    /// deterministic order; calls `f(assignment, weight)`.
    fn for_each_aux_assignment(&self, f: &mut dyn FnMut(&[usize], f64)) {
        let mut assign = vec![0usize; self.auxiliaries.len()];
        self.aux_recurse(0, 1.0, &mut assign, f);
    }

    fn aux_recurse(
        &self,
        depth: usize,
        weight: f64,
        assign: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize], f64),
    ) {
        if depth == self.auxiliaries.len() {
            f(assign, weight);
            return;
        }
        let a = &self.auxiliaries[depth];
        let mut row = 0usize;
        for p in &a.parents {
            let pi = self.aux_index(p);
            debug_assert!(pi < depth);
            row = row * self.auxiliaries[pi].cardinality + assign[pi];
        }
        for v in 0..a.cardinality {
            let w = a.table[row * a.cardinality + v];
            if w > 0.0 {
                assign[depth] = v;
                self.aux_recurse(depth + 1, weight * w, assign, f);
            }
        }
    }

    /// Per-component next-state row given the previous local value and an
    /// auxiliary assignment, at step `t` (1-based slice being entered).
    fn local_row<'a>(&'a self, comp: usize, prev: usize, aux: &[usize], t: usize) -> &'a [f64] {
        let c = &self.components[comp];
        match &c.kernel {
            ComponentKernel::Independent(slices) => {
                let k = if slices.len() == 1 { &slices[0] } else { &slices[t - 1] };
                &k[prev * c.cardinality..(prev + 1) * c.cardinality]
            }
            ComponentKernel::Mixture { selectors, table } => {
                let mut row = 0usize;
                for s in selectors {
                    let si = self.aux_index(s);
                    row = row * self.auxiliaries[si].cardinality + aux[si];
                }
                row = row * c.cardinality + prev;
                &table[row * c.cardinality..(row + 1) * c.cardinality]
            }
        }
    }

    fn any_per_step_kernel(&self) -> bool {
        self.components.iter().any(|c| match &c.kernel {
            ComponentKernel::Independent(slices) => slices.len() > 1,
            ComponentKernel::Mixture { .. } => false,
        })
    }

    /// Total cost of a joint assignment at slice `t`.
    pub fn cost_at(&self, assignment: &[usize], t: usize) -> f64 {
        let mut total = 0.0;
        for f in &self.factors {
            if let Some(table) = f.tables.get(&t) {
                let mut idx = 0usize;
                for s in &f.scope {
                    let ci = self.component_index(s);
                    idx = idx * self.components[ci].cardinality + assignment[ci];
                }
                let v = table[idx];
                if v == f64::INFINITY {
                    return f64::INFINITY;
                }
                total += v;
            }
        }
        total
    }
}

/// Bijection between (restricted) joint component assignments and flat state
/// indices. States are ordered mixed-radix by component declaration order
/// (first component most significant); when restricted to a reachable set,
/// the same order applies within the subset.
#[derive(Debug, Clone)]
pub struct IndexMap {
    cards: Vec<usize>,
    /// Sorted list of included assignments, or None for the full product.
    states: Option<Vec<Vec<usize>>>,
    lookup: Option<HashMap<Vec<usize>, usize>>,
}

impl IndexMap {
    pub fn num_states(&self) -> usize {
        match &self.states {
            Some(s) => s.len(),
            None => self.cards.iter().product(),
        }
    }

    /// Flat index of a joint assignment; errors when the assignment is
    /// outside the (restricted) state set.
    pub fn state_index(&self, assignment: &[usize]) -> Result<usize> {
        if assignment.len() != self.cards.len() {
            return Err(Error::Shape("assignment length mismatch".into()));
        }
        match &self.lookup {
            Some(map) => map
                .get(assignment)
                .copied()
                .ok_or_else(|| Error::Domain(format!("assignment {assignment:?} not in state set"))),
            None => {
                let mut idx = 0usize;
                for (v, c) in assignment.iter().zip(&self.cards) {
                    if v >= c {
                        return Err(Error::Domain("assignment value out of range".into()));
                    }
                    idx = idx * c + v;
                }
                Ok(idx)
            }
        }
    }

    /// Joint assignment for a flat index.
    pub fn assignment(&self, index: usize) -> Vec<usize> {
        match &self.states {
            Some(s) => s[index].clone(),
            None => {
                let mut rem = index;
                let mut out = vec![0usize; self.cards.len()];
                for i in (0..self.cards.len()).rev() {
                    out[i] = rem % self.cards[i];
                    rem /= self.cards[i];
                }
                out
            }
        }
    }
}

/// A factored problem ground down to a flat chain.
#[derive(Debug, Clone)]
pub struct FlattenedProblem {
    pub chain: ChainProblem,
    pub index_map: IndexMap,
}

pub const DEFAULT_FLATTEN_BUDGET: usize = 1_000_000;

/// Flatten to a [`ChainProblem`] by enumerating joint states and
/// marginalizing the auxiliary selectors out of the mixture dynamics:
/// `q(y|x) = sum_aux p(aux) prod_i q_i(y_i | x_i, aux)`. When the problem
/// carries an initial state, the state set is restricted to the assignments
/// reachable from it (the kernel support never leaves that closure).
pub fn flatten(problem: &FactoredProblem, budget: Option<usize>) -> Result<FlattenedProblem> {
    let budget = budget.unwrap_or(DEFAULT_FLATTEN_BUDGET);
    let full = problem.joint_state_count();
    if full > budget {
        return Err(Error::Budget(format!(
            "joint state count {full} exceeds flatten budget {budget}"
        )));
    }
    let cards: Vec<usize> = problem.components.iter().map(|c| c.cardinality).collect();
    let n_comp = cards.len();

    // state set: full product, or reachable closure from the initial state
    let index_map = match &problem.initial_state {
        None => IndexMap {
            cards: cards.clone(),
            states: None,
            lookup: None,
        },
        Some(init) => {
            let mut seen: HashMap<Vec<usize>, ()> = HashMap::new();
            let mut frontier = vec![init.clone()];
            seen.insert(init.clone(), ());
            while let Some(state) = frontier.pop() {
                let mut successors: Vec<Vec<usize>> = Vec::new();
                for t in 1..=problem.horizon.min(if problem.any_per_step_kernel() {
                    problem.horizon
                } else {
                    1
                }) {
                    problem.for_each_aux_assignment(&mut |aux, _w| {
                        let rows: Vec<&[f64]> = (0..n_comp)
                            .map(|i| problem.local_row(i, state[i], aux, t))
                            .collect();
                        let mut next = vec![0usize; n_comp];
                        product_support(&rows, &mut next, 0, &mut |assign| {
                            successors.push(assign.to_vec());
                        });
                    });
                }
                for s in successors {
                    if !seen.contains_key(&s) {
                        seen.insert(s.clone(), ());
                        frontier.push(s);
                    }
                }
            }
            let mut states: Vec<Vec<usize>> = seen.into_keys().collect();
            states.sort();
            let lookup = states
                .iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect();
            IndexMap {
                cards: cards.clone(),
                states: Some(states),
                lookup: Some(lookup),
            }
        }
    };

    let n = index_map.num_states();
    let steps = if problem.any_per_step_kernel() {
        problem.horizon
    } else {
        1
    };
    let mut kernels: Vec<Vec<f64>> = Vec::with_capacity(steps);
    for t in 1..=steps {
        let mut kernel = vec![0.0f64; n * n];
        for a in 0..n {
            let prev = index_map.assignment(a);
            problem.for_each_aux_assignment(&mut |aux, w| {
                let rows: Vec<&[f64]> = (0..n_comp)
                    .map(|i| problem.local_row(i, prev[i], aux, t))
                    .collect();
                let mut next = vec![0usize; n_comp];
                product_accumulate(&rows, &mut next, 0, w, &mut |assign, prob| {
                    let b = index_map
                        .state_index(assign)
                        .expect("closure covers all successors");
                    kernel[a * n + b] += prob;
                });
            });
        }
        kernels.push(kernel);
    }
    let kernels = if steps == problem.horizon {
        kernels
    } else {
        vec![kernels.pop().unwrap(); problem.horizon]
    };

    let mut state_cost = Vec::with_capacity(problem.horizon + 1);
    for t in 0..=problem.horizon {
        let mut slice = Vec::with_capacity(n);
        for s in 0..n {
            slice.push(problem.cost_at(&index_map.assignment(s), t));
        }
        state_cost.push(slice);
    }

    let chain = ChainProblem::new(n, problem.horizon, kernels, state_cost)?;
    Ok(FlattenedProblem { chain, index_map })
}

fn product_support(
    rows: &[&[f64]],
    assign: &mut Vec<usize>,
    depth: usize,
    f: &mut dyn FnMut(&[usize]),
) {
    if depth == rows.len() {
        f(assign);
        return;
    }
    for (v, &p) in rows[depth].iter().enumerate() {
        if p > 0.0 {
            assign[depth] = v;
            product_support(rows, assign, depth + 1, f);
        }
    }
}

fn product_accumulate(
    rows: &[&[f64]],
    assign: &mut Vec<usize>,
    depth: usize,
    weight: f64,
    f: &mut dyn FnMut(&[usize], f64),
) {
    if depth == rows.len() {
        f(assign, weight);
        return;
    }
    for (v, &p) in rows[depth].iter().enumerate() {
        if p > 0.0 {
            assign[depth] = v;
            product_accumulate(rows, assign, depth + 1, weight * p, f);
        }
    }
}

/// A variable of the exported, time-unrolled factor graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FgVariable {
    /// Base name: component or auxiliary name.
    pub base: String,
    /// Time slice the instance belongs to.
    pub slice: usize,
    pub cardinality: usize,
}

/// A potential of the exported graph, stored in log space over its sorted
/// variable-id scope.
#[derive(Debug, Clone)]
pub struct FgFactor {
    pub name: String,
    pub table: Table,
}

/// Time-unrolled bipartite factor graph; the product of all factor tables
/// over a full assignment equals the unnormalized optimal trajectory weight
/// (free dynamics times exponentiated negative costs), excluding the constant
/// start-slice cost when the start state is conditioned out.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    pub variables: Vec<FgVariable>,
    pub factors: Vec<FgFactor>,
}

impl FactorGraph {
    pub fn var_id(&self, base: &str, slice: usize) -> Option<usize> {
        self.variables
            .iter()
            .position(|v| v.base == base && v.slice == slice)
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.variables.iter().map(|v| v.cardinality).collect()
    }

    /// Log of the product of every factor on a full assignment.
    pub fn log_weight(&self, assignment: &[usize]) -> f64 {
        let mut total = 0.0;
        for f in &self.factors {
            let digits: Vec<usize> = f
                .table
                .vars()
                .iter()
                .map(|&v| assignment[v])
                .collect();
            let v = f.table.get(&digits);
            if v == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            total += v;
        }
        total
    }
}

/// Unroll a factored problem into a factor graph over slices `1..=T` (when an
/// initial state is present, slice-0 variables are substituted away) or
/// `0..=T` (when it is not, the start state appears as free conditioning
/// variables with no prior factor).
pub fn export_factor_graph(problem: &FactoredProblem) -> Result<FactorGraph> {
    let conditioned = problem.initial_state.is_some();
    let t_start = if conditioned { 1 } else { 0 };
    let mut variables = Vec::new();
    let mut var_ids: HashMap<(String, usize), usize> = HashMap::new();
    for t in t_start..=problem.horizon {
        if t >= 1 {
            for a in &problem.auxiliaries {
                var_ids.insert((a.name.clone(), t), variables.len());
                variables.push(FgVariable {
                    base: a.name.clone(),
                    slice: t,
                    cardinality: a.cardinality,
                });
            }
        }
        for c in &problem.components {
            var_ids.insert((c.name.clone(), t), variables.len());
            variables.push(FgVariable {
                base: c.name.clone(),
                slice: t,
                cardinality: c.cardinality,
            });
        }
    }
    let vid = |base: &str, t: usize| -> usize { var_ids[&(base.to_string(), t)] };

    let mut factors: Vec<FgFactor> = Vec::new();
    let mut push_factor = |name: String, scope: Vec<usize>, cards: Vec<usize>, f: &mut dyn FnMut(&[usize]) -> f64| -> Result<()> {
        // build in given scope order, then reorder to the sorted convention
        let mut order: Vec<usize> = (0..scope.len()).collect();
        order.sort_by_key(|&i| scope[i]);
        let sorted_scope: Vec<usize> = order.iter().map(|&i| scope[i]).collect();
        let sorted_cards: Vec<usize> = order.iter().map(|&i| cards[i]).collect();
        let len: usize = cards.iter().product();
        let mut data = vec![0.0f64; len];
        let shell = Table::new(sorted_scope.clone(), sorted_cards.clone(), vec![0.0; len])?;
        let mut digits_sorted = vec![0usize; scope.len()];
        let mut digits_orig = vec![0usize; scope.len()];
        for (idx, slot) in data.iter_mut().enumerate() {
            let d = shell.digits(idx);
            digits_sorted.copy_from_slice(&d);
            for (i, &oi) in order.iter().enumerate() {
                digits_orig[oi] = digits_sorted[i];
            }
            *slot = f(&digits_orig);
        }
        factors.push(FgFactor {
            name,
            table: Table::new(sorted_scope, sorted_cards, data)?,
        });
        Ok(())
    };

    for t in 1..=problem.horizon {
        // auxiliary priors/conditionals
        for a in &problem.auxiliaries {
            let mut scope = vec![];
            let mut cards = vec![];
            for p in &a.parents {
                scope.push(vid(p, t));
                cards.push(problem.auxiliaries[problem.aux_index(p)].cardinality);
            }
            scope.push(vid(&a.name, t));
            cards.push(a.cardinality);
            let table = a.table.clone();
            let ac = a.cardinality;
            let parent_cards: Vec<usize> = cards[..cards.len() - 1].to_vec();
            push_factor(
                format!("q({}[{t}])", a.name),
                scope,
                cards,
                &mut |digits: &[usize]| {
                    let mut row = 0usize;
                    for (d, c) in digits[..digits.len() - 1].iter().zip(&parent_cards) {
                        row = row * c + d;
                    }
                    let v = table[row * ac + digits[digits.len() - 1]];
                    if v > 0.0 {
                        v.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                },
            )?;
        }
        // component transitions
        for (ci, c) in problem.components.iter().enumerate() {
            let prev_fixed = if t == 1 && conditioned {
                Some(problem.initial_state.as_ref().unwrap()[ci])
            } else {
                None
            };
            match &c.kernel {
                ComponentKernel::Independent(slices) => {
                    let k = if slices.len() == 1 { &slices[0] } else { &slices[t - 1] };
                    let card = c.cardinality;
                    if let Some(prev) = prev_fixed {
                        let row: Vec<f64> = k[prev * card..(prev + 1) * card].to_vec();
                        push_factor(
                            format!("q({}[{t}])", c.name),
                            vec![vid(&c.name, t)],
                            vec![card],
                            &mut |digits: &[usize]| {
                                let v = row[digits[0]];
                                if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }
                            },
                        )?;
                    } else {
                        let k = k.clone();
                        push_factor(
                            format!("q({}[{t}])", c.name),
                            vec![vid(&c.name, t - 1), vid(&c.name, t)],
                            vec![card, card],
                            &mut |digits: &[usize]| {
                                let v = k[digits[0] * card + digits[1]];
                                if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }
                            },
                        )?;
                    }
                }
                ComponentKernel::Mixture { selectors, table } => {
                    let card = c.cardinality;
                    let sel_cards: Vec<usize> = selectors
                        .iter()
                        .map(|s| problem.auxiliaries[problem.aux_index(s)].cardinality)
                        .collect();
                    let table = table.clone();
                    let mut scope: Vec<usize> =
                        selectors.iter().map(|s| vid(s, t)).collect();
                    let mut cards = sel_cards.clone();
                    if prev_fixed.is_none() {
                        scope.push(vid(&c.name, t - 1));
                        cards.push(card);
                    }
                    scope.push(vid(&c.name, t));
                    cards.push(card);
                    let nsel = selectors.len();
                    push_factor(
                        format!("q({}[{t}])", c.name),
                        scope,
                        cards,
                        &mut |digits: &[usize]| {
                            let mut row = 0usize;
                            for (d, sc) in digits[..nsel].iter().zip(&sel_cards) {
                                row = row * sc + d;
                            }
                            let prev = match prev_fixed {
                                Some(p) => p,
                                None => digits[nsel],
                            };
                            let next = digits[digits.len() - 1];
                            row = row * card + prev;
                            let v = table[row * card + next];
                            if v > 0.0 { v.ln() } else { f64::NEG_INFINITY }
                        },
                    )?;
                }
            }
        }
        // cost factors at slice t (cost at slice 0 is a conditioned constant)
        for (fi, f) in problem.factors.iter().enumerate() {
            if let Some(table) = f.tables.get(&t) {
                let scope: Vec<usize> = f.scope.iter().map(|s| vid(s, t)).collect();
                let cards: Vec<usize> = f
                    .scope
                    .iter()
                    .map(|s| problem.components[problem.component_index(s)].cardinality)
                    .collect();
                let table = table.clone();
                let cards_cl = cards.clone();
                push_factor(
                    format!("cost{fi}[{t}]"),
                    scope,
                    cards,
                    &mut |digits: &[usize]| {
                        let mut idx = 0usize;
                        for (d, c) in digits.iter().zip(&cards_cl) {
                            idx = idx * c + d;
                        }
                        -table[idx]
                    },
                )?;
            }
        }
    }
    // unconditioned start: cost factors at slice 0 attach to the free x^0 vars
    if !conditioned {
        for (fi, f) in problem.factors.iter().enumerate() {
            if let Some(table) = f.tables.get(&0) {
                let scope: Vec<usize> = f.scope.iter().map(|s| vid(s, 0)).collect();
                let cards: Vec<usize> = f
                    .scope
                    .iter()
                    .map(|s| problem.components[problem.component_index(s)].cardinality)
                    .collect();
                let table = table.clone();
                let cards_cl = cards.clone();
                push_factor(
                    format!("cost{fi}[0]"),
                    scope,
                    cards,
                    &mut |digits: &[usize]| {
                        let mut idx = 0usize;
                        for (d, c) in digits.iter().zip(&cards_cl) {
                            idx = idx * c + d;
                        }
                        -table[idx]
                    },
                )?;
            }
        }
    }
    Ok(FactorGraph { variables, factors })
}

/// Serialize a factor graph to the documented plain-text format: variables
/// with base name, slice, cardinality; factors with scope ids and row-major
/// probability tables (linear domain, shortest round-trip floats).
pub fn factor_graph_to_text(fg: &FactorGraph) -> String {
    let mut out = String::new();
    out.push_str("factor-graph v1\n");
    out.push_str(&format!("vars {}\n", fg.variables.len()));
    for (i, v) in fg.variables.iter().enumerate() {
        out.push_str(&format!("var {} {} {} {}\n", i, v.base, v.slice, v.cardinality));
    }
    out.push_str(&format!("factors {}\n", fg.factors.len()));
    for f in &fg.factors {
        let scope: Vec<String> = f.table.vars().iter().map(|v| v.to_string()).collect();
        out.push_str(&format!("factor {} scope {}\n", f.name, scope.join(" ")));
        let values: Vec<String> = f
            .table
            .data()
            .iter()
            .map(|v| {
                if *v == f64::NEG_INFINITY {
                    "0".to_string()
                } else {
                    format!("{:e}", v.exp())
                }
            })
            .collect();
        out.push_str(&format!("table {}\n", values.join(" ")));
    }
    out
}

/// Parse the text format written by [`factor_graph_to_text`].
pub fn factor_graph_from_text(text: &str) -> Result<FactorGraph> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty input".into()))?;
    if header.trim() != "factor-graph v1" {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let nvars: usize = expect_prefix(lines.next(), "vars")?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad vars count: {e}")))?;
    let mut variables = Vec::with_capacity(nvars);
    for _ in 0..nvars {
        let line = expect_prefix(lines.next(), "var")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::Parse(format!("bad var line {line:?}")));
        }
        let id: usize = parts[0]
            .parse()
            .map_err(|e| Error::Parse(format!("bad var id: {e}")))?;
        if id != variables.len() {
            return Err(Error::Parse("variable ids must be consecutive".into()));
        }
        variables.push(FgVariable {
            base: parts[1].to_string(),
            slice: parts[2]
                .parse()
                .map_err(|e| Error::Parse(format!("bad slice: {e}")))?,
            cardinality: parts[3]
                .parse()
                .map_err(|e| Error::Parse(format!("bad cardinality: {e}")))?,
        });
    }
    let nfactors: usize = expect_prefix(lines.next(), "factors")?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("bad factors count: {e}")))?;
    let mut factors = Vec::with_capacity(nfactors);
    for _ in 0..nfactors {
        let line = expect_prefix(lines.next(), "factor")?;
        let (name, scope_part) = line
            .split_once(" scope ")
            .ok_or_else(|| Error::Parse(format!("bad factor line {line:?}")))?;
        let scope: Vec<usize> = scope_part
            .split_whitespace()
            .map(|s| s.parse().map_err(|e| Error::Parse(format!("bad scope id: {e}"))))
            .collect::<Result<_>>()?;
        let cards: Vec<usize> = scope
            .iter()
            .map(|&v| {
                variables
                    .get(v)
                    .map(|fv| fv.cardinality)
                    .ok_or_else(|| Error::Parse(format!("scope id {v} out of range")))
            })
            .collect::<Result<_>>()?;
        let tline = expect_prefix(lines.next(), "table")?;
        let data: Vec<f64> = tline
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad table value: {e}")))
                    .and_then(|p| {
                        if p < 0.0 || p.is_nan() {
                            Err(Error::Parse("negative probability".into()))
                        } else if p == 0.0 {
                            Ok(f64::NEG_INFINITY)
                        } else {
                            Ok(p.ln())
                        }
                    })
            })
            .collect::<Result<_>>()?;
        factors.push(FgFactor {
            name: name.trim().to_string(),
            table: Table::new(scope, cards, data)?,
        });
    }
    Ok(FactorGraph { variables, factors })
}

fn expect_prefix<'a>(line: Option<&'a str>, prefix: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::Parse("unexpected end of input".into()))?;
    line.trim()
        .strip_prefix(prefix)
        .map(|rest| rest.trim_start())
        .ok_or_else(|| Error::Parse(format!("expected {prefix:?} line, got {line:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain;

    fn two_independent() -> FactoredProblem {
        let k1 = vec![0.7, 0.3, 0.4, 0.6];
        let k2 = vec![0.9, 0.1, 0.2, 0.8];
        assemble(
            vec![
                ComponentSpec {
                    name: "a".into(),
                    cardinality: 2,
                    kernel: ComponentKernel::Independent(vec![k1]),
                },
                ComponentSpec {
                    name: "b".into(),
                    cardinality: 2,
                    kernel: ComponentKernel::Independent(vec![k2]),
                },
            ],
            vec![],
            vec![],
            2,
            None,
        )
        .unwrap()
    }

    #[test]
    fn independent_components_tensor_product() {
        let p = two_independent();
        let flat = flatten(&p, None).unwrap();
        assert_eq!(flat.chain.num_states(), 4);
        let k1 = [0.7, 0.3, 0.4, 0.6];
        let k2 = [0.9, 0.1, 0.2, 0.8];
        for a in 0..2 {
            for b in 0..2 {
                let x = flat.index_map.state_index(&[a, b]).unwrap();
                for a2 in 0..2 {
                    for b2 in 0..2 {
                        let y = flat.index_map.state_index(&[a2, b2]).unwrap();
                        let expect = k1[a * 2 + a2] * k2[b * 2 + b2];
                        assert!((flat.chain.q(0, x, y) - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_cost_flat_z_is_one() {
        let p = two_independent();
        let flat = flatten(&p, None).unwrap();
        let ms = chain::backward_pass(&chain::build_potentials(&flat.chain));
        for x in 0..4 {
            assert!(ms.log_z(x).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn index_map_roundtrip() {
        let p = two_independent();
        let flat = flatten(&p, None).unwrap();
        for i in 0..flat.index_map.num_states() {
            let a = flat.index_map.assignment(i);
            assert_eq!(flat.index_map.state_index(&a).unwrap(), i);
        }
    }

    #[test]
    fn undeclared_scope_rejected() {
        let mut p = two_independent();
        let r = assemble(
            p.components.clone(),
            vec![],
            vec![CostFactor::every_slice(
                vec!["zzz".into()],
                vec![0.0, 0.0],
                2,
            )],
            2,
            None,
        );
        assert!(r.is_err());
        p.factors.clear();
    }

    #[test]
    fn mixture_with_selector_flattens_to_mixture_kernel() {
        // one component, one uniform binary selector choosing between two
        // deterministic maps
        let aux = AuxiliarySpec {
            name: "s".into(),
            cardinality: 2,
            parents: vec![],
            table: vec![0.5, 0.5],
        };
        // table over (s, prev, next): s=0 stay, s=1 swap
        let table = vec![
            1.0, 0.0, // s=0, prev=0
            0.0, 1.0, // s=0, prev=1
            0.0, 1.0, // s=1, prev=0
            1.0, 0.0, // s=1, prev=1
        ];
        let p = assemble(
            vec![ComponentSpec {
                name: "x".into(),
                cardinality: 2,
                kernel: ComponentKernel::Mixture {
                    selectors: vec!["s".into()],
                    table,
                },
            }],
            vec![aux],
            vec![],
            3,
            None,
        )
        .unwrap();
        let flat = flatten(&p, None).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((flat.chain.q(0, x, y) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn export_unconditioned_chain_shape() {
        let k = vec![0.7, 0.3, 0.4, 0.6];
        let p = assemble(
            vec![ComponentSpec {
                name: "x".into(),
                cardinality: 2,
                kernel: ComponentKernel::Independent(vec![k]),
            }],
            vec![],
            vec![CostFactor::every_slice(vec!["x".into()], vec![0.0, 0.1], 2)],
            2,
            None,
        )
        .unwrap();
        let fg = export_factor_graph(&p).unwrap();
        assert_eq!(fg.variables.len(), 3); // x[0], x[1], x[2]
        let pairwise = fg
            .factors
            .iter()
            .filter(|f| f.table.vars().len() == 2)
            .count();
        assert_eq!(pairwise, 2);
        let unary = fg
            .factors
            .iter()
            .filter(|f| f.table.vars().len() == 1)
            .count();
        assert_eq!(unary, 3); // one cost factor per slice
    }

    #[test]
    fn export_product_matches_flat_weight() {
        // product of factor tables along a full assignment must equal
        // q * exp(-costs), path-wise
        let k = vec![0.6, 0.4, 0.25, 0.75];
        let costs = vec![0.3, 0.9];
        let p = assemble(
            vec![ComponentSpec {
                name: "x".into(),
                cardinality: 2,
                kernel: ComponentKernel::Independent(vec![k.clone()]),
            }],
            vec![],
            vec![CostFactor::every_slice(vec!["x".into()], costs.clone(), 2)],
            2,
            Some(vec![0]),
        )
        .unwrap();
        let fg = export_factor_graph(&p).unwrap();
        assert_eq!(fg.variables.len(), 2); // x[1], x[2] with x[0] conditioned
        for x1 in 0..2 {
            for x2 in 0..2 {
                let got = fg.log_weight(&[x1, x2]).exp();
                let expect =
                    k[x1] * k[x1 * 2 + x2] * (-costs[x1]).exp() * (-costs[x2]).exp();
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn export_marginalizing_selectors_recovers_flat_kernel() {
        let aux = AuxiliarySpec {
            name: "s".into(),
            cardinality: 2,
            parents: vec![],
            table: vec![0.25, 0.75],
        };
        let table = vec![
            0.9, 0.1, // s=0, prev=0
            0.5, 0.5, // s=0, prev=1
            0.2, 0.8, // s=1, prev=0
            0.3, 0.7, // s=1, prev=1
        ];
        let p = assemble(
            vec![ComponentSpec {
                name: "x".into(),
                cardinality: 2,
                kernel: ComponentKernel::Mixture {
                    selectors: vec!["s".into()],
                    table: table.clone(),
                },
            }],
            vec![aux],
            vec![],
            1,
            Some(vec![1]),
        )
        .unwrap();
        let flat = flatten(&p, None).unwrap();
        let fg = export_factor_graph(&p).unwrap();
        // sum over the selector of the factor product = flat kernel row of prev=1
        let s_id = fg.var_id("s", 1).unwrap();
        let x_id = fg.var_id("x", 1).unwrap();
        for next in 0..2 {
            let mut total = 0.0;
            for s in 0..2 {
                let mut assign = vec![0; 2];
                assign[s_id] = s;
                assign[x_id] = next;
                total += fg.log_weight(&assign).exp();
            }
            let prev_flat = flat.index_map.state_index(&[1]).unwrap();
            let next_flat = flat.index_map.state_index(&[next]).unwrap();
            assert!((total - flat.chain.q(0, prev_flat, next_flat)).abs() < 1e-12);
        }
    }

    #[test]
    fn text_roundtrip() {
        let p = two_independent();
        let fg = export_factor_graph(&p).unwrap();
        let text = factor_graph_to_text(&fg);
        let fg2 = factor_graph_from_text(&text).unwrap();
        assert_eq!(fg.variables, fg2.variables);
        assert_eq!(fg.factors.len(), fg2.factors.len());
        for (a, b) in fg.factors.iter().zip(&fg2.factors) {
            assert_eq!(a.table.vars(), b.table.vars());
            for (x, y) in a.table.data().iter().zip(b.table.data()) {
                if *x == f64::NEG_INFINITY {
                    assert_eq!(*y, f64::NEG_INFINITY);
                } else {
                    assert!((x - y).abs() < 1e-14);
                }
            }
        }
    }
}
