//! Model definitions: finite type spaces, offspring events with
//! density-dependent polynomial rates, capacity guards, sampling weights,
//! and the state-space enumeration used by the exact solvers.
//!
//! A model describes a population of at most `K` individuals. Each individual
//! carries a type from a finite type space; an individual of type `x` is
//! replaced by an offspring vector `k` (so many children of each type) at a
//! rate that depends on the normalized population composition. Rates are
//! polynomials in the normalized composition, so they are Lipschitz on the
//! simplex box and cover mass-action, logistic and contact-type terms.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard default cap on the enumerated state-space size.
pub const DEFAULT_STATE_CAP: usize = 500_000;

/// Resolution of the numeric validation grid over the simplex box.
const VALIDATION_GRID: u32 = 8;
/// Validate on exact count points as long as the composition lattice is small.
const VALIDATION_LATTICE_CAP: usize = 20_000;

/// Index of a type in a [`TypeSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeId(pub usize);

/// Ordered, finite set of type names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeSpace {
    names: Vec<String>,
}

impl TypeSpace {
    pub fn new(names: Vec<String>) -> Result<Self, ModelError> {
        if names.is_empty() {
            return Err(ModelError::Schema("type space is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(ModelError::Schema("empty type name".into()));
            }
            if names[..i].contains(n) {
                return Err(ModelError::Schema(format!("duplicate type name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// Number of types (`D`).
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one type
    }

    pub fn name(&self, x: TypeId) -> &str {
        &self.names[x.0]
    }

    pub fn id(&self, name: &str) -> Option<TypeId> {
        self.names.iter().position(|n| n == name).map(TypeId)
    }

    pub fn iter(&self) -> impl Iterator<Item = TypeId> + '_ {
        (0..self.names.len()).map(TypeId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Polynomial in the normalized composition coordinates.
///
/// Terms map a multi-index (one exponent per type coordinate) to a real
/// coefficient. Coefficients may be negative; validation only requires the
/// *value* to be nonnegative over the simplex box.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePolynomial {
    terms: BTreeMap<Vec<u8>, f64>,
    dim: usize,
}

impl RatePolynomial {
    pub fn new(dim: usize, terms: impl IntoIterator<Item = (Vec<u8>, f64)>) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for (pow, coef) in terms {
            if pow.len() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    got: pow.len(),
                });
            }
            if !coef.is_finite() {
                return Err(ModelError::Schema("non-finite polynomial coefficient".into()));
            }
            *map.entry(pow).or_insert(0.0) += coef;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self { terms: map, dim })
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self::new(dim, [(vec![0u8; dim], value)]).expect("constant polynomial")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|p| p.iter().map(|&e| u32::from(e)).sum())
            .max()
            .unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (&[u8], f64)> {
        self.terms.iter().map(|(p, c)| (p.as_slice(), *c))
    }

    /// Evaluate at a point of the simplex box (normalized coordinates).
    pub fn eval(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim);
        let mut acc = 0.0;
        for (pow, coef) in &self.terms {
            let mut term = *coef;
            for (zi, &e) in z.iter().zip(pow.iter()) {
                for _ in 0..e {
                    term *= zi;
                }
            }
            acc += term;
        }
        acc
    }

    /// Upper bound of the absolute value over the simplex box (`|z_i| <= 1`).
    pub fn sup_bound(&self) -> f64 {
        self.terms.values().map(|c| c.abs()).sum()
    }

    /// Bound on `|∂/∂z_w|` over the simplex box.
    pub fn partial_bound(&self, w: usize) -> f64 {
        self.terms
            .iter()
            .map(|(p, c)| c.abs() * f64::from(p[w]))
            .sum()
    }
}

/// Per-type sampling weight `psi`; defaults to the constant 1.
#[derive(Debug, Clone, PartialEq)]
pub enum PsiWeight {
    One,
    PerType(Vec<RatePolynomial>),
}

impl PsiWeight {
    pub fn is_one(&self) -> bool {
        matches!(self, PsiWeight::One)
    }

    /// Evaluate at a normalized composition.
    pub fn eval(&self, x: TypeId, z: &[f64]) -> f64 {
        match self {
            PsiWeight::One => 1.0,
            PsiWeight::PerType(polys) => polys[x.0].eval(z),
        }
    }
}

/// One replacement channel: an individual of type `parent` is replaced by
/// the offspring vector at the polynomial rate.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringEvent {
    pub parent: TypeId,
    pub offspring: Vec<u32>,
    pub rate: RatePolynomial,
}

impl OffspringEvent {
    /// `||k||_1`, the number of children produced.
    pub fn offspring_total(&self) -> u32 {
        self.offspring.iter().sum()
    }
}

/// How the capacity bound is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardMode {
    /// Rates are multiplied by the indicator that the jump stays within
    /// capacity. Makes the bound structural.
    Capacity,
    /// No guard; validation must confirm rates already vanish on
    /// capacity-violating jumps.
    None,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("unknown type {0:?}")]
    UnknownType(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate event (parent {parent}, offspring {offspring:?})")]
    DuplicateEvent { parent: String, offspring: Vec<u32> },
    #[error("negative rate: event (parent {parent}, offspring {offspring:?}) evaluates to {value} at {at:?}")]
    NegativeRate {
        parent: String,
        offspring: Vec<u32>,
        value: f64,
        at: Vec<f64>,
    },
    #[error("capacity guard violated: event (parent {parent}, offspring {offspring:?}) has rate {value} at counts {at:?} but the jump exceeds K")]
    GuardViolated {
        parent: String,
        offspring: Vec<u32>,
        value: f64,
        at: Vec<u32>,
    },
    #[error("psi is not strictly positive at type {ty} and {at:?}")]
    PsiNotPositive { ty: String, at: Vec<f64> },
    #[error("state-space cap exceeded: |S_K| > {cap}")]
    StateCapExceeded { cap: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// A validated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    types: TypeSpace,
    events: Vec<OffspringEvent>,
    capacity: u32,
    psi: PsiWeight,
    guard: GuardMode,
    /// Preset name + parameters, kept for rendering.
    preset: Option<(String, Vec<(String, f64)>)>,
}

impl ModelSpec {
    pub fn new(
        types: TypeSpace,
        events: Vec<OffspringEvent>,
        capacity: u32,
        psi: PsiWeight,
        guard: GuardMode,
    ) -> Result<Self, ModelError> {
        let model = Self {
            types,
            events,
            capacity,
            psi,
            guard,
            preset: None,
        };
        model.validate()?;
        Ok(model)
    }

    fn with_preset(mut self, name: &str, params: Vec<(String, f64)>) -> Self {
        self.preset = Some((name.to_string(), params));
        self
    }

    pub fn types(&self) -> &TypeSpace {
        &self.types
    }

    pub fn dim(&self) -> usize {
        self.types.len()
    }

    pub fn events(&self) -> &[OffspringEvent] {
        &self.events
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn psi(&self) -> &PsiWeight {
        &self.psi
    }

    pub fn guard(&self) -> GuardMode {
        self.guard
    }

    /// Events whose parent is `x`.
    pub fn events_of(&self, x: TypeId) -> impl Iterator<Item = &OffspringEvent> {
        self.events.iter().filter(move |e| e.parent == x)
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.capacity == 0 {
            return Err(ModelError::Schema("capacity K must be >= 1".into()));
        }
        let dim = self.dim();
        for ev in &self.events {
            if ev.offspring.len() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    got: ev.offspring.len(),
                });
            }
            if ev.rate.dim() != dim {
                return Err(ModelError::DimensionMismatch {
                    expected: dim,
                    got: ev.rate.dim(),
                });
            }
        }
        // (parent, offspring) pairs are unique
        for (i, ev) in self.events.iter().enumerate() {
            for other in &self.events[..i] {
                if other.parent == ev.parent && other.offspring == ev.offspring {
                    return Err(ModelError::DuplicateEvent {
                        parent: self.types.name(ev.parent).to_string(),
                        offspring: ev.offspring.clone(),
                    });
                }
            }
        }
        // rates nonnegative on the validation grid, modulo rounding fuzz on
        // boundary zeros
        for point in self.validation_grid() {
            for ev in &self.events {
                let v = ev.rate.eval(&point);
                if v < -1e-9 * ev.rate.sup_bound().max(1.0) {
                    return Err(ModelError::NegativeRate {
                        parent: self.types.name(ev.parent).to_string(),
                        offspring: ev.offspring.clone(),
                        value: v,
                        at: point,
                    });
                }
            }
            if let PsiWeight::PerType(polys) = &self.psi {
                for x in self.types.iter() {
                    if point[x.0] > 0.0 && polys[x.0].eval(&point) <= 0.0 {
                        return Err(ModelError::PsiNotPositive {
                            ty: self.types.name(x).to_string(),
                            at: point,
                        });
                    }
                }
            }
        }
        // boundedness: without a guard, rates must vanish on jumps that leave Z_K
        if self.guard == GuardMode::None {
            let mut violation = None;
            for_each_composition(dim, self.capacity, &mut |z| {
                if violation.is_some() {
                    return;
                }
                let zn = normalize(z, self.capacity);
                for ev in &self.events {
                    if z[ev.parent.0] == 0 {
                        continue;
                    }
                    if !jump_within_capacity(z, &ev.offspring, self.capacity) {
                        let v = ev.rate.eval(&zn);
                        if v != 0.0 {
                            violation = Some(ModelError::GuardViolated {
                                parent: self.types.name(ev.parent).to_string(),
                                offspring: ev.offspring.clone(),
                                value: v,
                                at: z.to_vec(),
                            });
                            return;
                        }
                    }
                }
            });
            if let Some(e) = violation {
                return Err(e);
            }
        }
        Ok(())
    }

    /// Points used for numeric sign checks: a uniform mesh over the simplex
    /// box plus, when small enough, every normalized count composition.
    fn validation_grid(&self) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut pts = Vec::new();
        let mut mesh = vec![0u32; dim];
        loop {
            if mesh.iter().sum::<u32>() <= VALIDATION_GRID {
                pts.push(mesh.iter().map(|&m| f64::from(m) / f64::from(VALIDATION_GRID)).collect());
            }
            if !increment_mesh(&mut mesh, VALIDATION_GRID) {
                break;
            }
        }
        if composition_count(dim, self.capacity).is_some_and(|n| n <= VALIDATION_LATTICE_CAP) {
            for_each_composition(dim, self.capacity, &mut |z| {
                pts.push(normalize(z, self.capacity));
            });
        }
        pts
    }

    /// Rate of the event `(x, k)` at a count composition, with the capacity
    /// guard applied. Zero when the event is absent.
    pub fn eval_rate_counts(&self, x: TypeId, k: &[u32], z: &[u32]) -> Result<f64, ModelError> {
        self.check_dims(k.len())?;
        self.check_dims(z.len())?;
        match self
            .events
            .iter()
            .find(|e| e.parent == x && e.offspring == k)
        {
            Some(ev) => Ok(self.event_rate_counts(ev, z)),
            None => Ok(0.0),
        }
    }

    /// Rate of the event `(x, k)` at a normalized composition (limit use).
    pub fn eval_rate_limit(&self, x: TypeId, k: &[u32], z: &[f64]) -> Result<f64, ModelError> {
        self.check_dims(k.len())?;
        self.check_dims(z.len())?;
        match self
            .events
            .iter()
            .find(|e| e.parent == x && e.offspring == k)
        {
            Some(ev) => Ok(self.event_rate_limit(ev, z)),
            None => Ok(0.0),
        }
    }

    fn check_dims(&self, got: usize) -> Result<(), ModelError> {
        if got != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got,
            });
        }
        Ok(())
    }

    /// Guarded rate of a known event at a count composition.
    pub fn event_rate_counts(&self, ev: &OffspringEvent, z: &[u32]) -> f64 {
        if self.guard == GuardMode::Capacity
            && !jump_within_capacity(z, &ev.offspring, self.capacity)
        {
            return 0.0;
        }
        let zn = normalize(z, self.capacity);
        ev.rate.eval(&zn).max(0.0)
    }

    /// Rate of a known event at a normalized composition, no guard.
    pub fn event_rate_limit(&self, ev: &OffspringEvent, z: &[f64]) -> f64 {
        ev.rate.eval(z).max(0.0)
    }

    /// Total per-individual rate `tau(x, z)` at a count composition.
    pub fn total_rate_counts(&self, x: TypeId, z: &[u32]) -> f64 {
        self.events_of(x).map(|ev| self.event_rate_counts(ev, z)).sum()
    }

    /// `psi(x, z)` at a count composition.
    pub fn psi_counts(&self, x: TypeId, z: &[u32]) -> f64 {
        match &self.psi {
            PsiWeight::One => 1.0,
            PsiWeight::PerType(polys) => polys[x.0].eval(&normalize(z, self.capacity)),
        }
    }

    /// Branching intensity `lambda(x, z) = sum_k (||k||_1 - 1) tau_k(x, z)`
    /// at a normalized composition.
    pub fn branching_intensity(&self, x: TypeId, z: &[f64]) -> f64 {
        self.events_of(x)
            .map(|ev| (f64::from(ev.offspring_total()) - 1.0) * self.event_rate_limit(ev, z))
            .sum()
    }

    /// Drift matrix `A(z)` with entries
    /// `A[x][y] = sum_k (k_y - 1{x=y}) tau_k(x, z)`, row-major.
    pub fn drift_matrix(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut a = vec![0.0; d * d];
        for ev in &self.events {
            let rate = self.event_rate_limit(ev, z);
            if rate == 0.0 {
                continue;
            }
            let x = ev.parent.0;
            for y in 0..d {
                let mut coef = f64::from(ev.offspring[y]);
                if x == y {
                    coef -= 1.0;
                }
                a[x * d + y] += coef * rate;
            }
        }
        a
    }

    /// Velocity field of the limit flow, `(z A(z))_y`.
    pub fn flow_velocity(&self, z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for ev in &self.events {
            let zx = z[ev.parent.0];
            if zx == 0.0 {
                continue;
            }
            let rate = zx * self.event_rate_limit(ev, z);
            if rate == 0.0 {
                continue;
            }
            for (y, o) in out.iter_mut().enumerate() {
                let mut coef = f64::from(ev.offspring[y]);
                if ev.parent.0 == y {
                    coef -= 1.0;
                }
                *o += coef * rate;
            }
        }
    }

    /// Conservative l1-Lipschitz bound for `z -> z A(z)` over the simplex box.
    pub fn flow_lipschitz_constant(&self) -> f64 {
        let d = self.dim();
        let mut total = 0.0;
        for y in 0..d {
            let mut worst = 0.0f64;
            for w in 0..d {
                let mut bound = 0.0;
                for ev in &self.events {
                    let mut coef = f64::from(ev.offspring[y]);
                    if ev.parent.0 == y {
                        coef -= 1.0;
                    }
                    if coef == 0.0 {
                        continue;
                    }
                    let value_part = if ev.parent.0 == w { ev.rate.sup_bound() } else { 0.0 };
                    bound += coef.abs() * (value_part + ev.rate.partial_bound(w));
                }
                worst = worst.max(bound);
            }
            total += worst;
        }
        total
    }

    pub fn render(&self) -> String {
        render_model(self)
    }

    /// Stable content digest used to identify models in reports (FNV-1a).
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.render().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// `||z + k - e(x)||_1 <= K` in count coordinates (callers ensure an
/// individual of the parent type is present, so the norm is
/// `||z||_1 + ||k||_1 - 1`).
pub fn jump_within_capacity(z: &[u32], k: &[u32], capacity: u32) -> bool {
    let total: u64 = z.iter().map(|&v| u64::from(v)).sum::<u64>()
        + k.iter().map(|&v| u64::from(v)).sum::<u64>();
    total.saturating_sub(1) <= u64::from(capacity)
}

/// Count coordinates divided by `K`.
pub fn normalize(z: &[u32], capacity: u32) -> Vec<f64> {
    z.iter().map(|&v| f64::from(v) / f64::from(capacity)).collect()
}

/// Apply `z + k - e(x)`; `None` if no individual of type `x` is present.
pub fn apply_jump(z: &[u32], k: &[u32], parent: TypeId) -> Option<Vec<u32>> {
    if z[parent.0] == 0 {
        return None;
    }
    let mut out = z.to_vec();
    out[parent.0] -= 1;
    for (o, &ki) in out.iter_mut().zip(k.iter()) {
        *o += ki;
    }
    Some(out)
}

fn increment_mesh(mesh: &mut [u32], max: u32) -> bool {
    for m in mesh.iter_mut() {
        if *m < max {
            *m += 1;
            return true;
        }
        *m = 0;
    }
    false
}

/// Number of compositions with `||z||_1 <= K` (i.e. `C(K + D, D)`), or `None`
/// on overflow.
pub fn composition_count(dim: usize, capacity: u32) -> Option<usize> {
    let mut acc: u128 = 1;
    for i in 1..=dim as u128 {
        acc = acc.checked_mul(u128::from(capacity) + i)?;
        acc /= i;
        if acc > usize::MAX as u128 {
            return None;
        }
    }
    usize::try_from(acc).ok()
}

/// Visit every composition `z` in `Z_K` (including the empty one).
pub fn for_each_composition(dim: usize, capacity: u32, f: &mut impl FnMut(&[u32])) {
    let mut z = vec![0u32; dim];
    fn rec(z: &mut Vec<u32>, i: usize, left: u32, f: &mut impl FnMut(&[u32])) {
        if i + 1 == z.len() {
            for v in 0..=left {
                z[i] = v;
                f(z);
            }
            z[i] = 0;
            return;
        }
        for v in 0..=left {
            z[i] = v;
            rec(z, i + 1, left - v, f);
        }
        z[i] = 0;
    }
    rec(&mut z, 0, capacity, f);
}

/// A state of the population-with-distinguished-individual process.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct State {
    pub x: TypeId,
    pub z: Vec<u32>,
}

/// Dense enumeration of the live part of the state space: states `(x, z)`
/// with `z_x >= 1`, `||z||_1 <= K`, minus states with no transition in or
/// out (isolated states never interact with the dynamics; dropping them
/// keeps the generator matched to the reachable system, e.g. the 4-state
/// two-particle example).
#[derive(Debug, Clone)]
pub struct StateIndex {
    states: Vec<State>,
    map: HashMap<State, usize>,
    capacity: u32,
}

impl StateIndex {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &State {
        &self.states[i]
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn index_of(&self, x: TypeId, z: &[u32]) -> Option<usize> {
        self.map.get(&State { x, z: z.to_vec() }).copied()
    }
}

impl ModelSpec {
    /// Enumerate the live state space with the default cap.
    pub fn enumerate_states(&self) -> Result<StateIndex, ModelError> {
        self.enumerate_states_capped(DEFAULT_STATE_CAP)
    }

    pub fn enumerate_states_capped(&self, cap: usize) -> Result<StateIndex, ModelError> {
        let full = self.enumerate_states_full(cap)?;
        // Keep states that have at least one transition in or out.
        let mut live = vec![false; full.len()];
        for (i, st) in full.states.iter().enumerate() {
            for w in self.types.iter() {
                let mult = st.z[w.0] - u32::from(w == st.x);
                let any_actor = st.z[w.0] >= 1; // spine (w == x) or bystander
                if !any_actor {
                    continue;
                }
                for ev in self.events_of(w) {
                    if self.event_rate_counts(ev, &st.z) <= 0.0 {
                        continue;
                    }
                    let Some(z2) = apply_jump(&st.z, &ev.offspring, w) else {
                        continue;
                    };
                    if w == st.x {
                        // distinguished individual reproduces: it may continue
                        // as any offspring type
                        for y in self.types.iter() {
                            if ev.offspring[y.0] >= 1 {
                                live[i] = true;
                                if let Some(j) = full.index_of(y, &z2) {
                                    live[j] = true;
                                }
                            }
                        }
                        // bystanders of the same type
                        if mult >= 1 {
                            live[i] = true;
                            if let Some(j) = full.index_of(st.x, &z2) {
                                live[j] = true;
                            }
                        }
                    } else {
                        live[i] = true;
                        if let Some(j) = full.index_of(st.x, &z2) {
                            live[j] = true;
                        }
                    }
                }
            }
        }
        let states: Vec<State> = full
            .states
            .into_iter()
            .zip(live)
            .filter_map(|(s, l)| l.then_some(s))
            .collect();
        let map = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(StateIndex {
            states,
            map,
            capacity: self.capacity,
        })
    }

    /// Full `S_K` enumeration (lexicographic in `(x, z)`), isolated states
    /// included. Used by validation sweeps and tests.
    pub fn enumerate_states_full(&self, cap: usize) -> Result<StateIndex, ModelError> {
        let dim = self.dim();
        let comp_bound = composition_count(dim, self.capacity)
            .ok_or(ModelError::StateCapExceeded { cap })?;
        if comp_bound.saturating_mul(dim) > cap.saturating_mul(4) {
            // quick reject before materializing anything
            return Err(ModelError::StateCapExceeded { cap });
        }
        let mut states = Vec::new();
        for x in self.types.iter() {
            for_each_composition(dim, self.capacity, &mut |z| {
                if z[x.0] >= 1 {
                    states.push(State { x, z: z.to_vec() });
                }
            });
        }
        states.sort_by(|a, b| (a.x, &a.z).cmp(&(b.x, &b.z)));
        if states.len() > cap {
            return Err(ModelError::StateCapExceeded { cap });
        }
        let map = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(StateIndex {
            states,
            map,
            capacity: self.capacity,
        })
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

fn positive(name: &str, v: f64) -> Result<f64, ModelError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(ModelError::Parameter(format!("{name} must be > 0, got {v}")));
    }
    Ok(v)
}

/// Two-particle, two-type model: a lone `A` splits at rate `b`; with two
/// `A`s each dies at rate `b` or switches to `B` at rate `c`; a `B` switches
/// back to `A` at rate `c`. Capacity is 2.
///
/// Encoded as guarded polynomials in the normalized composition: the
/// "crowded" channels carry the factor `(2 z_A - 1)^2` so they only fire at
/// `z_A = 1` (counts `(2,0)`), and the `B -> A` switch carries `2 z_A` so it
/// only fires when an `A` is present.
pub fn preset_toy(b: f64, c: f64) -> Result<ModelSpec, ModelError> {
    positive("b", b)?;
    positive("c", c)?;
    let types = TypeSpace::new(vec!["A".into(), "B".into()])?;
    let crowded = |scale: f64| {
        RatePolynomial::new(
            2,
            [
                (vec![0, 0], scale),
                (vec![1, 0], -4.0 * scale),
                (vec![2, 0], 4.0 * scale),
            ],
        )
    };
    let events = vec![
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![2, 0],
            rate: RatePolynomial::constant(2, b),
        },
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![0, 0],
            rate: crowded(b)?,
        },
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![0, 1],
            rate: crowded(c)?,
        },
        OffspringEvent {
            parent: TypeId(1),
            offspring: vec![1, 0],
            rate: RatePolynomial::new(2, [(vec![1, 0], 2.0 * c)])?,
        },
    ];
    Ok(
        ModelSpec::new(types, events, 2, PsiWeight::One, GuardMode::Capacity)?
            .with_preset("toy", vec![("b".into(), b), ("c".into(), c)]),
    )
}

/// Pure type change between two types at constant rates (`||k||_1 = 1`
/// everywhere): `A -> B` at rate `a`, `B -> A` at rate `b`.
pub fn preset_switch2(a: f64, b: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    positive("a", a)?;
    positive("b", b)?;
    let types = TypeSpace::new(vec!["A".into(), "B".into()])?;
    let events = vec![
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![0, 1],
            rate: RatePolynomial::constant(2, a),
        },
        OffspringEvent {
            parent: TypeId(1),
            offspring: vec![1, 0],
            rate: RatePolynomial::constant(2, b),
        },
    ];
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?
            .with_preset("switch2", vec![("a".into(), a), ("b".into(), b)]),
    )
}

/// Density-dependent pure type change: `A -> B` at rate `a (1 + z_B)`,
/// `B -> A` at rate `b (1 + z_A)`.
pub fn preset_switch2_density(a: f64, b: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    positive("a", a)?;
    positive("b", b)?;
    let types = TypeSpace::new(vec!["A".into(), "B".into()])?;
    let events = vec![
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![0, 1],
            rate: RatePolynomial::new(2, [(vec![0, 0], a), (vec![0, 1], a)])?,
        },
        OffspringEvent {
            parent: TypeId(1),
            offspring: vec![1, 0],
            rate: RatePolynomial::new(2, [(vec![0, 0], b), (vec![1, 0], b)])?,
        },
    ];
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?
            .with_preset("switch2-density", vec![("a".into(), a), ("b".into(), b)]),
    )
}

/// Single-type logistic model: birth at rate `b (1 - z)`, death at rate `d`.
/// The limit flow converges to `1 - d/b` when `b > d`.
pub fn preset_logistic(b: f64, d: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    positive("b", b)?;
    positive("d", d)?;
    let types = TypeSpace::new(vec!["X".into()])?;
    let events = vec![
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![2],
            rate: RatePolynomial::new(1, [(vec![0], b), (vec![1], -b)])?,
        },
        OffspringEvent {
            parent: TypeId(0),
            offspring: vec![0],
            rate: RatePolynomial::constant(1, d),
        },
    ];
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?
            .with_preset("logistic", vec![("b".into(), b), ("d".into(), d)]),
    )
}

/// Two-type logistic model with switching: type `x` splits at rate
/// `b_x (1 - ||z||_1)`, dies at rate `d`, switches to the other type at
/// rate `g`.
pub fn preset_logistic2(b1: f64, b2: f64, d: f64, g: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    positive("b1", b1)?;
    positive("b2", b2)?;
    positive("d", d)?;
    positive("g", g)?;
    let types = TypeSpace::new(vec!["A".into(), "B".into()])?;
    let logistic = |scale: f64| {
        RatePolynomial::new(
            2,
            [
                (vec![0, 0], scale),
                (vec![1, 0], -scale),
                (vec![0, 1], -scale),
            ],
        )
    };
    let mut events = Vec::new();
    for (x, bx) in [(0usize, b1), (1usize, b2)] {
        let mut twin = vec![0u32; 2];
        twin[x] = 2;
        let mut swap = vec![0u32; 2];
        swap[1 - x] = 1;
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: twin,
            rate: logistic(bx)?,
        });
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: vec![0, 0],
            rate: RatePolynomial::constant(2, d),
        });
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: swap,
            rate: RatePolynomial::constant(2, g),
        });
    }
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?.with_preset(
            "logistic2",
            vec![
                ("b1".into(), b1),
                ("b2".into(), b2),
                ("d".into(), d),
                ("g".into(), g),
            ],
        ),
    )
}

/// Three-type cyclic model: type `i` splits at rate `b_i (1 - ||z||_1)`,
/// dies at rate `d`, and mutates to the next type in the cycle at rate `g`.
pub fn preset_cycle3(b: [f64; 3], d: f64, g: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    for (i, bi) in b.iter().enumerate() {
        positive(&format!("b{}", i + 1), *bi)?;
    }
    positive("d", d)?;
    positive("g", g)?;
    let types = TypeSpace::new(vec!["a".into(), "b".into(), "c".into()])?;
    let mut events = Vec::new();
    for x in 0..3usize {
        let logistic = RatePolynomial::new(
            3,
            [
                (vec![0, 0, 0], b[x]),
                (vec![1, 0, 0], -b[x]),
                (vec![0, 1, 0], -b[x]),
                (vec![0, 0, 1], -b[x]),
            ],
        )?;
        let mut twin = vec![0u32; 3];
        twin[x] = 2;
        let mut next = vec![0u32; 3];
        next[(x + 1) % 3] = 1;
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: twin,
            rate: logistic,
        });
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: vec![0, 0, 0],
            rate: RatePolynomial::constant(3, d),
        });
        events.push(OffspringEvent {
            parent: TypeId(x),
            offspring: next,
            rate: RatePolynomial::constant(3, g),
        });
    }
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?.with_preset(
            "cycle3",
            vec![
                ("b1".into(), b[0]),
                ("b2".into(), b[1]),
                ("b3".into(), b[2]),
                ("d".into(), d),
                ("g".into(), g),
            ],
        ),
    )
}

/// Single-type pure-birth model at constant rate `beta` (capacity-guarded at
/// finite K; in the limit it is only meaningful at the empty-flow fixed
/// point `z = 0`).
pub fn preset_yule(beta: f64, capacity: u32) -> Result<ModelSpec, ModelError> {
    positive("beta", beta)?;
    let types = TypeSpace::new(vec!["X".into()])?;
    let events = vec![OffspringEvent {
        parent: TypeId(0),
        offspring: vec![2],
        rate: RatePolynomial::constant(1, beta),
    }];
    Ok(
        ModelSpec::new(types, events, capacity, PsiWeight::One, GuardMode::Capacity)?
            .with_preset("yule", vec![("beta".into(), beta)]),
    )
}

/// Instantiate a named preset.
pub fn preset_by_name(
    name: &str,
    params: &BTreeMap<String, f64>,
    capacity: Option<u32>,
) -> Result<ModelSpec, ModelError> {
    let get = |key: &str| -> Result<f64, ModelError> {
        params
            .get(key)
            .copied()
            .ok_or_else(|| ModelError::Parameter(format!("preset {name:?} needs parameter {key:?}")))
    };
    let cap = |default: Option<u32>| -> Result<u32, ModelError> {
        capacity.or(default).ok_or_else(|| {
            ModelError::Parameter(format!("preset {name:?} needs a capacity K"))
        })
    };
    match name {
        "toy" => {
            if let Some(k) = capacity {
                if k != 2 {
                    return Err(ModelError::Parameter("toy preset has K = 2".into()));
                }
            }
            preset_toy(get("b")?, get("c")?)
        }
        "switch2" => preset_switch2(get("a")?, get("b")?, cap(None)?),
        "switch2-density" => preset_switch2_density(get("a")?, get("b")?, cap(None)?),
        "logistic" => preset_logistic(get("b")?, get("d")?, cap(None)?),
        "logistic2" => preset_logistic2(get("b1")?, get("b2")?, get("d")?, get("g")?, cap(None)?),
        "cycle3" => preset_cycle3([get("b1")?, get("b2")?, get("b3")?], get("d")?, get("g")?, cap(None)?),
        "yule" => preset_yule(get("beta")?, cap(None)?),
        _ => Err(ModelError::Parameter(format!("unknown preset {name:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Model files ("spinal-model v1")
// ---------------------------------------------------------------------------

pub const MODEL_HEADER: &str = "# spinal-model v1";

#[derive(Debug, Serialize, Deserialize)]
struct PolyTermFile {
    pow: Vec<u8>,
    coef: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EventFile {
    parent: String,
    offspring: Vec<u32>,
    rate: Vec<PolyTermFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    #[serde(default)]
    preset: Option<String>,
    #[serde(default)]
    params: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    types: Option<Vec<String>>,
    #[serde(default, rename = "K")]
    capacity: Option<u32>,
    #[serde(default)]
    guard: Option<String>,
    #[serde(default)]
    event: Vec<EventFile>,
    #[serde(default)]
    psi: Option<BTreeMap<String, Vec<PolyTermFile>>>,
}

/// Parse a `spinal-model v1` file into a validated model.
pub fn parse_model(text: &str) -> Result<ModelSpec, ModelError> {
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or_default()
        .trim();
    if first != MODEL_HEADER {
        return Err(ModelError::Schema(format!(
            "missing header line {MODEL_HEADER:?} (found {first:?})"
        )));
    }
    let file: ModelFile =
        toml::from_str(text).map_err(|e| ModelError::Schema(e.to_string()))?;

    if let Some(preset) = &file.preset {
        let params = file.params.unwrap_or_default();
        return preset_by_name(preset, &params, file.capacity);
    }

    let types = TypeSpace::new(
        file.types
            .ok_or_else(|| ModelError::Schema("missing `types`".into()))?,
    )?;
    let capacity = file
        .capacity
        .ok_or_else(|| ModelError::Schema("missing `K`".into()))?;
    let guard = match file.guard.as_deref() {
        None | Some("capacity") => GuardMode::Capacity,
        Some("none") => GuardMode::None,
        Some(other) => {
            return Err(ModelError::Schema(format!(
                "guard must be \"capacity\" or \"none\", got {other:?}"
            )))
        }
    };
    let dim = types.len();
    let mut events = Vec::new();
    for ev in file.event {
        let parent = types
            .id(&ev.parent)
            .ok_or_else(|| ModelError::UnknownType(ev.parent.clone()))?;
        let rate = RatePolynomial::new(dim, ev.rate.into_iter().map(|t| (t.pow, t.coef)))?;
        events.push(OffspringEvent {
            parent,
            offspring: ev.offspring,
            rate,
        });
    }
    let psi = match file.psi {
        None => PsiWeight::One,
        Some(map) => {
            let mut polys = vec![RatePolynomial::constant(dim, 1.0); dim];
            for (name, terms) in map {
                let x = types
                    .id(&name)
                    .ok_or_else(|| ModelError::UnknownType(name.clone()))?;
                polys[x.0] =
                    RatePolynomial::new(dim, terms.into_iter().map(|t| (t.pow, t.coef)))?;
            }
            PsiWeight::PerType(polys)
        }
    };
    ModelSpec::new(types, events, capacity, psi, guard)
}

/// Render a model back to `spinal-model v1` text. `parse_model(render(m))`
/// yields an equal model.
pub fn render_model(model: &ModelSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_HEADER}");
    out.push('\n');
    if let Some((name, params)) = &model.preset {
        let _ = writeln!(out, "preset = {name:?}");
        if name != "toy" {
            let _ = writeln!(out, "K = {}", model.capacity);
        }
        let _ = writeln!(out, "\n[params]");
        for (k, v) in params {
            let _ = writeln!(out, "{k} = {v:?}");
        }
        return out;
    }
    let names: Vec<String> = model.types.names().iter().map(|n| format!("{n:?}")).collect();
    let _ = writeln!(out, "types = [{}]", names.join(", "));
    let _ = writeln!(out, "K = {}", model.capacity);
    if model.guard == GuardMode::None {
        let _ = writeln!(out, "guard = \"none\"");
    }
    let fmt_terms = |poly: &RatePolynomial| -> String {
        poly.terms()
            .map(|(pow, coef)| format!("{{ pow = {pow:?}, coef = {coef:?} }}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    for ev in &model.events {
        out.push('\n');
        let _ = writeln!(out, "[[event]]");
        let _ = writeln!(out, "parent = {:?}", model.types.name(ev.parent));
        let _ = writeln!(out, "offspring = {:?}", ev.offspring);
        let _ = writeln!(out, "rate = [{}]", fmt_terms(&ev.rate));
    }
    if let PsiWeight::PerType(polys) = &model.psi {
        out.push('\n');
        let _ = writeln!(out, "[psi]");
        for (x, poly) in model.types.iter().zip(polys.iter()) {
            let _ = writeln!(out, "{:?} = [{}]", model.types.name(x), fmt_terms(poly));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_preset_matches_published_rates() {
        let m = preset_toy(1.0, 2.0).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.events().len(), 4);
        let a = m.types().id("A").unwrap();
        let b = m.types().id("B").unwrap();
        // four reproduction rates of the two-particle example
        assert_eq!(m.eval_rate_counts(a, &[2, 0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(m.eval_rate_counts(a, &[0, 0], &[2, 0]).unwrap(), 1.0);
        assert_eq!(m.eval_rate_counts(a, &[0, 1], &[2, 0]).unwrap(), 2.0);
        assert_eq!(m.eval_rate_counts(b, &[1, 0], &[1, 1]).unwrap(), 2.0);
        // crowded channels are silent in the singleton states
        assert_eq!(m.eval_rate_counts(a, &[0, 0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(m.eval_rate_counts(a, &[0, 1], &[1, 1]).unwrap(), 0.0);
        // capacity forbids growth past K = 2
        assert_eq!(m.eval_rate_counts(a, &[2, 0], &[2, 0]).unwrap(), 0.0);
        // absent event
        assert_eq!(m.eval_rate_counts(b, &[0, 1], &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn polynomial_eval_is_exact_for_small_integers() {
        // z_A * (1 - z_A - z_B) at (0.5, 0.25)
        let p = RatePolynomial::new(
            2,
            [(vec![1, 0], 1.0), (vec![2, 0], -1.0), (vec![1, 1], -1.0)],
        )
        .unwrap();
        assert_eq!(p.eval(&[0.5, 0.25]), 0.125);
        // integer coefficients at dyadic points stay exact
        let q = RatePolynomial::new(2, [(vec![2, 0], 4.0), (vec![1, 0], -4.0), (vec![0, 0], 1.0)]).unwrap();
        assert_eq!(q.eval(&[0.5, 0.0]), 0.0);
        assert_eq!(q.eval(&[1.0, 0.0]), 1.0);
    }

    #[test]
    fn toy_enumeration_matches_four_state_example() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let idx = m.enumerate_states().unwrap();
        assert_eq!(idx.len(), 4);
        let a = TypeId(0);
        let b = TypeId(1);
        assert!(idx.index_of(a, &[1, 0]).is_some());
        assert!(idx.index_of(a, &[2, 0]).is_some());
        assert!(idx.index_of(a, &[1, 1]).is_some());
        assert!(idx.index_of(b, &[1, 1]).is_some());
        // lexicographic in (x, z)
        let ordered: Vec<_> = idx.states().iter().map(|s| (s.x, s.z.clone())).collect();
        let mut sorted = ordered.clone();
        sorted.sort();
        assert_eq!(ordered, sorted);
    }

    #[test]
    fn full_enumeration_counts_s_k() {
        // one type, K = 1: only (X, [1])
        let m = preset_logistic(2.0, 1.0, 1).unwrap();
        let idx = m.enumerate_states_full(1000).unwrap();
        assert_eq!(idx.len(), 1);

        // brute-force oracle at K = 3, D = 2
        let m = preset_switch2(1.0, 1.0, 3).unwrap();
        let idx = m.enumerate_states_full(1000).unwrap();
        let mut expected = 0usize;
        for za in 0..=3u32 {
            for zb in 0..=3u32 {
                if za + zb > 3 || za + zb == 0 {
                    continue;
                }
                expected += usize::from(za >= 1) + usize::from(zb >= 1);
            }
        }
        assert_eq!(idx.len(), expected);
    }

    #[test]
    fn enumeration_is_a_bijection() {
        let m = preset_cycle3([2.0, 1.5, 1.0], 0.5, 0.25, 6).unwrap();
        let idx = m.enumerate_states().unwrap();
        for i in 0..idx.len() {
            let st = idx.state(i);
            assert_eq!(idx.index_of(st.x, &st.z), Some(i));
        }
    }

    #[test]
    fn guard_invariant_over_full_state_space() {
        for m in [
            preset_toy(1.0, 2.0).unwrap(),
            preset_logistic2(2.0, 1.0, 0.5, 0.3, 5).unwrap(),
        ] {
            let idx = m.enumerate_states_full(100_000).unwrap();
            for st in idx.states() {
                for ev in m.events() {
                    if !jump_within_capacity(&st.z, &ev.offspring, m.capacity()) {
                        assert_eq!(m.event_rate_counts(ev, &st.z), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn state_cap_is_enforced() {
        let m = preset_logistic(2.0, 1.0, 100).unwrap();
        match m.enumerate_states_capped(10) {
            Err(ModelError::StateCapExceeded { .. }) => {}
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_bad_files() {
        assert!(matches!(
            parse_model("types = [\"A\"]\nK = 1\n"),
            Err(ModelError::Schema(_))
        ));
        let negative = r#"# spinal-model v1
types = ["A"]
K = 2

[[event]]
parent = "A"
offspring = [2]
rate = [{ pow = [0], coef = -0.5 }]
"#;
        assert!(matches!(
            parse_model(negative),
            Err(ModelError::NegativeRate { .. })
        ));
        let unguarded = r#"# spinal-model v1
types = ["A"]
K = 2
guard = "none"

[[event]]
parent = "A"
offspring = [3]
rate = [{ pow = [0], coef = 1.0 }]
"#;
        assert!(matches!(
            parse_model(unguarded),
            Err(ModelError::GuardViolated { .. })
        ));
    }

    #[test]
    fn parse_preset_file() {
        let text = "# spinal-model v1\npreset = \"toy\"\n\n[params]\nb = 1.0\nc = 2.0\n";
        let m = parse_model(text).unwrap();
        assert_eq!(m, preset_toy(1.0, 2.0).unwrap());
    }

    #[test]
    fn render_round_trips() {
        for m in [
            preset_toy(1.0, 2.0).unwrap(),
            preset_logistic(2.0, 1.0, 50).unwrap(),
            preset_cycle3([2.0, 1.5, 1.0], 0.5, 0.25, 20).unwrap(),
        ] {
            let rendered = m.render();
            let back = parse_model(&rendered).unwrap();
            assert_eq!(m, back, "round trip failed for:\n{rendered}");
        }
    }
}
