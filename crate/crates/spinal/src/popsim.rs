//! Exact (direct-method) stochastic simulation of the finite-capacity
//! population process with a full genealogical record.
//!
//! Individuals live in an append-only arena; a replacement event sets the
//! victim's death time and appends its children contiguously, so each node
//! stores its children as a range and Ulam-Harris labels can be materialized
//! on demand. The composition path is recorded at every jump.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::model::{ModelSpec, TypeId};
use crate::path::{segment_index, CompTrack, TypeTrack};
use crate::rng::{replica_rng, stream};

#[derive(Debug, Error)]
pub enum PopsimError {
    #[error("initial composition {0:?} is empty or exceeds capacity")]
    BadInit(Vec<u32>),
    #[error("no individual of type index {0} in the initial composition")]
    MissingDesignatedType(usize),
    #[error("individual is not alive at the requested time")]
    NotAlive,
    #[error("unknown label {0:?}")]
    UnknownLabel(Vec<u32>),
}

/// Arena handle of an individual.
pub type Handle = u32;

const NO_PARENT: Handle = Handle::MAX;

#[derive(Debug, Clone)]
pub struct Individual {
    pub type_of: TypeId,
    pub birth: f64,
    /// `f64::INFINITY` while alive.
    pub death: f64,
    parent: Handle,
    /// 1-based rank among siblings; for roots, the root number.
    child_rank: u32,
    /// Children handles are contiguous: `[kids_start, kids_start + kids_len)`.
    kids_start: Handle,
    kids_len: u32,
}

impl Individual {
    pub fn is_alive(&self) -> bool {
        self.death.is_infinite()
    }

    pub fn parent(&self) -> Option<Handle> {
        (self.parent != NO_PARENT).then_some(self.parent)
    }
}

/// Append-only genealogy.
#[derive(Debug, Clone)]
pub struct GenealogyForest {
    arena: Vec<Individual>,
    n_roots: u32,
}

impl GenealogyForest {
    pub fn len(&self) -> usize {
        self.arena.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arena.is_empty()
    }

    pub fn get(&self, h: Handle) -> &Individual {
        &self.arena[h as usize]
    }

    pub fn roots(&self) -> impl Iterator<Item = Handle> + '_ {
        0..self.n_roots
    }

    pub fn children(&self, h: Handle) -> impl Iterator<Item = Handle> + '_ {
        let ind = self.get(h);
        ind.kids_start..ind.kids_start + ind.kids_len
    }

    /// Ulam-Harris label: root number followed by child ranks.
    pub fn label(&self, h: Handle) -> Vec<u32> {
        let mut rev = Vec::new();
        let mut cur = h;
        loop {
            let ind = self.get(cur);
            rev.push(ind.child_rank);
            match ind.parent() {
                Some(p) => cur = p,
                None => break,
            }
        }
        rev.reverse();
        rev
    }

    pub fn find_by_label(&self, label: &[u32]) -> Option<Handle> {
        let mut cur = self
            .roots()
            .find(|&r| self.get(r).child_rank == *label.first()?)?;
        for &rank in &label[1..] {
            cur = self.children(cur).find(|&c| self.get(c).child_rank == rank)?;
        }
        Some(cur)
    }

    /// Individuals alive at time `t` (born at or before `t`, death after `t`).
    pub fn alive_at(&self, t: f64) -> Vec<Handle> {
        (0..self.arena.len() as Handle)
            .filter(|&h| {
                let ind = self.get(h);
                ind.birth <= t && ind.death > t
            })
            .collect()
    }

    /// Is `anc` an ancestor of (or equal to) `h`?
    pub fn descends_from(&self, h: Handle, anc: Handle) -> bool {
        let mut cur = h;
        loop {
            if cur == anc {
                return true;
            }
            match self.get(cur).parent() {
                Some(p) => cur = p,
                None => return false,
            }
        }
    }

    /// Depth-first walk of the subtree under `root`, calling `f` with the
    /// type track of every individual alive at the end of the simulation.
    /// The track starts at the subtree root's birth time.
    pub fn for_each_alive_lineage_from(&self, root: Handle, f: &mut impl FnMut(Handle, &TypeTrack)) {
        let mut track = TypeTrack::default();
        // (handle, next child offset); the track always mirrors the stack
        let mut stack: Vec<(Handle, u32)> = Vec::new();
        let rind = self.get(root);
        track.push(rind.birth, rind.type_of);
        stack.push((root, 0));
        while let Some((h, next)) = stack.last_mut() {
            let ind = self.get(*h);
            if *next == 0 && ind.is_alive() {
                f(*h, &track);
            }
            if *next < ind.kids_len {
                let child = ind.kids_start + *next;
                *next += 1;
                let cind = self.get(child);
                track.push(cind.birth, cind.type_of);
                stack.push((child, 0));
            } else {
                stack.pop();
                track.times.pop();
                track.types.pop();
            }
        }
    }

    /// Walk every tree of the forest.
    pub fn for_each_alive_lineage(&self, f: &mut impl FnMut(Handle, &TypeTrack)) {
        for r in self.roots() {
            self.for_each_alive_lineage_from(r, f);
        }
    }
}

/// Composition path: `comps[i]` holds on `[times[i], times[i+1])`.
#[derive(Debug, Clone)]
pub struct PopulationPath {
    pub times: Vec<f64>,
    pub comps: Vec<Vec<u32>>,
    pub horizon: f64,
}

impl PopulationPath {
    pub fn comp_at(&self, s: f64) -> &[u32] {
        &self.comps[segment_index(&self.times, s)]
    }

    pub fn final_comp(&self) -> &[u32] {
        self.comps.last().expect("nonempty path")
    }

    /// Normalized view for functional evaluation.
    pub fn normalized(&self, capacity: u32) -> CompTrack {
        CompTrack {
            times: self.times.clone(),
            comps: self
                .comps
                .iter()
                .map(|z| crate::model::normalize(z, capacity))
                .collect(),
        }
    }
}

/// Merged piecewise-constant `(type, composition)` record of one lineage.
#[derive(Debug, Clone)]
pub struct LineagePath {
    pub times: Vec<f64>,
    pub types: Vec<TypeId>,
    pub comps: Vec<Vec<u32>>,
    pub horizon: f64,
}

/// Root individuals for an initial composition: numbered `1..=||z||_1`,
/// grouped by type in type-space order.
pub fn initial_types(init: &[u32]) -> Vec<TypeId> {
    let mut out = Vec::new();
    for (x, &n) in init.iter().enumerate() {
        out.extend(std::iter::repeat_n(TypeId(x), n as usize));
    }
    out
}

/// One exact trajectory of the population process on `[0, horizon]`.
pub fn simulate_population(
    model: &ModelSpec,
    init: &[u32],
    horizon: f64,
    seed: u64,
) -> Result<(GenealogyForest, PopulationPath), PopsimError> {
    let mut rng = replica_rng(seed, stream::POPSIM, 0);
    simulate_population_rng(model, init, horizon, &mut rng)
}

pub(crate) fn simulate_population_rng(
    model: &ModelSpec,
    init: &[u32],
    horizon: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(GenealogyForest, PopulationPath), PopsimError> {
    let size: u64 = init.iter().map(|&v| u64::from(v)).sum();
    if size == 0 || size > u64::from(model.capacity()) || init.len() != model.dim() {
        return Err(PopsimError::BadInit(init.to_vec()));
    }

    let mut arena: Vec<Individual> = Vec::new();
    let mut alive: Vec<Vec<Handle>> = vec![Vec::new(); model.dim()];
    for (rank, ty) in initial_types(init).into_iter().enumerate() {
        let h = arena.len() as Handle;
        arena.push(Individual {
            type_of: ty,
            birth: 0.0,
            death: f64::INFINITY,
            parent: NO_PARENT,
            child_rank: rank as u32 + 1,
            kids_start: 0,
            kids_len: 0,
        });
        alive[ty.0].push(h);
    }
    let n_roots = arena.len() as u32;

    let mut z = init.to_vec();
    let mut times = vec![0.0];
    let mut comps = vec![z.clone()];
    let mut t = 0.0;

    let events = model.events();
    let mut channel_rates = vec![0.0f64; events.len()];
    let mut arrangement: Vec<TypeId> = Vec::new();

    loop {
        let mut total = 0.0;
        for (j, ev) in events.iter().enumerate() {
            let mult = f64::from(z[ev.parent.0]);
            let r = if mult > 0.0 {
                mult * model.event_rate_counts(ev, &z)
            } else {
                0.0
            };
            channel_rates[j] = r;
            total += r;
        }
        if total <= 0.0 {
            break;
        }
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / total;
        if t > horizon {
            break;
        }
        // pick the channel proportionally to its rate
        let mut pick = rng.random::<f64>() * total;
        let mut j = 0;
        for (jj, &r) in channel_rates.iter().enumerate() {
            j = jj;
            if pick < r {
                break;
            }
            pick -= r;
        }
        let ev = &events[j];
        // uniform victim among the alive individuals of the parent type
        let list = &mut alive[ev.parent.0];
        let vi = rng.random_range(0..list.len());
        let victim = list.swap_remove(vi);
        arena[victim as usize].death = t;

        // type the offspring: uniform arrangement of the offspring multiset
        arrangement.clear();
        for (y, &ky) in ev.offspring.iter().enumerate() {
            arrangement.extend(std::iter::repeat_n(TypeId(y), ky as usize));
        }
        for i in (1..arrangement.len()).rev() {
            arrangement.swap(i, rng.random_range(0..=i));
        }
        let kids_start = arena.len() as Handle;
        arena[victim as usize].kids_start = kids_start;
        arena[victim as usize].kids_len = arrangement.len() as u32;
        for (rank, &ty) in arrangement.iter().enumerate() {
            let h = arena.len() as Handle;
            arena.push(Individual {
                type_of: ty,
                birth: t,
                death: f64::INFINITY,
                parent: victim,
                child_rank: rank as u32 + 1,
                kids_start: 0,
                kids_len: 0,
            });
            alive[ty.0].push(h);
        }

        z[ev.parent.0] -= 1;
        for (zy, &ky) in z.iter_mut().zip(ev.offspring.iter()) {
            *zy += ky;
        }
        times.push(t);
        comps.push(z.clone());
    }

    Ok((
        GenealogyForest { arena, n_roots },
        PopulationPath {
            times,
            comps,
            horizon,
        },
    ))
}

/// The designated individual of type `x`: lowest label among roots of that
/// type.
pub fn designated_root(forest: &GenealogyForest, x: TypeId) -> Result<Handle, PopsimError> {
    forest
        .roots()
        .find(|&h| forest.get(h).type_of == x)
        .ok_or(PopsimError::MissingDesignatedType(x.0))
}

/// Ancestral types of `u` merged with the composition jumps, on `[0, t]`.
pub fn extract_lineage(
    forest: &GenealogyForest,
    path: &PopulationPath,
    u: Handle,
    t: f64,
) -> Result<LineagePath, PopsimError> {
    let ind = forest.get(u);
    if !(ind.birth <= t && ind.death > t) {
        return Err(PopsimError::NotAlive);
    }
    let mut anc = vec![u];
    let mut cur = u;
    while let Some(p) = forest.get(cur).parent() {
        anc.push(p);
        cur = p;
    }
    anc.reverse();

    let mut times = Vec::new();
    let mut types = Vec::new();
    let mut comps = Vec::new();
    let mut ai = 0usize; // current ancestor
    for (k, &jt) in path.times.iter().enumerate() {
        if jt > t {
            break;
        }
        while ai + 1 < anc.len() && forest.get(anc[ai + 1]).birth <= jt {
            ai += 1;
        }
        times.push(jt);
        types.push(forest.get(anc[ai]).type_of);
        comps.push(path.comps[k].clone());
    }
    Ok(LineagePath {
        times,
        types,
        comps,
        horizon: t,
    })
}

/// Monte-Carlo estimate of the m-function: mean psi-weighted count of
/// descendants of the designated type-`x` root at time `t`. Returns
/// `(estimate, standard error)`.
pub fn estimate_m_mc(
    model: &ModelSpec,
    x: TypeId,
    init: &[u32],
    t: f64,
    replicas: u64,
    seed: u64,
) -> Result<(f64, f64), PopsimError> {
    if init.get(x.0).copied().unwrap_or(0) == 0 {
        return Err(PopsimError::MissingDesignatedType(x.0));
    }
    let values = crate::harness::par_map_replicas(replicas, |r| {
        let mut rng = replica_rng(seed, stream::POPSIM, r);
        let (forest, path) =
            simulate_population_rng(model, init, t, &mut rng).expect("validated init");
        let root = designated_root(&forest, x).expect("designated root present");
        let final_z = path.final_comp();
        let mut acc = 0.0;
        forest.for_each_alive_lineage_from(root, &mut |h, _track| {
            acc += model.psi_counts(forest.get(h).type_of, final_z);
        });
        acc
    });
    Ok(crate::harness::mean_se(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset_switch2, preset_toy};

    #[test]
    fn zero_horizon_is_a_single_entry() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (forest, path) = simulate_population(&m, &[1, 0], 0.0, 1).unwrap();
        assert_eq!(forest.len(), 1);
        assert_eq!(path.times.len(), 1);
        assert_eq!(path.final_comp(), &[1, 0]);
    }

    #[test]
    fn composition_bookkeeping_replays_exactly() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (forest, path) = simulate_population(&m, &[1, 0], 8.0, 42).unwrap();
        // replay births/deaths at each jump time and compare
        for (k, &jt) in path.times.iter().enumerate() {
            let alive = forest.alive_at(jt);
            let mut z = vec![0u32; m.dim()];
            for h in alive {
                z[forest.get(h).type_of.0] += 1;
            }
            assert_eq!(&z, &path.comps[k], "composition mismatch at jump {k}");
            assert!(z.iter().sum::<u32>() <= m.capacity());
        }
    }

    #[test]
    fn seeds_are_bit_deterministic() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (f1, p1) = simulate_population(&m, &[1, 0], 5.0, 7).unwrap();
        let (f2, p2) = simulate_population(&m, &[1, 0], 5.0, 7).unwrap();
        assert_eq!(p1.times, p2.times);
        assert_eq!(p1.comps, p2.comps);
        assert_eq!(f1.len(), f2.len());
        let (_f3, p3) = simulate_population(&m, &[1, 0], 5.0, 8).unwrap();
        assert!(p1.times != p3.times || p1.comps != p3.comps);
    }

    #[test]
    fn pure_type_change_preserves_population_size() {
        let m = preset_switch2(1.0, 2.0, 4).unwrap();
        for seed in 0..20 {
            let (_forest, path) = simulate_population(&m, &[2, 1], 4.0, seed).unwrap();
            for z in &path.comps {
                assert_eq!(z.iter().sum::<u32>(), 3);
            }
        }
    }

    #[test]
    fn labels_follow_ulam_harris() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (forest, _path) = simulate_population(&m, &[1, 0], 6.0, 3).unwrap();
        for h in 0..forest.len() as Handle {
            let ind = forest.get(h);
            let label = forest.label(h);
            match ind.parent() {
                None => assert_eq!(label.len(), 1),
                Some(p) => {
                    let plabel = forest.label(p);
                    assert_eq!(label.len(), plabel.len() + 1);
                    assert_eq!(&label[..plabel.len()], plabel.as_slice());
                    assert_eq!(*label.last().unwrap(), ind.child_rank);
                }
            }
            assert_eq!(forest.find_by_label(&label), Some(h));
        }
    }

    #[test]
    fn lineages_start_at_root_types() {
        let m = preset_toy(1.0, 2.0).unwrap();
        for seed in 0..10 {
            let (forest, path) = simulate_population(&m, &[1, 0], 6.0, seed).unwrap();
            let root_ty = forest.get(0).type_of;
            for h in forest.alive_at(6.0) {
                let lin = extract_lineage(&forest, &path, h, 6.0).unwrap();
                assert_eq!(lin.types[0], root_ty);
                assert_eq!(lin.times[0], 0.0);
                // at most one potential type change per generation
                let depth = forest.label(h).len();
                let changes = lin
                    .types
                    .windows(2)
                    .filter(|w| w[0] != w[1])
                    .count();
                assert!(changes < depth);
            }
        }
    }

    #[test]
    fn extract_lineage_rejects_dead_individuals() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (forest, path) = simulate_population(&m, &[1, 0], 6.0, 11).unwrap();
        let dead = (0..forest.len() as Handle).find(|&h| !forest.get(h).is_alive());
        if let Some(h) = dead {
            assert!(matches!(
                extract_lineage(&forest, &path, h, 6.0),
                Err(PopsimError::NotAlive)
            ));
        }
    }

    #[test]
    fn m_estimate_at_zero_horizon_is_psi() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (est, se) = estimate_m_mc(&m, TypeId(0), &[1, 0], 0.0, 100, 5).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn m_estimate_is_one_for_pure_type_change() {
        let m = preset_switch2(1.5, 0.5, 4).unwrap();
        let (est, se) = estimate_m_mc(&m, TypeId(0), &[1, 2], 2.0, 200, 5).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn m_estimate_stays_within_capacity_bound() {
        let m = preset_toy(1.0, 2.0).unwrap();
        let (est, _) = estimate_m_mc(&m, TypeId(0), &[1, 0], 3.0, 500, 9).unwrap();
        assert!(est >= 0.0 && est <= 2.0);
    }
}
