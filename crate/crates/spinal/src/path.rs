//! Piecewise-constant path tracks shared by the simulators and the
//! functional evaluators.

use crate::model::TypeId;

/// Piecewise-constant type path: `types[i]` holds on `[times[i], times[i+1])`
/// (and to the horizon for the last segment). `times[0]` is the path start.
#[derive(Debug, Clone, Default)]
pub struct TypeTrack {
    pub times: Vec<f64>,
    pub types: Vec<TypeId>,
}

impl TypeTrack {
    pub fn start(t0: f64, x: TypeId) -> Self {
        Self {
            times: vec![t0],
            types: vec![x],
        }
    }

    pub fn push(&mut self, t: f64, x: TypeId) {
        self.times.push(t);
        self.types.push(x);
    }

    pub fn at(&self, s: f64) -> TypeId {
        self.types[segment_index(&self.times, s)]
    }

    pub fn last(&self) -> TypeId {
        *self.types.last().expect("nonempty track")
    }

    /// Number of actual type changes (consecutive distinct values).
    pub fn change_count(&self) -> usize {
        self.types.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Total time spent in type `x` on `[0, horizon]`.
    pub fn occupation(&self, x: TypeId, horizon: f64) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.types.len() {
            let lo = self.times[i].min(horizon);
            let hi = if i + 1 < self.times.len() {
                self.times[i + 1].min(horizon)
            } else {
                horizon
            };
            if self.types[i] == x && hi > lo {
                acc += hi - lo;
            }
        }
        acc
    }
}

/// Piecewise-constant composition path in normalized coordinates.
#[derive(Debug, Clone, Default)]
pub struct CompTrack {
    pub times: Vec<f64>,
    pub comps: Vec<Vec<f64>>,
}

impl CompTrack {
    pub fn at(&self, s: f64) -> &[f64] {
        &self.comps[segment_index(&self.times, s)]
    }

    pub fn coord_at(&self, coord: usize, s: f64) -> f64 {
        self.at(s)[coord]
    }
}

/// Index of the segment containing `s` (clamped at both ends).
pub fn segment_index(times: &[f64], s: f64) -> usize {
    match times.binary_search_by(|probe| probe.partial_cmp(&s).unwrap()) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type_track_lookup_and_occupation() {
        let mut tt = TypeTrack::start(0.0, TypeId(0));
        tt.push(1.0, TypeId(1));
        tt.push(2.5, TypeId(0));
        assert_eq!(tt.at(0.5), TypeId(0));
        assert_eq!(tt.at(1.0), TypeId(1));
        assert_eq!(tt.at(3.0), TypeId(0));
        assert_eq!(tt.change_count(), 2);
        let occ0 = tt.occupation(TypeId(0), 3.0);
        assert!((occ0 - 1.5).abs() < 1e-12);
        let occ1 = tt.occupation(TypeId(1), 3.0);
        assert!((occ1 - 1.5).abs() < 1e-12);
    }
}
