//! Central finite-difference verification of analytic gradients.

use crate::par;
use crate::params::{GradSet, ParamId, ParamStore};

/// One sampled scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct CheckEntry {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exact zeros from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Picks `count` coordinates spread over the parameters: parameter `i % len`,
/// element chosen by `pick(i, param_len)`.
pub fn spread_coords(store: &ParamStore, count: usize, mut pick: impl FnMut(usize, usize) -> usize) -> Vec<Coord> {
    let n = store.len();
    (0..count)
        .map(|i| {
            let param = ParamId(i % n);
            let len = store.get(param).len();
            Coord { param, index: pick(i, len) % len }
        })
        .collect()
}

/// Compares `analytic` against central differences of `loss` at every coordinate.
pub fn check<F>(store: &ParamStore, analytic: &GradSet, coords: &[Coord], step: f64, floor: f64, loss: F) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64 + Sync + Send,
{
    let entries = par::map_slice(coords, |&coord| {
        let eval = |delta: f64| {
            let mut s = store.clone();
            s.get_mut(coord.param).data_mut()[coord.index] += delta;
            loss(&s)
        };
        let numeric = (eval(step) - eval(-step)) / (2.0 * step);
        let a = analytic.0[coord.param.0].data()[coord.index];
        CheckEntry { coord, analytic: a, numeric, rel_error: relative_error(a, numeric, floor) }
    });
    GradCheckReport { entries }
}
