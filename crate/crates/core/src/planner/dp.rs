//! Dynamic-programming stage partitioning.
//!
//! `W(0..=y, first n devices, s)` is the slowest-stage time of the best
//! split of layers `0..=y` into `s` stages over devices `0..n`:
//!
//! ```text
//! W(y, n, 1) = T(0..=y, devices 0..n)
//! W(y, n, s) = min over q < y, 1 <= m < n of
//!              max(W(q, n - m, s - 1), T(q+1..=y, devices n-m..n))
//! ```
//!
//! The last stage always takes a suffix of the device prefix. Ties go to
//! the smaller `q`, then the smaller `m`.

use crate::par::Execution;
use crate::profile::Micros;

use super::{Partition, StageModel, StagePlan};

/// Filled DP table with backpointers.
#[derive(Debug, Clone)]
pub struct DpTable {
    layers: usize,
    devices: usize,
    max_stages: usize,
    /// `[s-1][y][n-1]`.
    w: Vec<Option<Micros>>,
    /// `(q, m)` of the chosen last stage, `q = None` for single-stage cells.
    back: Vec<Option<(Option<usize>, usize)>>,
    /// `[x][y][n][m]` stage times for the group `n-m..n`.
    stage: Vec<Option<Micros>>,
}

impl DpTable {
    fn cell(&self, s: usize, y: usize, n: usize) -> usize {
        ((s - 1) * self.layers + y) * self.devices + (n - 1)
    }

    fn stage_index(layers: usize, devices: usize, x: usize, y: usize, n: usize, m: usize) -> usize {
        ((x * layers + y) * (devices + 1) + n) * (devices + 1) + m
    }

    fn stage(&self, x: usize, y: usize, n: usize, m: usize) -> Option<Micros> {
        self.stage[Self::stage_index(self.layers, self.devices, x, y, n, m)]
    }

    pub fn max_stages(&self) -> usize {
        self.max_stages
    }

    /// `W(0..=y, first n devices, s)`; `None` is infinity.
    pub fn get(&self, s: usize, y: usize, n: usize) -> Option<Micros> {
        if s == 0 || s > self.max_stages || n == 0 || n > self.devices || y >= self.layers {
            return None;
        }
        self.w[self.cell(s, y, n)]
    }

    /// Best slowest-stage time over all layers and devices with `s` stages.
    pub fn best(&self, s: usize) -> Option<Micros> {
        self.get(s, self.layers - 1, self.devices)
    }

    /// `(q, m)` recorded for a cell.
    pub fn backpointer(&self, s: usize, y: usize, n: usize) -> Option<(Option<usize>, usize)> {
        self.get(s, y, n)?;
        self.back[self.cell(s, y, n)]
    }

    /// Follow backpointers from the full-model cell.
    pub fn follow_backpointers(&self, s: usize) -> Option<Partition> {
        let (mut y, mut n) = (self.layers - 1, self.devices);
        let mut stages = Vec::with_capacity(s);
        for k in (1..=s).rev() {
            let (q, m) = self.backpointer(k, y, n)?;
            let first = q.map_or(0, |q| q + 1);
            stages.push(StagePlan { first_layer: first, last_layer: y, devices: (n - m..n).collect() });
            n -= m;
            match q {
                Some(q) => y = q,
                None => break,
            }
        }
        stages.reverse();
        Some(Partition { stages })
    }

    /// The canonical optimal plan for `s` stages: among all plans whose
    /// slowest stage equals the optimum, the one with the lexicographically
    /// smallest (first layer, group size) sequence read from the last stage
    /// backwards.
    pub fn reconstruct(&self, s: usize) -> Option<Partition> {
        let target = self.best(s)?;
        let (mut y, mut n) = (self.layers - 1, self.devices);
        let mut stages = Vec::with_capacity(s);
        for k in (1..=s).rev() {
            if k == 1 {
                debug_assert!(self.stage(0, y, n, n).is_some_and(|t| t <= target));
                stages.push(StagePlan { first_layer: 0, last_layer: y, devices: (0..n).collect() });
                break;
            }
            let (q, m) = (k - 2..y)
                .flat_map(|q| (1..=n - (k - 1)).map(move |m| (q, m)))
                .find(|&(q, m)| {
                    self.stage(q + 1, y, n, m).is_some_and(|t| t <= target)
                        && self.get(k - 1, q, n - m).is_some_and(|w| w <= target)
                })
                .expect("an optimal completion exists below the target");
            stages.push(StagePlan { first_layer: q + 1, last_layer: y, devices: (n - m..n).collect() });
            y = q;
            n -= m;
        }
        stages.reverse();
        Some(Partition { stages })
    }
}

/// Fill the DP table for every stage count up to `min(L, D)`. The parallel
/// and sequential fills produce identical tables.
pub fn dp_partition(model: &StageModel, exec: Execution) -> DpTable {
    let layers = model.num_layers();
    let devices = model.num_devices();
    let max_stages = layers.min(devices);

    // Stage times for every layer range and every device-prefix suffix.
    let rows = exec.map_range(layers, |x| {
        let mut row = vec![None; layers * (devices + 1) * (devices + 1)];
        for y in x..layers {
            for n in 1..=devices {
                for m in 1..=n {
                    row[(y * (devices + 1) + n) * (devices + 1) + m] = model.stage_time(x, y, n - m, m);
                }
            }
        }
        row
    });
    let stage: Vec<Option<Micros>> = rows.into_iter().flatten().collect();

    let mut table = DpTable {
        layers,
        devices,
        max_stages,
        w: vec![None; max_stages * layers * devices],
        back: vec![None; max_stages * layers * devices],
        stage,
    };
    for y in 0..layers {
        for n in 1..=devices {
            let c = table.cell(1, y, n);
            table.w[c] = table.stage(0, y, n, n);
            table.back[c] = Some((None, n));
        }
    }
    for s in 2..=max_stages {
        let t = &table;
        let cells = exec.map_range(layers * devices, |i| {
            let (y, n) = (i / devices, i % devices + 1);
            if y + 1 < s || n < s {
                return (None, None);
            }
            let mut best: Option<(Micros, usize, usize)> = None;
            for q in s - 2..y {
                for m in 1..=n - (s - 1) {
                    let (Some(prev), Some(last)) = (t.get(s - 1, q, n - m), t.stage(q + 1, y, n, m)) else {
                        continue;
                    };
                    let v = prev.max(last);
                    if best.is_none_or(|(b, _, _)| v < b) {
                        best = Some((v, q, m));
                    }
                }
            }
            match best {
                Some((v, q, m)) => (Some(v), Some((Some(q), m))),
                None => (None, None),
            }
        });
        for (i, (v, bp)) in cells.into_iter().enumerate() {
            let (y, n) = (i / devices, i % devices + 1);
            let c = table.cell(s, y, n);
            table.w[c] = v;
            table.back[c] = bp;
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::super::tests::{small_profiles, small_spec};
    use super::*;

    #[test]
    fn single_stage_is_whole_model_stage_time() {
        let spec = small_spec(5);
        let p = small_profiles(&spec, 3, 0.4, 2);
        let m = StageModel::new(&spec, &p, 6).unwrap();
        let t = dp_partition(&m, Execution::Sequential);
        for n in 1..=3 {
            assert_eq!(t.get(1, 4, n), m.stage_time(0, 4, 0, n));
        }
    }

    #[test]
    fn sequential_and_parallel_fills_agree() {
        let spec = small_spec(8);
        let p = small_profiles(&spec, 4, 0.5, 11);
        let m = StageModel::new(&spec, &p, 12).unwrap();
        let a = dp_partition(&m, Execution::Sequential);
        let b = dp_partition(&m, Execution::Parallel);
        assert_eq!(a.w, b.w);
        assert_eq!(a.back, b.back);
    }

    #[test]
    fn reconstructed_plans_hit_the_optimum() {
        let spec = small_spec(8);
        let p = small_profiles(&spec, 4, 0.5, 5);
        let m = StageModel::new(&spec, &p, 12).unwrap();
        let t = dp_partition(&m, Execution::Sequential);
        for s in 1..=t.max_stages() {
            let Some(best) = t.best(s) else { continue };
            for plan in [t.reconstruct(s).unwrap(), t.follow_backpointers(s).unwrap()] {
                plan.validate(8, 4).unwrap();
                assert_eq!(plan.num_stages(), s);
                let slowest = plan
                    .stages
                    .iter()
                    .map(|st| m.stage_time(st.first_layer, st.last_layer, st.devices[0], st.devices.len()).unwrap())
                    .max()
                    .unwrap();
                assert_eq!(slowest, best);
            }
        }
    }

    #[test]
    fn identical_devices_uniform_layers_split_evenly() {
        let mut spec = small_spec(6);
        spec.decoder_layers = 0;
        spec.technique = crate::model_cost::Technique::Adapters;
        let p = small_profiles(&spec, 3, 0.0, 0);
        let m = StageModel::new(&spec, &p, 12).unwrap();
        let t = dp_partition(&m, Execution::Sequential);
        for s in [2, 3] {
            let plan = t.reconstruct(s).unwrap();
            let lens: Vec<_> = plan.stages.iter().map(|st| st.last_layer - st.first_layer + 1).collect();
            let devs: Vec<_> = plan.stages.iter().map(|st| st.devices.len()).collect();
            // with one device per stage the layer split must be even
            if devs.iter().all(|&d| d == 1) {
                assert!(lens.iter().all(|&l| l == 6 / s), "{lens:?}");
            }
        }
    }
}
