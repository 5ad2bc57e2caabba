//! Adaptive layer freezing.
//!
//! At every freeze check `T` the number of frozen bottom layers becomes
//!
//! ```text
//! min( L_prev + α (L − L_prev),  argmin_{ℓ ∈ [L_prev, L)} ‖g_ℓ‖ )
//! ```
//!
//! floored to an integer. The first term caps how fast layers freeze (an `α`
//! fraction of the remaining active layers); the second freezes every layer
//! below the currently slowest-changing one. The cap is carried as a real
//! number between checks so that, whenever it binds, the trajectory follows
//! the closed form of [`frozen_bound_closed_form`] exactly.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezeRecord {
    pub timestep: usize,
    /// Layers `[0, frozen)` are frozen.
    pub frozen: usize,
    /// Unfloored value of the `min(...)`; seeds the next bound.
    pub raw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreezeState {
    alpha: f64,
    history: Vec<FreezeRecord>,
}

impl FreezeState {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(FreezeState {
            alpha,
            history: vec![FreezeRecord {
                timestep: 0,
                frozen: 0,
                raw: 0.0,
            }],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn history(&self) -> &[FreezeRecord] {
        &self.history
    }

    pub fn current(&self) -> FreezeRecord {
        *self.history.last().expect("history starts with T = 0")
    }

    pub fn frozen(&self) -> usize {
        self.current().frozen
    }

    /// Timestep the next call to [`next_frozen_count`] will evaluate.
    pub fn next_timestep(&self) -> usize {
        self.current().timestep + 1
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Per-layer gradient norms observed before freeze check `timestep`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormVector {
    timestep: usize,
    norms: Vec<f64>,
}

impl GradNormVector {
    pub fn new(timestep: usize, norms: Vec<f64>) -> Result<Self> {
        if let Some(i) = norms.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::domain(format!(
                "gradient norm of layer {i} is not a finite non-negative number"
            )));
        }
        Ok(GradNormVector { timestep, norms })
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    /// Index of the smallest norm in `[from, len)`, ties to the lowest index.
    pub fn argmin_from(&self, from: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &g) in self.norms.iter().enumerate().skip(from) {
            match best {
                Some((_, b)) if g >= b => {}
                _ => best = Some((i, g)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Evaluates the freeze rule for the next timestep and appends it to `state`.
pub fn next_frozen_count(
    state: &mut FreezeState,
    norms: &GradNormVector,
    layers: usize,
) -> Result<usize> {
    if norms.norms.len() != layers {
        return Err(Error::domain(format!(
            "expected {layers} gradient norms, got {}",
            norms.norms.len()
        )));
    }
    let prev = state.current();
    let timestep = prev.timestep + 1;
    if norms.timestep != timestep {
        return Err(Error::domain(format!(
            "gradient norms are for timestep {}, state expects {timestep}",
            norms.timestep
        )));
    }
    let l = layers as f64;
    let bound = prev.raw + state.alpha * (l - prev.raw);
    // An empty search range means everything is frozen already.
    let slowest = norms.argmin_from(prev.frozen).unwrap_or(layers) as f64;
    let raw = bound.min(slowest);
    let frozen = (raw.floor() as usize).clamp(prev.frozen, layers);
    state.history.push(FreezeRecord {
        timestep,
        frozen,
        raw,
    });
    Ok(frozen)
}

/// Closed form of the freeze cap when it binds at every step:
/// `(1−α)^T [αL/(1−α) + Σ_{t=2..T} αL/(1−α)^t]`.
///
/// Evaluated as the algebraically identical `Σ_{t=1..T} αL (1−α)^{T−t}`, which
/// avoids dividing by `(1−α)^T` for large `T`.
pub fn frozen_bound_closed_form(timestep: usize, layers: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if timestep == 0 {
        return Err(Error::domain("timestep must be at least 1"));
    }
    let step = alpha * layers as f64;
    let keep = 1.0 - alpha;
    Ok((1..=timestep)
        .map(|t| step * keep.powi((timestep - t) as i32))
        .sum())
}

/// Source of per-layer gradient norms, one vector per epoch.
#[derive(Debug, Clone)]
pub enum GradNormSource {
    Trace(GradNormTrace),
    Synthetic(SyntheticNorms),
}

impl GradNormSource {
    /// Norms observed during `epoch`, tagged with the freeze `timestep` they feed.
    pub fn norms(&self, epoch: usize, timestep: usize, layers: usize) -> Result<GradNormVector> {
        match self {
            GradNormSource::Trace(t) => t.norms(epoch, timestep, layers),
            GradNormSource::Synthetic(s) => s.norms(timestep, layers),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    epoch: usize,
    layer: usize,
    grad_norm: f64,
}

/// Recorded norms from a CSV with header `epoch,layer,grad_norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormTrace {
    path: PathBuf,
    rows: BTreeMap<(usize, usize), f64>,
}

impl GradNormTrace {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::from_reader(path, file)
    }

    pub fn from_reader(path: impl Into<PathBuf>, reader: impl Read) -> Result<Self> {
        let path = path.into();
        let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = csv.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["epoch", "layer", "grad_norm"] {
            return Err(Error::Trace {
                path,
                message: "header must be `epoch,layer,grad_norm`".into(),
            });
        }
        let mut rows = BTreeMap::new();
        for (line, row) in csv.deserialize::<TraceRow>().enumerate() {
            let row = row.map_err(|e| Error::Trace {
                path: path.clone(),
                message: format!("row {}: {e}", line + 2),
            })?;
            if !(row.grad_norm.is_finite() && row.grad_norm >= 0.0) {
                return Err(Error::Trace {
                    path,
                    message: format!("row {}: grad_norm must be non-negative", line + 2),
                });
            }
            if rows.insert((row.epoch, row.layer), row.grad_norm).is_some() {
                return Err(Error::Trace {
                    path,
                    message: format!(
                        "duplicate row for epoch {} layer {}",
                        row.epoch, row.layer
                    ),
                });
            }
        }
        Ok(GradNormTrace { path, rows })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn norms(&self, epoch: usize, timestep: usize, layers: usize) -> Result<GradNormVector> {
        let norms = (0..layers)
            .map(|layer| {
                self.rows.get(&(epoch, layer)).copied().ok_or_else(|| Error::Trace {
                    path: self.path.clone(),
                    message: format!("missing row for epoch {epoch} layer {layer}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GradNormVector::new(timestep, norms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticProfile {
    /// Norms strictly decrease with depth at every timestep.
    Monotone,
    /// Random norms with the minimum near the output for `T < switchover`,
    /// then monotone.
    EarlyRandom { switchover: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticNorms {
    pub profile: SyntheticProfile,
    pub seed: u64,
    /// Per-timestep multiplicative decay of all norms.
    pub decay: f64,
}

impl SyntheticNorms {
    pub fn new(profile: SyntheticProfile, seed: u64) -> Self {
        SyntheticNorms {
            profile,
            seed,
            decay: 0.9,
        }
    }

    pub fn norms(&self, timestep: usize, layers: usize) -> Result<GradNormVector> {
        let mut rng = crate::rng::stream(self.seed, &[timestep as u64, layers as u64]);
        let scale = self.decay.powi(timestep as i32);
        let early = matches!(self.profile, SyntheticProfile::EarlyRandom { switchover } if timestep < switchover);
        let norms = if early {
            let mut g: Vec<f64> = (0..layers).map(|_| 1.0 + rng.gen::<f64>()).collect();
            let tail = (layers / 4).max(1);
            let slowest = layers - 1 - rng.gen_range(0..tail);
            g[slowest] = 0.5;
            g.into_iter().map(|x| x * scale).collect()
        } else {
            // Consecutive gaps are at least 0.5, so the order is strict.
            (0..layers)
                .map(|l| ((layers - l) as f64 + 0.5 * rng.gen::<f64>()) * scale)
                .collect()
        };
        GradNormVector::new(timestep, norms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decreasing(layers: usize, t: usize) -> GradNormVector {
        GradNormVector::new(t, (0..layers).map(|l| (layers - l) as f64).collect()).unwrap()
    }

    #[test]
    fn first_step_is_capped_by_the_bound() {
        let mut s = FreezeState::new(1.0 / 3.0).unwrap();
        let n = next_frozen_count(&mut s, &decreasing(12, 1), 12).unwrap();
        assert_eq!(n, 4);
        assert!((s.current().raw - 4.0).abs() < 1e-12);
    }

    #[test]
    fn equal_norms_freeze_nothing() {
        let mut s = FreezeState::new(1.0 / 3.0).unwrap();
        let g = GradNormVector::new(1, vec![2.5; 12]).unwrap();
        assert_eq!(next_frozen_count(&mut s, &g, 12).unwrap(), 0);
    }

    #[test]
    fn bound_wins_over_deeper_argmin() {
        let mut s = FreezeState::new(1.0 / 3.0).unwrap();
        // Get to exactly 4 frozen first.
        next_frozen_count(&mut s, &decreasing(12, 1), 12).unwrap();
        let mut g = vec![5.0; 12];
        g[7] = 0.1;
        let g = GradNormVector::new(2, g).unwrap();
        // bound = 4 + (1/3)(8) = 6.667, argmin = 7 -> 6
        assert_eq!(next_frozen_count(&mut s, &g, 12).unwrap(), 6);
        assert!((s.current().raw - (4.0 + 8.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn argmin_ignores_frozen_layers() {
        let g = GradNormVector::new(1, vec![0.0, 0.0, 3.0, 1.0, 2.0]).unwrap();
        assert_eq!(g.argmin_from(0), Some(0));
        assert_eq!(g.argmin_from(2), Some(3));
        assert_eq!(g.argmin_from(5), None);
    }

    #[test]
    fn length_and_timestep_mismatch_are_errors() {
        let mut s = FreezeState::new(0.5).unwrap();
        assert!(next_frozen_count(&mut s, &decreasing(11, 1), 12).is_err());
        assert!(next_frozen_count(&mut s, &decreasing(12, 3), 12).is_err());
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn closed_form_small_cases() {
        assert_eq!(frozen_bound_closed_form(1, 12, 0.5).unwrap(), 6.0);
        let t2 = frozen_bound_closed_form(2, 12, 1.0 / 3.0).unwrap();
        assert!((t2 - 20.0 / 3.0).abs() < 1e-12);
        assert!(frozen_bound_closed_form(1, 12, 1.0).is_err());
        assert!(frozen_bound_closed_form(0, 12, 0.5).is_err());
    }

    #[test]
    fn synthetic_sources_are_deterministic() {
        let s = SyntheticNorms::new(SyntheticProfile::Monotone, 11);
        assert_eq!(s.norms(3, 12).unwrap(), s.norms(3, 12).unwrap());
        let g = s.norms(3, 12).unwrap();
        assert!(g.norms().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn early_random_minimum_sits_near_the_output() {
        let s = SyntheticNorms::new(SyntheticProfile::EarlyRandom { switchover: 3 }, 5);
        for t in 1..3 {
            let g = s.norms(t, 12).unwrap();
            assert!(g.argmin_from(0).unwrap() >= 9);
        }
        let late = s.norms(3, 12).unwrap();
        assert_eq!(late.argmin_from(0), Some(11));
    }

    #[test]
    fn trace_playback_and_missing_rows() {
        let csv = "epoch,layer,grad_norm\n0,0,3.0\n0,1,1.0\n1,0,2.0\n";
        let t = GradNormTrace::from_reader("mem.csv", csv.as_bytes()).unwrap();
        assert_eq!(t.norms(0, 1, 2).unwrap().norms(), &[3.0, 1.0]);
        let err = t.norms(1, 2, 2).unwrap_err();
        assert!(err.to_string().contains("missing row for epoch 1 layer 1"), "{err}");
    }

    #[test]
    fn trace_rejects_bad_header_and_duplicates() {
        assert!(GradNormTrace::from_reader("x", "e,l,g\n".as_bytes()).is_err());
        let dup = "epoch,layer,grad_norm\n0,0,1\n0,0,2\n";
        assert!(GradNormTrace::from_reader("x", dup.as_bytes()).is_err());
    }
}
