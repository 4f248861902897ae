//! Central finite-difference checks of reverse-mode gradients.
//!
//! The error metric for one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. Above the
//! floor this is the usual relative error; below it the bound degrades to
//! an absolute one (`tolerance * floor`), which is what a vanishing gradient
//! can be held to.
//!
//! Probes that straddle a kink (the branch pattern recorded by the graph
//! differs between `x`, `x + h` and `x - h`) are skipped rather than scored.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdSettings {
    pub step: f64,
    pub tolerance: f64,
    pub floor: f64,
    /// Points whose nearest kink is closer than this are rejected outright.
    pub min_kink_margin: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            min_kink_margin: 1e-6,
        }
    }
}

impl FdSettings {
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdOutcome {
    pub checked: usize,
    pub skipped_at_kink: usize,
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    /// Distance of the base point to its nearest kink.
    pub kink_margin: f64,
}

impl FdOutcome {
    pub fn passed(&self, settings: &FdSettings) -> bool {
        self.max_rel_error <= settings.tolerance
    }

    pub fn merge(&mut self, other: &FdOutcome) {
        self.checked += other.checked;
        self.skipped_at_kink += other.skipped_at_kink;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.kink_margin = self.kink_margin.min(other.kink_margin);
    }
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<(f64, Vec<i8>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    Ok((value, g.kinks().signature().to_vec()))
}

/// Analytic gradients of the scalar built by `build` with every input as a
/// parameter leaf.
pub fn analytic_gradients<F>(inputs: &[Tensor], build: &F) -> Result<(Vec<Tensor>, Vec<i8>, f64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((grads, g.kinks().signature().to_vec(), g.kinks().margin()))
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `coords` restricts the check to the listed (input, element) pairs;
/// `None` checks every element of every input.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    settings: &FdSettings,
    coords: Option<&[(usize, usize)]>,
    build: F,
) -> Result<FdOutcome>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (grads, base_sig, margin) = analytic_gradients(inputs, &build)?;
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut outcome = FdOutcome {
        kink_margin: margin,
        ..FdOutcome::default()
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = inputs[i].data()[j];
        probe[i].data_mut()[j] = orig + settings.step;
        let (plus, sig_plus) = evaluate(&probe, &build)?;
        probe[i].data_mut()[j] = orig - settings.step;
        let (minus, sig_minus) = evaluate(&probe, &build)?;
        probe[i].data_mut()[j] = orig;
        if sig_plus != base_sig || sig_minus != base_sig {
            outcome.skipped_at_kink += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * settings.step);
        let err = settings.error(grads[i].data()[j], numeric);
        outcome.checked += 1;
        if err > outcome.max_rel_error || outcome.worst.is_none() {
            outcome.max_rel_error = outcome.max_rel_error.max(err);
            outcome.worst = Some((i, j));
        }
    }
    Ok(outcome)
}
