use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, ParamVars, Tape, Var};
use crate::error::{Error, Result};

/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)` so
/// that coordinates with near-zero gradient compare in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Compare reverse-mode gradients of the scalar built by `f` with central
/// differences on up to `samples` coordinates drawn uniformly (with a fixed
/// `seed`) from all entries of `params`.
pub fn grad_check<F>(
    params: &ParamStore,
    f: F,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, |_| true);
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("grad_check objective = {base}")));
    }
    let grads = tape.backward(out)?;

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(n, t)| (0..t.numel()).map(move |i| (n.to_string(), i)))
        .collect();
    let chosen: Vec<&(String, usize)> = if coords.len() <= samples {
        coords.iter().collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples).map(|_| &coords[rng.gen_range(0..coords.len())]).collect()
    };

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, |_| false);
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("grad_check objective = {v}")))
        }
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe = params.clone();
    for (name, i) in chosen {
        let analytic = grads.get(vars.get(name)?).map_or(0.0, |g| g.data()[*i]);
        let orig = params.get(name)?.data()[*i];
        set(&mut probe, name, *i, orig + eps);
        let plus = eval(&probe)?;
        set(&mut probe, name, *i, orig - eps);
        let minus = eval(&probe)?;
        set(&mut probe, name, *i, orig);
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

fn set(p: &mut ParamStore, name: &str, i: usize, x: f64) {
    p.get_mut(name).expect("coordinate drawn from this store").data_mut()[i] = x;
}
