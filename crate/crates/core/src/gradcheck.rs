//! Central-difference verification of tape gradients over a [`ParamStore`].

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tensor::{GradFault, Real, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: Real,
    /// Pass threshold on the maximum relative error.
    pub tolerance: Real,
    /// Lower bound on the relative-error denominator. Gradients smaller than
    /// this are compared in absolute terms against `tolerance * floor`.
    pub floor: Real,
    /// Coordinates probed individually per parameter tensor; `None` probes all.
    pub coords_per_param: Option<usize>,
    /// Also probe each tensor along one random ±1 direction covering all of
    /// its entries.
    pub directional: bool,
    pub seed: u64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            coords_per_param: Some(16),
            directional: true,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub coords_checked: usize,
    pub max_rel_err: Real,
    /// Coordinate with the largest error; `None` when the directional probe was worst.
    pub worst_coord: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: Real,
    pub worst_param: String,
    pub tolerance: Real,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {} max_rel_err={:.3e} tolerance={:.1e} worst={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.worst_param
        )?;
        let mut sorted: Vec<&ParamCheck> = self.params.iter().collect();
        sorted.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
        for p in sorted.iter().take(5) {
            writeln!(
                f,
                "  {:<48} rel_err={:.3e} coords={}/{}",
                p.name, p.max_rel_err, p.coords_checked, p.numel
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: Real, numeric: Real, floor: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore, loss: &F) -> Result<Real>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false)?;
    let l = loss(&mut tape, &bound)?;
    Ok(tape.value(l)[0])
}

/// Compares analytic gradients of `loss` against central differences for
/// every parameter tensor in `store`. Parameter values are restored exactly.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = match &opts.fault {
        Some(f) => Tape::with_fault(f.clone()),
        None => Tape::new(),
    };
    let bound = store.bind(&mut tape, true)?;
    let l = loss(&mut tape, &bound)?;
    let mut grads = tape.backward(l)?;
    let analytic: Vec<Vec<Real>> = store
        .params()
        .iter()
        .zip(bound.vars())
        .map(|(p, &v)| grads.take(v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
        .collect();

    let h = opts.step;
    let mut checks = Vec::with_capacity(store.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(pi as u64);
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0;
        let mut worst_coord = None;
        for &i in &coords {
            let orig = store.params()[pi].tensor.data()[i];
            store.params_mut()[pi].tensor.data_mut()[i] = orig + h;
            let up = eval_loss(store, &loss)?;
            store.params_mut()[pi].tensor.data_mut()[i] = orig - h;
            let down = eval_loss(store, &loss)?;
            store.params_mut()[pi].tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[i], numeric, opts.floor);
            if err > worst || worst_coord.is_none() && coords.len() == 1 {
                worst = err;
                worst_coord = Some(i);
            }
        }
        if opts.directional && coords.len() < n {
            let dir: Vec<Real> = (0..n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let orig = store.params()[pi].tensor.data().to_vec();
            let shifted = |sign: Real| -> Vec<Real> {
                orig.iter()
                    .zip(&dir)
                    .map(|(o, d)| o + sign * h * d)
                    .collect()
            };
            store.params_mut()[pi]
                .tensor
                .data_mut()
                .copy_from_slice(&shifted(1.0));
            let up = eval_loss(store, &loss)?;
            store.params_mut()[pi]
                .tensor
                .data_mut()
                .copy_from_slice(&shifted(-1.0));
            let down = eval_loss(store, &loss)?;
            store.params_mut()[pi]
                .tensor
                .data_mut()
                .copy_from_slice(&orig);
            let numeric = (up - down) / (2.0 * h);
            let projected: Real = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let err = relative_error(projected, numeric, opts.floor);
            if err > worst {
                worst = err;
                worst_coord = None;
            }
        }
        checks.push(ParamCheck {
            name: store.params()[pi].name.clone(),
            numel: n,
            coords_checked: coords.len(),
            max_rel_err: worst,
            worst_coord,
        });
    }
    let (max_rel_err, worst_param) = checks.iter().map(|c| (c.max_rel_err, c.name.clone())).fold(
        (0.0, String::new()),
        |acc, x| if x.0 >= acc.0 { x } else { acc },
    );
    Ok(GradCheckReport {
        passed: max_rel_err < opts.tolerance,
        params: checks,
        max_rel_err,
        worst_param,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.push("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(), true);
        store
    }

    fn loss(tape: &mut Tape, p: &Bound) -> Result<Var> {
        let w = p.vars()[0];
        let g = tape.gelu(w)?;
        let sq = tape.mul(g, w)?;
        Ok(tape.sum(sq)?)
    }

    #[test]
    fn passes_on_correct_rules_and_restores_values() {
        let mut store = quadratic_store();
        let before = store.clone();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), loss).unwrap();
        assert!(report.passed, "{report}");
        assert_eq!(
            store.params()[0].tensor.data(),
            before.params()[0].tensor.data()
        );
    }

    #[test]
    fn fails_on_corrupted_rule_and_names_it() {
        let mut store = quadratic_store();
        let opts = GradCheckOptions {
            fault: Some(GradFault {
                op: "gelu",
                scale: 1.01,
            }),
            ..Default::default()
        };
        let report = check_gradients(&mut store, &opts, loss).unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst_param, "w");
        assert!(report.to_string().contains("FAIL"));
    }
}
