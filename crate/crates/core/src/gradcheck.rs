//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How many coordinates to probe.
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per tensor (chosen with `seed`);
    /// `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    /// Additional random-direction probes spanning all selected tensors at once.
    pub directions: usize,
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn exhaustive(eps: f64) -> Self {
        Self {
            eps,
            max_coords_per_tensor: None,
            directions: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub directions_checked: usize,
    /// Parameter name with the largest error.
    pub worst: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.value(loss).item()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!(
            "finite-difference eps {eps} outside (0, 1e-3]"
        )));
    }
    Ok(())
}

/// Checks the gradient of `f` w.r.t. the store tensors accepted by `select`.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(opts.eps)?;
    let base = eval(&f, store)?;
    let again = eval(&f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: base,
            second: again,
        });
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    tape.backward_into(loss, &mut analytic_store)?;

    let ids: Vec<ParamId> = store.ids().filter(|&id| select(store.name(id))).collect();
    let analytic = |id: ParamId, i: usize| analytic_store.get(id).grad().map_or(0.0, |g| g[i]);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    let h = opts.eps;

    for &id in &ids {
        let n = store.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = store.get(id).data().to_vec();
            let mut shifted = orig.clone();
            shifted[i] = orig[i] + h;
            probe.get_mut(id).assign(&shifted)?;
            let plus = eval(&f, &probe)?;
            shifted[i] = orig[i] - h;
            probe.get_mut(id).assign(&shifted)?;
            let minus = eval(&f, &probe)?;
            probe.get_mut(id).assign(&orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic(id, i), numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some(format!("{}[{i}]", store.name(id)));
            }
        }
    }

    for _ in 0..opts.directions {
        let dirs: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                (0..store.get(id).numel())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut directional = 0.0;
        for (&id, dir) in ids.iter().zip(&dirs) {
            for (i, d) in dir.iter().enumerate() {
                directional += analytic(id, i) * d / norm;
            }
        }
        let mut shifted_eval = |sign: f64| -> Result<f64> {
            for (&id, dir) in ids.iter().zip(&dirs) {
                let moved: Vec<f64> = store
                    .get(id)
                    .data()
                    .iter()
                    .zip(dir)
                    .map(|(v, d)| v + sign * h * d / norm)
                    .collect();
                probe.get_mut(id).assign(&moved)?;
            }
            eval(&f, &probe)
        };
        let plus = shifted_eval(1.0)?;
        let minus = shifted_eval(-1.0)?;
        for &id in &ids {
            probe.get_mut(id).assign(store.get(id).data())?;
        }
        let err = relative_error(directional, (plus - minus) / (2.0 * h));
        report.directions_checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some("random direction".into());
        }
    }
    Ok(report)
}

/// Max relative error between the tape gradient of `f` and central finite
/// differences over every coordinate of every tensor in `params`.
///
/// `f` receives one [`Var`] per tensor, in order.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids = params
        .iter()
        .enumerate()
        .map(|(i, t)| store.register(format!("p{i}"), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let wrapped = |tape: &mut Tape, s: &ParamStore| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        f(tape, &vars)
    };
    Ok(grad_check_store(wrapped, &store, |_| true, &GradCheckOptions::exhaustive(eps))?.max_rel_error)
}
