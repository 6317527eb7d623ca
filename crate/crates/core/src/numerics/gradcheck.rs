use super::params::{GradBuf, ParamSet};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Larger tensors are sub-sampled: entries with a nonzero analytic
    /// gradient first, then an even stride over the rest.
    pub max_elements_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            max_elements_per_param: 4096,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
    /// Frozen parameters that nonetheless received a gradient.
    pub frozen_with_gradient: Vec<String>,
}

fn eval<P, F>(params: &P, f: &F) -> Result<f64>
where
    P: ParamSet,
    F: for<'t> Fn(&'t P, &mut Tape<'t>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(params, &mut tape)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::shape("grad_check", "objective is not scalar"));
    }
    let x = v.get(0, 0);
    if !x.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok(x)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences, returning the largest
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over trainable entries.
pub fn grad_check<P, F>(params: &mut P, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    P: ParamSet,
    F: for<'t> Fn(&'t P, &mut Tape<'t>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new();
        let out = f(params, &mut tape)?;
        tape.backward(out)?
    };

    let mut plan: Vec<(String, usize, Vec<usize>)> = Vec::new();
    let mut report = GradCheckReport::default();
    params.visit_params(&mut |name, t, frozen| {
        let g = grads.get(name);
        if frozen {
            if g.is_some() {
                report.frozen_with_gradient.push(name.to_string());
            }
            return;
        }
        let n = t.len();
        let cols = t.cols().max(1);
        let idx: Vec<usize> = if n <= cfg.max_elements_per_param {
            (0..n).collect()
        } else {
            let half = cfg.max_elements_per_param / 2;
            let mut chosen: Vec<usize> = match g {
                Some(GradBuf::Rows { entries, .. }) => entries
                    .keys()
                    .flat_map(|&r| r * cols..(r + 1) * cols)
                    .take(half)
                    .collect(),
                Some(GradBuf::Dense(d)) => d
                    .data()
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(i, _)| i)
                    .take(half)
                    .collect(),
                None => Vec::new(),
            };
            let stride = n.div_ceil(cfg.max_elements_per_param - chosen.len()).max(1);
            chosen.extend((0..n).step_by(stride));
            chosen.sort_unstable();
            chosen.dedup();
            chosen
        };
        plan.push((name.to_string(), cols, idx));
    });

    for (name, cols, idx) in plan {
        for i in idx {
            let analytic = grads.get(&name).map_or(0.0, |g| g.get(i / cols, i % cols));
            let orig = params.param_mut(&name).expect("planned parameter").data()[i];
            params.param_mut(&name).expect("planned parameter").data_mut()[i] = orig + cfg.step;
            let plus = eval(params, &f);
            params.param_mut(&name).expect("planned parameter").data_mut()[i] = orig - cfg.step;
            let minus = eval(params, &f);
            params.param_mut(&name).expect("planned parameter").data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.step);
            let err = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, Tensor2D};

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap());
        let report = grad_check(&mut store, &GradCheckConfig::default(), |p, tape| {
            let x = tape.param_from(p, "x")?;
            let sq = tape.matmul_nt(x, x)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn tape_reports_distance_to_relu_and_max_pool_kinks() {
        let x = Tensor2D::from_rows(&[[0.5, -0.02], [0.5, 0.3], [0.45, 0.1]]).unwrap();
        let mut tape = Tape::new();
        assert_eq!(tape.kink_distance(), f64::INFINITY);
        let c = tape.constant(Tensor2D::from_rows(&[[1e-9]]).unwrap());
        tape.relu(c);
        assert_eq!(tape.kink_distance(), f64::INFINITY);
        let p = tape.param("x", &x, true);
        tape.max_pool_rows(p).unwrap();
        // column 0 ties bit-identically at 0.5, so its gap is to 0.45
        assert!((tape.kink_distance() - 0.05).abs() < 1e-12);
        tape.relu(p);
        assert!((tape.kink_distance() - 0.02).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap());
        store.insert("y", Tensor2D::from_rows(&[[3.0, -1.0]]).unwrap());
        store.get_mut("y").unwrap().frozen = true;
        fn f<'t>(p: &'t ParamStore, tape: &mut Tape<'t>) -> Result<Var> {
            let x = tape.param_from(p, "x")?;
            let y = tape.param_from(p, "y")?;
            let s = tape.matmul_nt(x, y)?;
            Ok(tape.sum(s))
        }
        let mut tape = Tape::new();
        let out = f(&store, &mut tape).unwrap();
        let grads = tape.backward(out).unwrap();
        assert!(grads.get("y").is_none());
        assert_eq!(grads.get("x").unwrap().to_dense().data(), &[3.0, -1.0]);
        let report = grad_check(&mut store.clone(), &GradCheckConfig::default(), f).unwrap();
        assert!(report.frozen_with_gradient.is_empty());
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor2D::from_rows(&[[-1.0]]).unwrap());
        let r = grad_check(&mut store, &GradCheckConfig::default(), |p, tape| {
            let x = tape.param_from(p, "x")?;
            let l = tape.log(x)?;
            Ok(tape.sum(l))
        });
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
