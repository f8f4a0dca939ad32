use super::{backward, ParamStore, ParamVars, Tape, Var};
use crate::error::{invalid, Result};

/// Agreement between reverse-mode and finite-difference gradients.
///
/// The headline figure is per parameter tensor:
/// `||a - n||_2 / max(||a||_2, ||n||_2)`, maximised over tensors.
/// Coordinate-wise figures are kept for diagnosis; near-zero coordinates
/// are dominated by the finite-difference noise floor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Tensor with the largest relative error.
    pub worst: Option<String>,
    pub max_coordinate_relative_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat index of the largest coordinate-wise error.
    pub worst_coordinate: Option<(String, usize)>,
    pub coordinates_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn normwise_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let denom = norm(analytic).max(norm(numeric));
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compare reverse-mode gradients of `loss` with central differences over
/// every trainable coordinate of `params`.
///
/// `loss` records a scalar on a fresh tape given the bound parameters; it is
/// evaluated once for the analytic gradient and twice per coordinate.
pub fn finite_diff_check<F>(params: &ParamStore, epsilon: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(invalid(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = tape.load(store);
        let l = loss(&mut tape, &vars)?;
        Ok(tape.scalar_value(l))
    };

    let mut tape = Tape::new();
    let vars = tape.load(params);
    let l = loss(&mut tape, &vars)?;
    let grads = backward(&tape, l)?;
    let analytic = vars.gradients(&tape, &grads);

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.trainable_names().map(str::to_string).collect();
    for name in names {
        let ga = analytic.get(&name).expect("trainable gradient present");
        let mut numeric = Vec::with_capacity(ga.numel());
        for i in 0..ga.numel() {
            let orig = work.tensor(&name)?.data()[i];
            work.tensor_mut(&name)?.data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work.tensor_mut(&name)?.data_mut()[i] = orig;

            let n = (plus - minus) / (2.0 * epsilon);
            let a = ga.data()[i];
            let err = relative_error(a, n);
            report.coordinates_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if report.worst_coordinate.is_none() || err > report.max_coordinate_relative_error {
                report.max_coordinate_relative_error = err;
                report.worst_coordinate = Some((name.clone(), i));
            }
            numeric.push(n);
        }
        let err = normwise_relative_error(ga.data(), &numeric);
        if report.worst.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = Some(name.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamKind, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_softmax_nll_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("w", random_matrix(&mut rng, 5, 4), ParamKind::Weight);
        store.insert(
            "b",
            Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.05]),
            ParamKind::Bias,
        );
        let x = Tensor::vector(vec![0.5, -1.0, 0.25, 2.0]);
        let report = finite_diff_check(&store, 1e-5, |tape, vars| {
            let xv = tape.constant(x.clone());
            let wx = tape.matvec(vars.get("w")?, xv);
            let logits = tape.add(wx, vars.get("b")?);
            let p = tape.softmax(logits);
            let lp = tape.log_at(p, 2);
            Ok(tape.scale(lp, -1.0))
        })
        .unwrap();
        assert_eq!(report.coordinates_checked, 25);
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn every_op_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("a", random_matrix(&mut rng, 3, 4), ParamKind::Weight);
        store.insert("m", random_matrix(&mut rng, 2, 4), ParamKind::Weight);
        store.insert(
            "v",
            Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ParamKind::Bias,
        );
        store.insert(
            "u",
            Tensor::vector((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ParamKind::Bias,
        );
        let report = finite_diff_check(&store, 1e-5, |tape, vars| {
            let a = vars.get("a")?;
            let m = vars.get("m")?;
            let v = vars.get("v")?;
            let u = vars.get("u")?;
            let av = tape.matvec(a, v); // [3]
            let am = tape.matmul_t(a, m); // [3, 2]
            let r = tape.row(m, 1);
            let bias = tape.slice(r, 1, 2);
            let shifted = tape.add_rows(am, bias);
            let t = tape.tanh(shifted);
            let s = tape.sigmoid(av);
            let sm = tape.softmax(s);
            let w = tape.mat_t_vec(t, sm); // [2]
            let mean = tape.mean_rows(a); // [4]
            let g = tape.gather(m, 0);
            let prod = tape.mul(mean, g);
            let c = tape.concat(&[w, prod]);
            let masked = tape.mul_const(c, vec![1.0, 0.0, 2.0, 0.5, -1.0, 3.0]);
            let stacked = tape.stack_rows(&[av, u]);
            let squashed = tape.tanh(stacked);
            let cols = tape.concat_cols(&[stacked, squashed]);
            let sq = tape.sum_squares(cols);
            let tot = tape.sum_all(masked);
            let d = tape.dot(u, av);
            let lp = tape.log_at(sm, 1);
            let parts = tape.sum(&[sq, tot, d, lp]);
            Ok(tape.scale(parts, 0.5))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn all_frozen_checks_nothing() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0]), ParamKind::Weight);
        store.freeze_all();
        let report = finite_diff_check(&store, 1e-5, |tape, vars| {
            let p = vars.get("p")?;
            Ok(tape.sum_squares(p))
        })
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
        assert_eq!(report.coordinates_checked, 0);
    }

    #[test]
    fn epsilon_out_of_range_is_rejected() {
        let store = ParamStore::new();
        let f = |tape: &mut Tape, _: &ParamVars| Ok(tape.constant(Tensor::scalar(0.0)));
        assert!(finite_diff_check(&store, 0.0, f).is_err());
        assert!(finite_diff_check(&store, 0.1, f).is_err());
    }

    #[test]
    fn normwise_error_examples() {
        assert_eq!(normwise_relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(
            (normwise_relative_error(&[3.0, 4.0], &[3.0, 4.5]) - 0.5 / 4.5f64.hypot(3.0)).abs()
                < 1e-15
        );
    }

    #[test]
    fn coordinate_errors_are_reported() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![0.3, -0.2]), ParamKind::Weight);
        let report = finite_diff_check(&store, 1e-5, |tape, vars| {
            let p = vars.get("p")?;
            let t = tape.tanh(p);
            Ok(tape.sum_squares(t))
        })
        .unwrap();
        assert_eq!(report.coordinates_checked, 2);
        assert!(report.max_coordinate_relative_error < 1e-8, "{report:?}");
        assert!(report.max_abs_error < 1e-9);
        assert_eq!(report.worst.as_deref(), Some("p"));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-10, 0.0) - 1e-2).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
