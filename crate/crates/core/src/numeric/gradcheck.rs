use super::params::ParamTape;
use crate::error::{LemofError, Result};

/// Compares analytic gradients against central differences.
///
/// `f` evaluates the loss at the tape's current values and accumulates its
/// analytic gradient into the tape's gradient slots; slots are zeroed before
/// every call. Returns the largest `|analytic - numeric| / max(1, |numeric|)`
/// over all scalar parameters.
pub fn grad_check<F>(f: F, params: &ParamTape, h: f64) -> Result<f64>
where
    F: Fn(&mut ParamTape) -> Result<f64>,
{
    check_with(
        |probe: &mut ParamTape| {
            probe.zero_grads();
            f(probe)
        },
        &f,
        params,
        h,
    )
}

/// [`grad_check`] with a separate loss-only function for the probes, for
/// losses whose gradient pass is costly.
pub fn grad_check_with<V, G>(value: V, grad: G, params: &ParamTape, h: f64) -> Result<f64>
where
    V: Fn(&ParamTape) -> Result<f64>,
    G: Fn(&mut ParamTape) -> Result<f64>,
{
    check_with(|probe: &mut ParamTape| value(probe), grad, params, h)
}

fn check_with<V, G>(value: V, grad: G, params: &ParamTape, h: f64) -> Result<f64>
where
    V: Fn(&mut ParamTape) -> Result<f64>,
    G: Fn(&mut ParamTape) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(LemofError::Config(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut analytic = params.clone();
    analytic.zero_grads();
    let base = grad(&mut analytic)?;
    if !base.is_finite() {
        return Err(LemofError::Numerical(format!(
            "loss is {base} at the base point"
        )));
    }

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for s in 0..probe.len() {
        for i in 0..probe.slots()[s].value.len() {
            let orig = probe.slots()[s].value.data()[i];
            let eval = |x: f64, probe: &mut ParamTape| -> Result<f64> {
                probe.slots_mut()[s].value.data_mut()[i] = x;
                let v = value(probe)?;
                if !v.is_finite() {
                    let name = &probe.slots()[s].name;
                    return Err(LemofError::Numerical(format!(
                        "loss is {v} when probing {name}[{i}]"
                    )));
                }
                Ok(v)
            };
            let plus = eval(orig + h, &mut probe)?;
            let minus = eval(orig - h, &mut probe)?;
            probe.slots_mut()[s].value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.slots()[s].grad.data()[i];
            let rel = (exact - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::graph::Graph;
    use crate::numeric::matrix::Matrix2D;
    use crate::numeric::rng::RngState;

    fn random_tape(seed: u64, shapes: &[(&str, usize, usize)]) -> ParamTape {
        let mut rng = RngState::new(seed);
        let mut tape = ParamTape::new();
        for &(name, r, c) in shapes {
            tape.push(name, rng.uniform_matrix(r, c, -1.0, 1.0))
                .unwrap();
        }
        tape
    }

    #[test]
    fn sum_of_squares() {
        let tape = random_tape(1, &[("a", 3, 4), ("b", 1, 5)]);
        let err = grad_check(
            |t| {
                let mut loss = 0.0;
                for s in t.slots_mut() {
                    for (v, g) in s.value.data().iter().zip(s.grad.data_mut()) {
                        loss += v * v;
                        *g += 2.0 * v;
                    }
                }
                Ok(loss)
            },
            &tape,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function() {
        let tape = random_tape(2, &[("a", 2, 2)]);
        let err = grad_check(|_| Ok(3.0), &tape, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_probe() {
        let tape = random_tape(3, &[("a", 1, 1)]);
        assert!(grad_check(|_| Ok(0.0), &tape, 0.0).is_err());
        let err = grad_check(
            |t| {
                let v = t.slots()[0].value.item();
                Ok(if v > 10.0 { f64::NAN } else { v })
            },
            &tape,
            100.0,
        )
        .unwrap_err();
        assert!(matches!(err, LemofError::Numerical(_)));
    }

    /// Each differentiable graph operation on its own, against finite differences.
    #[test]
    fn graph_ops_pass_gradient_check() {
        type Build =
            fn(&mut Graph, &[crate::numeric::graph::NodeId]) -> crate::numeric::graph::NodeId;
        type Shapes = Vec<(&'static str, usize, usize)>;
        let cases: Vec<(&str, Shapes, Build)> = vec![
            ("matmul", vec![("a", 3, 4), ("b", 4, 2)], |g, p| {
                let m = g.matmul(p[0], p[1]).unwrap();
                reduce(g, m)
            }),
            ("matmul_nt", vec![("a", 3, 4), ("b", 2, 4)], |g, p| {
                let m = g.matmul_nt(p[0], p[1]).unwrap();
                reduce(g, m)
            }),
            ("sigmoid", vec![("a", 2, 3)], |g, p| {
                let m = g.sigmoid(p[0]);
                reduce(g, m)
            }),
            ("softmax", vec![("a", 3, 5)], |g, p| {
                let m = g.softmax_rows(p[0]);
                reduce(g, m)
            }),
            ("mean_rows", vec![("a", 4, 3)], |g, p| {
                let m = g.mean_rows(p[0]).unwrap();
                reduce(g, m)
            }),
            ("concat", vec![("a", 2, 2), ("b", 2, 3)], |g, p| {
                let m = g.concat_cols(&[p[0], p[1]]).unwrap();
                reduce(g, m)
            }),
            ("add_row", vec![("a", 3, 2), ("b", 1, 2)], |g, p| {
                let m = g.add_row(p[0], p[1]).unwrap();
                reduce(g, m)
            }),
            ("unfold", vec![("a", 7, 2)], |g, p| {
                let m = g.unfold1d(p[0], 5, 2, 2);
                reduce(g, m)
            }),
            ("bce", vec![("a", 1, 1)], |g, p| {
                g.bce_with_logits(p[0], 1.0).unwrap()
            }),
        ];
        for (i, (name, shapes, build)) in cases.into_iter().enumerate() {
            let tape = random_tape(100 + i as u64, &shapes);
            let err = grad_check(
                |t| {
                    let mut g = Graph::new();
                    let bound = t.bind(&mut g);
                    let ids: Vec<_> = (0..t.len())
                        .map(|k| bound.node(t.id_of(t.slots()[k].name.as_str()).unwrap()))
                        .collect();
                    let out = build(&mut g, &ids);
                    let grads = g.backward(out);
                    t.accumulate(&bound, &grads);
                    Ok(g.value(out).item())
                },
                &tape,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    /// Scalar `u · m · v` with distinct weights, so every element of `m`
    /// gets its own gradient.
    fn reduce(g: &mut Graph, m: crate::numeric::graph::NodeId) -> crate::numeric::graph::NodeId {
        let (r, c) = g.value(m).shape();
        let u: Vec<f64> = (0..r).map(|k| 0.3 + 0.17 * k as f64).collect();
        let v: Vec<f64> = (0..c).map(|k| -0.4 + 0.23 * k as f64).collect();
        let u = g.leaf(Matrix2D::row_vector(&u));
        let v = g.leaf(Matrix2D::column_vector(&v));
        let um = g.matmul(u, m).unwrap();
        g.matmul(um, v).unwrap()
    }
}
