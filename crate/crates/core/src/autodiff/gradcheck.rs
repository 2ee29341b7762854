use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::embeddings::EmbeddingTable;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks every parameter coordinate, and every embedding row the loss
/// touches, against `(f(x + eps) - f(x - eps)) / (2 eps)`.
///
/// `build` records the scalar loss on a fresh graph each time it is called.
pub fn grad_check<F>(params: &ParamSet, table: Option<&EmbeddingTable>, eps: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph) -> Var,
{
    let eval = |p: &ParamSet, t: Option<&EmbeddingTable>| {
        let mut g = match t {
            Some(t) => Graph::with_embeddings(p, t),
            None => Graph::new(p),
        };
        let root = build(&mut g);
        g.scalar(root)
    };

    let analytic = {
        let mut g = match table {
            Some(t) => Graph::with_embeddings(params, t),
            None => Graph::new(params),
        };
        let root = build(&mut g);
        g.backward(root)
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let mut record = |name: &str, i: usize, a: f64, n: f64| {
        let err = relative_error(a, n);
        report.coordinates += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.to_string(), i));
        }
    };

    let mut probe = params.clone();
    for (id, tensor) in params.iter() {
        let grad = analytic.param(id);
        for i in 0..tensor.data.len() {
            let orig = tensor.data[i];
            probe.get_mut(id).data[i] = orig + eps;
            let plus = eval(&probe, table);
            probe.get_mut(id).data[i] = orig - eps;
            let minus = eval(&probe, table);
            probe.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            record(&tensor.name, i, grad.map_or(0.0, |g| g[i]), numeric);
        }
    }

    if let Some(table) = table {
        let mut probe = table.clone();
        for (&row, grad) in &analytic.embeddings {
            for (i, &a) in grad.iter().enumerate() {
                let orig = table.row(row)[i];
                probe.update_row(row, |r| r[i] = orig + eps);
                let plus = eval(params, Some(&probe));
                probe.update_row(row, |r| r[i] = orig - eps);
                let minus = eval(params, Some(&probe));
                probe.update_row(row, |r| r[i] = orig);
                record(&format!("embedding[{row}]"), i, a, (plus - minus) / (2.0 * eps));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Shape;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = x^T A x with a fixed symmetric A
        let mut params = ParamSet::new();
        let x = params.add("x", Shape::Vector(3), vec![0.3, -1.2, 2.0]);
        let report = grad_check(&params, None, 1e-5, |g| {
            let a = g.input(vec![2.0, 0.5, 0.0]);
            let b = g.input(vec![0.5, 1.0, -0.3]);
            let c = g.input(vec![0.0, -0.3, 3.0]);
            let xv = g.param(x);
            let ax = {
                let r0 = g.dot(a, xv);
                let r1 = g.dot(b, xv);
                let r2 = g.dot(c, xv);
                g.concat(&[r0, r1, r2])
            };
            g.dot(xv, ax)
        });
        assert_eq!(report.coordinates, 3);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }
}
