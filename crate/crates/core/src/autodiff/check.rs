use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU even at the smallest step.
    pub skipped: usize,
}

/// Compare reverse-mode gradients of `f` at `point` with fourth-order
/// central finite differences at steps `h` and `2h`.
///
/// Relative error per coordinate is `|a - n| / max(1e-8, |a| + |n|)`. When a
/// perturbation changes the ReLU activation pattern the step is shrunk; if
/// that keeps happening the coordinate is skipped and counted.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let build = |inputs: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        g.track_kinks();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (g0, vars, loss) = build(point)?;
    let grads = g0.backward(loss)?;
    let base_pattern = g0.kink_pattern().unwrap_or_default().to_vec();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor> = point.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; point[ti].len()]);
        for j in 0..point[ti].len() {
            let x0 = point[ti].data()[j];
            let mut numeric = None;
            let mut step = h;
            for _ in 0..4 {
                let mut eval = |x: f64| -> Result<(f64, bool)> {
                    work[ti].data_mut()[j] = x;
                    let (g, _, l) = build(&work)?;
                    let same = g.kink_pattern().unwrap_or_default() == base_pattern.as_slice();
                    Ok((g.value(l).item(), same))
                };
                let (f1, s1) = eval(x0 + step)?;
                let (fm1, sm1) = eval(x0 - step)?;
                let (f2, s2) = eval(x0 + 2.0 * step)?;
                let (fm2, sm2) = eval(x0 - 2.0 * step)?;
                if s1 && sm1 && s2 && sm2 {
                    numeric = Some((8.0 * (f1 - fm1) - (f2 - fm2)) / (12.0 * step));
                    break;
                }
                step /= 10.0;
            }
            work[ti].data_mut()[j] = x0;
            let Some(n) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic[j];
            let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, j));
            }
        }
    }
    Ok(report)
}
