use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// How Hessian-vector products are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    /// Differentiate the recorded backward pass a second time.
    Exact,
    /// `(∇L(θ + εu) − ∇L(θ − εu)) / 2ε · ‖v‖` with `u = v / ‖v‖`.
    FiniteDifference { eps: f64 },
}

impl Default for HvpMode {
    /// `Exact`, unless the crate is built with the `fd-hvp` feature.
    fn default() -> Self {
        if cfg!(feature = "fd-hvp") {
            HvpMode::FiniteDifference { eps: 1e-4 }
        } else {
            HvpMode::Exact
        }
    }
}

fn check_shapes(params: &[Tensor], other: &[Tensor], what: &str) -> Result<()> {
    if params.len() != other.len()
        || params.iter().zip(other).any(|(p, v)| p.shape() != v.shape())
    {
        return Err(Error::Dimension(format!(
            "{what} does not match the parameter shapes"
        )));
    }
    Ok(())
}

fn grads_or_zero(g: &Graph, params: &[Tensor], grads: Vec<Option<Var>>) -> Vec<Tensor> {
    grads
        .into_iter()
        .zip(params)
        .map(|(gv, p)| match gv {
            Some(v) => g.value(v).clone(),
            None => Tensor::zeros(p.shape()),
        })
        .collect()
}

/// Loss value and gradient of `loss_fn` at `params`.
pub fn gradient<F>(loss_fn: &F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = loss_fn(&mut g, &vars)?;
    let value = g.value(loss).item()?;
    let grads = g.grad(loss, &vars, false)?;
    Ok((value, grads_or_zero(&g, params, grads)))
}

/// Hessian of `loss_fn` at `params` applied to `vector`.
pub fn hvp<F>(loss_fn: F, params: &[Tensor], vector: &[Tensor], mode: HvpMode) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_shapes(params, vector, "hvp vector")?;
    match mode {
        HvpMode::Exact => {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let loss = loss_fn(&mut g, &vars)?;
            let first = g.grad(loss, &vars, true)?;
            hvp_on_graph(&mut g, &vars, &first, params, vector)
        }
        HvpMode::FiniteDifference { eps } => {
            if eps <= 0.0 {
                return Err(Error::Parameter(format!("finite-difference step {eps}")));
            }
            let norm = super::norm_sq_all(vector).sqrt();
            if norm == 0.0 {
                return Ok(params.iter().map(|p| Tensor::zeros(p.shape())).collect());
            }
            let shifted = |sign: f64| -> Result<Vec<Tensor>> {
                let moved = params
                    .iter()
                    .zip(vector)
                    .map(|(p, v)| {
                        let mut q = p.clone();
                        q.axpy(sign * eps / norm, v)?;
                        Ok(q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(gradient(&loss_fn, &moved)?.1)
            };
            let plus = shifted(1.0)?;
            let minus = shifted(-1.0)?;
            let scale = norm / (2.0 * eps);
            Ok(plus
                .into_iter()
                .zip(minus)
                .map(|(mut a, b)| {
                    a.axpy(-1.0, &b).expect("same shapes");
                    a.map(|x| x * scale)
                })
                .collect())
        }
    }
}

/// Second backward pass over a graph whose first-order gradients `first`
/// (w.r.t. `vars`) were recorded with `create_graph`: returns `H · vector`.
pub(crate) fn hvp_on_graph(
    g: &mut Graph,
    vars: &[Var],
    first: &[Option<Var>],
    params: &[Tensor],
    vector: &[Tensor],
) -> Result<Vec<Tensor>> {
    check_shapes(params, vector, "hvp vector")?;
    let mut total: Option<Var> = None;
    for (gv, v) in first.iter().zip(vector) {
        let Some(gv) = *gv else { continue };
        if !g.requires_grad(gv) {
            continue;
        }
        let c = g.constant(v.clone());
        let d = g.dot(gv, c)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    let Some(total) = total else {
        return Ok(params.iter().map(|p| Tensor::zeros(p.shape())).collect());
    };
    let second = g.grad(total, vars, false)?;
    Ok(grads_or_zero(g, params, second))
}
