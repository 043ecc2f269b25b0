use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

/// Central-difference gradient check settings.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f32,
    pub tol: f32,
    /// Check at most this many coordinates per input (sampled without replacement).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Use the fourth-order five-point central stencil instead of the
    /// two-point one. Its O(h⁴) truncation allows a larger `h`, which keeps
    /// f32 rounding noise in deep graphs below the tolerance.
    pub five_point: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-3,
            max_coords: None,
            seed: 0,
            five_point: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst error per input, `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: Vec<f32>,
    /// Coordinate at which the worst error occurred, per input.
    pub worst_coord: Vec<usize>,
    pub coords_checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f32 {
        self.max_rel_err.iter().copied().fold(0.0, f32::max)
    }
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var), E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(out).to_vec()).into());
    }
    Ok((g, vars, out))
}

/// Compares the graph's analytic gradients of the scalar `f(inputs)` with
/// central finite differences.
///
/// The unit floor in the error denominator makes small gradients compare
/// absolutely; f32 forward passes cannot resolve them more finely.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], opts: &GradCheck) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let (mut g, vars, out) = evaluate(&f, inputs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut perturbed = inputs.to_vec();
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut worst_coord = Vec::with_capacity(inputs.len());
    let mut coords_checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(n) if n < input.len() => {
                let mut c = sample(&mut rng, input.len(), n).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..input.len()).collect(),
        };
        let mut worst = 0.0f32;
        let mut at = 0;
        for &c in &coords {
            let orig = input.data()[c];
            let mut at_offset = |k: f32| -> Result<f64, E> {
                perturbed[which].data_mut()[c] = orig + k * opts.h;
                let (g, _, out) = evaluate(&f, &perturbed, false)?;
                Ok(g.value(out).item() as f64)
            };
            let h = opts.h as f64;
            let numeric = if opts.five_point {
                let (p2, p1, m1, m2) = (at_offset(2.0)?, at_offset(1.0)?, at_offset(-1.0)?, at_offset(-2.0)?);
                (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
            } else {
                (at_offset(1.0)? - at_offset(-1.0)?) / (2.0 * h)
            } as f32;
            perturbed[which].data_mut()[c] = orig;
            let a = analytic[which][c];
            let err = (a - numeric).abs() / 1f32.max(a.abs()).max(numeric.abs());
            if err > worst || err.is_nan() {
                worst = if err.is_nan() { f32::INFINITY } else { err };
                at = c;
            }
        }
        coords_checked += coords.len();
        max_rel_err.push(worst);
        worst_coord.push(at);
    }
    let passed = max_rel_err.iter().all(|&e| e <= opts.tol);
    Ok(GradCheckReport {
        max_rel_err,
        worst_coord,
        coords_checked,
        passed,
    })
}
