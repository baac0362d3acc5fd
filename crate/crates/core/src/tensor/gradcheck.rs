use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorError, Var};

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Per-coordinate step is `rel_step * (1 + |x_i|)`.
    pub rel_step: f64,
    /// Seeds the random projection of non-scalar outputs and coordinate sampling.
    pub seed: u64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            rel_step: 1e-6,
            seed: 0,
            max_coords: None,
        }
    }
}

/// Compare tape gradients of `f` against central finite differences.
///
/// `f` receives one grad-requiring leaf per entry of `inputs`. Its output is
/// reduced to a scalar by a fixed random projection `sum(out * r)`, so any
/// output shape is allowed. Returns the maximum over checked coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let projection = Tensor::from_fn(tape.shape(out), |_| rng.random_range(0.5..1.5));
    let r = tape.constant(projection.clone());
    let weighted = tape.mul(out, r)?;
    let loss = tape.sum(weighted)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("leaf gradients are populated"))
        .collect();

    let objective = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let value: f64 = tape
            .value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum();
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: "grad_check",
                node: out.id(),
            });
        }
        Ok(value)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = input.data()[j];
            let h = opts.rel_step * (1.0 + x0.abs());
            work[i].data_mut()[j] = x0 + h;
            let plus = objective(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = objective(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::ConvGeom;
    use crate::tensor::Shape;

    fn uniform(shape: Shape, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    #[test]
    fn sigmoid_gradient() {
        let x = uniform(Shape::new(1, 2, 3, 3), -3.0, 3.0, 1);
        let err = grad_check(|t, v| t.sigmoid(v[0]), &[x], GradCheckOptions::default()).unwrap();
        assert!(err <= 1e-7, "{err}");
    }

    #[test]
    fn conv_gradient() {
        let x = uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, 2);
        let w = uniform(Shape::new(3, 2, 3, 3), -1.0, 1.0, 3);
        let err = grad_check(
            |t, v| t.conv2d(v[0], v[1], None, ConvGeom::new(1, 1, 1)),
            &[x, w],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn bilinear_upsample_gradient() {
        let x = uniform(Shape::new(1, 1, 3, 4), -1.0, 1.0, 4);
        let err = grad_check(|t, v| t.bilinear_resize(v[0], 6, 8), &[x], GradCheckOptions::default())
            .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu at exactly zero on a kinked input: finite differences see slope 1/2.
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let err = grad_check(|t, v| t.relu(v[0]), &[x], GradCheckOptions::default()).unwrap();
        assert!(err > 0.1);
    }
}
