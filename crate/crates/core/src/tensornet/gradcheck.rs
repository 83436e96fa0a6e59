use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step [`FD_STEP`], elementwise over every input.
///
/// Non-scalar outputs are reduced as `Σ r ⊙ out` with fixed random weights
/// `r`, so every output entry contributes. Points where the function has a
/// kink (ReLU at exactly 0) are not differentiable and must be avoided by the
/// caller.
pub fn grad_check<F>(f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone(), want_grad)).collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
        let loss = if n == 1 {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let wv = g.constant(Tensor::new(shape, w)?);
            let p = g.hadamard(out, wv)?;
            g.sum(p)
        };
        let value = g.data(loss)[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    let mut xs = inputs.to_vec();
    for (k, a_k) in analytic.iter().enumerate() {
        for i in 0..xs[k].numel() {
            let orig = xs[k].data[i];
            xs[k].data[i] = orig + FD_STEP;
            let (fp, _) = eval(&xs, false)?;
            xs[k].data[i] = orig - FD_STEP;
            let (fm, _) = eval(&xs, false)?;
            xs[k].data[i] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = a_k[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    const TOL: f64 = 1e-4;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    /// Random values kept away from ReLU's kink.
    fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        let mut t = rand_t(rng, r, c);
        for x in &mut t.data {
            if x.abs() < 0.05 {
                *x += 0.1f64.copysign(*x);
            }
        }
        t
    }

    fn check_all_seeds<F>(name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
    {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = make(&mut rng);
            let rep = grad_check(f, &inputs, TOL).unwrap();
            assert!(rep.passed(), "{name} seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn matmul_3x4_4x2() {
        check_all_seeds(
            "matmul",
            |r| vec![rand_t(r, 3, 4), rand_t(r, 4, 2)],
            |g, v| g.matmul(v[0], v[1]),
        );
    }

    #[test]
    fn elementwise_ops() {
        check_all_seeds(
            "add/sub/hadamard/scale",
            |r| vec![rand_t(r, 2, 3), rand_t(r, 2, 3)],
            |g, v| {
                let a = g.add(v[0], v[1])?;
                let s = g.sub(a, v[1])?;
                let h = g.hadamard(s, v[1])?;
                Ok(g.scale(h, -0.7))
            },
        );
        check_all_seeds("tanh", |r| vec![rand_t(r, 3, 3)], |g, v| Ok(g.tanh(v[0])));
        check_all_seeds("square", |r| vec![rand_t(r, 3, 3)], |g, v| Ok(g.square(v[0])));
        check_all_seeds("relu", |r| vec![away_from_zero(r, 4, 3)], |g, v| Ok(g.relu(v[0])));
    }

    #[test]
    fn relu_at_kink_uses_zero_derivative() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 1, vec![0.0]).unwrap(), true);
        let y = g.relu(x);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn broadcast_and_linear() {
        check_all_seeds(
            "linear",
            |r| vec![rand_t(r, 4, 3), rand_t(r, 3, 2), rand_t(r, 1, 2)],
            |g, v| g.linear(v[0], v[1], v[2]),
        );
        check_all_seeds(
            "mul_row",
            |r| vec![rand_t(r, 4, 3), rand_t(r, 1, 3)],
            |g, v| g.mul_row(v[0], v[1]),
        );
    }

    #[test]
    fn batchnorm_both_modes() {
        check_all_seeds(
            "batchnorm_train",
            |r| vec![rand_t(r, 5, 3), rand_t(r, 1, 3), rand_t(r, 1, 3)],
            |g, v| Ok(g.batchnorm_train(v[0], v[1], v[2])?.0),
        );
        check_all_seeds(
            "batchnorm_eval",
            |r| vec![rand_t(r, 5, 3), rand_t(r, 1, 3), rand_t(r, 1, 3)],
            |g, v| g.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0]),
        );
    }

    #[test]
    fn conv1d_pointwise_and_wide() {
        check_all_seeds(
            "conv1d k=1",
            |r| vec![rand_t(r, 5, 3), rand_t(r, 3, 4), rand_t(r, 1, 4)],
            |g, v| g.conv1d(v[0], v[1], v[2], 1),
        );
        check_all_seeds(
            "conv1d k=3",
            |r| vec![rand_t(r, 6, 2), rand_t(r, 6, 3), rand_t(r, 1, 3)],
            |g, v| g.conv1d(v[0], v[1], v[2], 3),
        );
    }

    #[test]
    fn pooling_ops() {
        check_all_seeds("mean_pool 0", |r| vec![rand_t(r, 5, 3)], |g, v| g.mean_pool(v[0], 0));
        check_all_seeds("mean_pool 1", |r| vec![rand_t(r, 5, 3)], |g, v| g.mean_pool(v[0], 1));
        check_all_seeds("segment_mean", |r| vec![rand_t(r, 6, 2)], |g, v| g.segment_mean(v[0], &[2, 3, 1]));
        check_all_seeds(
            "gather_mean",
            |r| vec![rand_t(r, 4, 3)],
            |g, v| g.gather_mean(v[0], Arc::new(vec![vec![0], vec![0, 1], vec![1, 2, 3], vec![3, 1]])),
        );
    }

    #[test]
    fn softmax_both_axes() {
        check_all_seeds("softmax 0", |r| vec![rand_t(r, 4, 3)], |g, v| g.softmax(v[0], 0));
        check_all_seeds("softmax 1", |r| vec![rand_t(r, 4, 3)], |g, v| g.softmax(v[0], 1));
    }

    #[test]
    fn structural_ops() {
        check_all_seeds(
            "concat",
            |r| vec![rand_t(r, 3, 2), rand_t(r, 3, 4)],
            |g, v| {
                let c = g.concat_cols(&[v[0], v[1], v[0]])?;
                let t = g.transpose(c)?;
                let s = g.slice_rows(t, 1, 6)?;
                g.reshape(s, vec![3, 5])
            },
        );
        check_all_seeds(
            "concat_rows/gather_rows",
            |r| vec![rand_t(r, 2, 3), rand_t(r, 1, 3)],
            |g, v| {
                let c = g.concat_rows(&[v[0], v[1]])?;
                g.gather_rows(c, Arc::new(vec![2, 0, 2, 1]))
            },
        );
    }

    #[test]
    fn cosine_and_mse() {
        check_all_seeds(
            "cosine",
            |r| vec![rand_t(r, 3, 4), rand_t(r, 3, 4)],
            |g, v| g.cosine_similarity(v[0], v[1]),
        );
        check_all_seeds(
            "mse",
            |r| vec![rand_t(r, 5, 1), rand_t(r, 5, 1)],
            |g, v| g.mse(v[0], v[1]),
        );
    }

    #[test]
    fn composite_graph() {
        check_all_seeds(
            "composite",
            |r| vec![rand_t(r, 6, 3), rand_t(r, 3, 4), rand_t(r, 1, 4), rand_t(r, 4, 2)],
            |g, v| {
                let h = g.conv1d(v[0], v[1], v[2], 1)?;
                let t = g.tanh(h);
                let p = g.segment_mean(t, &[4, 2])?;
                let z = g.matmul(p, v[3])?;
                let s = g.softmax(z, 1)?;
                let a = g.slice_rows(s, 0, 1)?;
                let b = g.slice_rows(s, 1, 2)?;
                g.cosine_similarity(a, b)
            },
        );
    }

    #[test]
    fn report_flags_a_wrong_gradient() {
        // stop-gradient makes the analytic derivative wrong on purpose
        let rep = grad_check(
            |g, v| {
                let d = g.detach(v[0]);
                g.hadamard(d, v[0])
            },
            &[Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()],
            TOL,
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.checked, 2);
    }
}
