//! Central finite-difference oracle for the autodiff ops, run in f64.

use nimbus_core::autodiff::{ConvSpec, Graph, Tensor, Var};
use nimbus_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    /// Inputs drawn from `(lo, hi)`; positive ranges keep kinks and
    /// exponentials well conditioned.
    pub range: (f64, f64),
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
        range: (-1.0, 1.0),
    }
}

pub fn cases() -> Vec<Case> {
    let mut v = vec![
        case("add", &[&[2, 3], &[2, 3]], |g, x| g.add(x[0], x[1])),
        case("sub", &[&[2, 3], &[2, 3]], |g, x| g.sub(x[0], x[1])),
        case("mul", &[&[2, 3], &[2, 3]], |g, x| g.mul(x[0], x[1])),
        case("scale", &[&[4]], |g, x| g.scale(x[0], -1.7)),
        case("add_scalar", &[&[4]], |g, x| g.add_scalar(x[0], 0.3)),
        case("exp", &[&[5]], |g, x| g.exp(x[0])),
        case("silu", &[&[7]], |g, x| g.silu(x[0])),
        case("conv2d", &[&[1, 2, 6, 6], &[3, 2, 3, 3]], |g, x| {
            g.conv2d(x[0], x[1], ConvSpec::same(3))
        }),
        case("conv2d_stride", &[&[2, 2, 6, 8], &[2, 2, 3, 3]], |g, x| {
            g.conv2d(x[0], x[1], ConvSpec::spatial(2, 1))
        }),
        case("conv3d", &[&[1, 2, 4, 5, 6], &[2, 2, 2, 3, 3]], |g, x| {
            g.conv3d(x[0], x[1], ConvSpec::same(3).with_time(1, (1, 0)))
        }),
        case(
            "conv3d_stride_t",
            &[&[1, 2, 6, 4, 4], &[2, 2, 4, 1, 1]],
            |g, x| g.conv3d(x[0], x[1], ConvSpec::default().with_time(2, (2, 0))),
        ),
        case("channel_bias", &[&[2, 3, 2, 2], &[3]], |g, x| {
            g.channel_bias(x[0], x[1])
        }),
        case("linear", &[&[3, 4], &[5, 4], &[5]], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        case("linear_nobias", &[&[2, 3], &[2, 3]], |g, x| {
            g.linear(x[0], x[1], None)
        }),
        case("rmsnorm", &[&[2, 4, 3], &[4]], |g, x| {
            g.rmsnorm(x[0], x[1], 1e-6)
        }),
        case("film", &[&[2, 3, 2, 2], &[2, 3], &[2, 3]], |g, x| {
            g.film(x[0], x[1], x[2])
        }),
        case("weighted_mse", &[&[2, 3, 4], &[2, 3, 4]], |g, x| {
            let w = Tensor::new(vec![3, 1], vec![0.5, 1.0, 2.0])?;
            g.weighted_mse(x[0], x[1], &w)
        }),
        case("kl_normal", &[&[2, 5], &[2, 5]], |g, x| {
            g.kl_normal(x[0], x[1])
        }),
        case("reshape", &[&[2, 6]], |g, x| g.reshape(x[0], &[3, 4])),
        case("slice_time", &[&[1, 2, 5, 2, 3]], |g, x| {
            g.slice_time(x[0], 1, 3)
        }),
        case(
            "concat_time",
            &[&[1, 2, 1, 2, 3], &[1, 2, 3, 2, 3]],
            |g, x| g.concat_time(&[x[0], x[1]]),
        ),
        case("time_unfold", &[&[2, 4, 3, 2, 2]], |g, x| {
            g.time_unfold(x[0], 2)
        }),
        case("upsample", &[&[1, 2, 3, 2]], |g, x| g.upsample(x[0], 2)),
        case("avg_pool", &[&[1, 2, 4, 6]], |g, x| g.avg_pool(x[0], 2)),
        case("lowpass", &[&[2, 8, 12]], |g, x| g.lowpass(x[0], 0.5)),
        case("sum", &[&[3, 3]], |g, x| g.sum(x[0])),
        case("mean", &[&[3, 3]], |g, x| g.mean(x[0])),
    ];
    // Wider range so silu sees its saturating negative branch.
    v.iter_mut()
        .filter(|c| c.name == "silu")
        .for_each(|c| c.range = (-3.0, 3.0));
    v
}

fn inputs(case: &Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    case.shapes
        .iter()
        .map(|s| Tensor::from_fn(s, |_| rng.random_range(case.range.0..case.range.1)))
        .collect()
}

/// Scalar objective: the op's output contracted with a fixed random tensor.
fn objective(case: &Case, xs: &[Tensor<f64>], seed: u64) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars = xs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = (case.build)(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let proj = Tensor::from_fn(g.shape(y), |_| rng.random_range(-1.0..1.0));
    let proj = g.constant(proj)?;
    let yp = g.mul(y, proj)?;
    let loss = g.sum(yp)?;
    Ok((g, loss, vars))
}

/// Largest gradient error over all inputs, relative to each input's largest
/// finite-difference gradient entry.
pub fn max_rel_error(case: &Case, seed: u64) -> Result<f64> {
    const H: f64 = 1e-4;
    let xs = inputs(case, seed);
    let (g, loss, vars) = objective(case, &xs, seed)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, x) in xs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input reaches the loss");
        let mut numeric = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let eval = |d: f64| -> Result<f64> {
                let mut p = xs.clone();
                p[i].data_mut()[j] += d;
                let (g, l, _) = objective(case, &p, seed)?;
                Ok(g.value(l).item())
            };
            numeric.push((eval(H)? - eval(-H)?) / (2.0 * H));
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(err / scale);
    }
    Ok(worst)
}
