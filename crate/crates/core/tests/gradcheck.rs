//! Central-difference checks of every differentiable op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdiff_core::{Graph, Result, Tensor, Var};

type Op = dyn for<'g> Fn(&[Var<'g, f64>]) -> Result<Var<'g, f64>>;

/// Reduces the op output to a scalar with fixed random weights, then compares
/// analytic and numerical gradients for every input element.
fn check(name: &str, inputs: &[Tensor<f64>], op: &Op) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>) {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = op(&vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(&out.shape()));
        let loss = out.dot_const(&w).unwrap();
        (loss.value().data()[0], out.value().as_ref().clone())
    };
    let (_, out) = eval(inputs, None);
    let weights = Tensor::randn(out.shape(), &mut rng);

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = op(&vars).unwrap().dot_const(&weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "{name}: input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn elementwise_ops() {
    let a = randn(&[2, 3, 2, 2], 1);
    let b = randn(&[2, 3, 2, 2], 2);
    check("add", &[a.clone(), b.clone()], &|v| v[0].add(v[1]));
    check("sub", &[a.clone(), b.clone()], &|v| v[0].sub(v[1]));
    check("mul", &[a.clone(), b.clone()], &|v| v[0].mul(v[1]));
    check("scale", std::slice::from_ref(&a), &|v| v[0].scale(-1.7));
    check("silu", std::slice::from_ref(&a), &|v| v[0].silu());
    check("mse", &[a.clone(), b.clone()], &|v| v[0].mse(v[1]));
    check("sum", &[a], &|v| v[0].sum());
}

#[test]
fn channel_bias_and_resampling() {
    let x = randn(&[2, 3, 2, 3], 3);
    let bias = randn(&[2, 3], 4);
    check("add_channel_bias", &[x.clone(), bias], &|v| v[0].add_channel_bias(v[1]));
    check("upsample2x", std::slice::from_ref(&x), &|v| v[0].upsample2x());
    let y = randn(&[2, 2, 2, 3], 5);
    check("concat_channels", &[x, y], &|v| v[0].concat_channels(v[1]));
}

#[test]
fn convolutions() {
    let x = randn(&[2, 3, 5, 4], 6);
    let w3 = randn(&[2, 3, 3, 3], 7);
    let w1 = randn(&[4, 3, 1, 1], 8);
    let b2 = randn(&[2], 9);
    let b4 = randn(&[4], 10);
    check("conv3x3", &[x.clone(), w3.clone(), b2.clone()], &|v| v[0].conv2d(v[1], Some(v[2]), 1, 1));
    check("conv3x3/s2", &[x.clone(), w3.clone(), b2], &|v| v[0].conv2d(v[1], Some(v[2]), 2, 1));
    check("conv3x3/valid", &[x.clone(), w3], &|v| v[0].conv2d(v[1], None, 1, 0));
    check("conv1x1", &[x, w1, b4], &|v| v[0].conv2d(v[1], Some(v[2]), 1, 0));
}

#[test]
fn linear_and_gather() {
    let x = randn(&[3, 4], 11);
    let w = randn(&[5, 4], 12);
    let b = randn(&[5], 13);
    check("linear", &[x, w, b], &|v| v[0].linear(v[1], v[2]));
    let table = randn(&[6, 3], 14);
    check("gather_rows", &[table], &|v| v[0].gather_rows(&[4, 1, 4]));
}

#[test]
fn normalizations() {
    let x = randn(&[2, 4, 3, 2], 15);
    let gamma = randn(&[4], 16);
    let beta = randn(&[4], 17);
    check("group_norm", &[x.clone(), gamma.clone(), beta.clone()], &|v| {
        v[0].group_norm(2, v[1], v[2], 1e-5)
    });
    check("group_norm/1", &[x.clone(), gamma, beta], &|v| v[0].group_norm(1, v[1], v[2], 1e-5));
    check("channel_norm", &[x], &|v| v[0].channel_norm(1e-6));
}

#[test]
fn spectral_filter() {
    let x = randn(&[2, 2, 4, 3], 18);
    let re = randn(&[2, 4, 3], 19);
    let im = randn(&[2, 4, 3], 20);
    check("spectral_filter", &[x, re, im], &|v| v[0].spectral_filter(v[1], v[2]));
}
