use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostream_autograd::numeric::{central_difference, relative_error};
use twostream_autograd::{ConvSpec, Graph, Result, Shape, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds `sum(weights * op(inputs))` so every output element gets a distinct
/// cotangent, then checks analytic against numerical gradients.
fn check(
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        g.shape(out)
    };
    let weights = random(&mut rng, probe_shape.0);
    let eval = |xs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = op(&mut g, &vars).unwrap();
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let value = g.value(loss).item();
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (value, gs)
    };
    let (_, analytic) = eval(&inputs);
    let numeric = central_difference(&inputs, STEP, |xs| eval(xs).0, |_, _| false);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect()
}

fn assert_close(errs: Vec<f64>, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < TOL, "{what}: input {i} relative error {e:e}");
    }
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, [2, 3, 4, 4]);
    let b = random(&mut rng, [1, 3, 1, 1]);
    let c = random(&mut rng, [2, 1, 4, 4]);
    assert_close(check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])), "add");
    assert_close(check(vec![a.clone(), c.clone()], |g, v| g.sub(v[0], v[1])), "sub");
    assert_close(check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])), "mul");
    let den = c.map(|v| v.abs() + 0.5);
    assert_close(check(vec![a.clone(), den], |g, v| g.div(v[0], v[1])), "div");
    let s = random(&mut rng, [1, 1, 1, 1]);
    assert_close(check(vec![a.clone(), s], |g, v| g.mul(v[0], v[1])), "scalar mul");
    assert_close(check(vec![a.clone()], |g, v| g.scale(v[0], -1.7)), "scale");
    assert_close(check(vec![a], |g, v| g.offset(v[0], 0.3)), "offset");
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // keep away from kinks at zero and the clamp bounds
    let a = random(&mut rng, [1, 2, 4, 4]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_close(check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2)), "leaky");
    assert_close(check(vec![a.clone()], |g, v| g.relu(v[0])), "relu");
    assert_close(check(vec![a.clone()], |g, v| g.sigmoid(v[0])), "sigmoid");
    assert_close(check(vec![a.clone()], |g, v| g.tanh(v[0])), "tanh");
    assert_close(check(vec![a.clone()], |g, v| g.abs(v[0])), "abs");
    assert_close(check(vec![a.clone()], |g, v| g.square(v[0])), "square");
    let b = a.map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v });
    assert_close(check(vec![b], |g, v| g.clamp(v[0], -0.5, 0.5)), "clamp");
}

#[test]
fn convolution_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        ([2, 3, 6, 6], [4, 3, 3, 3], ConvSpec::same(3, 1)),
        ([1, 2, 8, 8], [3, 2, 4, 4], ConvSpec::new(2, 1, 1)),
        ([2, 2, 7, 7], [2, 2, 3, 3], ConvSpec::same(3, 2)),
        ([2, 4, 4, 4], [3, 4, 1, 1], ConvSpec::new(1, 0, 1)),
        ([1, 2, 8, 8], [2, 2, 5, 5], ConvSpec::new(2, 2, 1)),
    ];
    for (xs, ws, spec) in cases {
        let x = random(&mut rng, xs);
        let w = random(&mut rng, ws);
        let b = random(&mut rng, [1, ws[0], 1, 1]);
        let errs = check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec));
        assert_close(errs, &format!("conv {xs:?} {ws:?} {spec:?}"));
    }
}

#[test]
fn instance_norm_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, [2, 3, 4, 4]);
    let gamma = random(&mut rng, [1, 3, 1, 1]);
    let beta = random(&mut rng, [1, 3, 1, 1]);
    assert_close(
        check(vec![x.clone(), gamma, beta], |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)),
        "instance norm",
    );
    let y = random(&mut rng, [2, 2, 4, 4]);
    assert_close(check(vec![x.clone(), y], |g, v| g.concat(&[v[0], v[1]])), "concat");
    assert_close(check(vec![x.clone()], |g, v| g.upsample2x(v[0])), "upsample");
    assert_close(check(vec![x.clone()], |g, v| g.avg_pool2(v[0])), "avg pool");
    assert_close(check(vec![x.clone()], |g, v| g.max_pool2(v[0])), "max pool");
    assert_close(check(vec![x.clone()], |g, v| g.channel_mean(v[0])), "channel mean");
    assert_close(check(vec![x.clone()], |g, v| g.channel_max(v[0])), "channel max");
    assert_close(check(vec![x.clone()], |g, v| g.spatial_mean(v[0])), "spatial mean");
    assert_close(check(vec![x.clone()], |g, v| g.mean_all(v[0])), "mean all");
    assert_close(check(vec![x.clone()], |g, v| g.gram(v[0])), "gram");
    assert_close(check(vec![x], |g, v| g.reshape(v[0], [2, 1, 6, 8])), "reshape");
}

#[test]
fn shared_subexpressions_accumulate() {
    // y = x * x + upsample(pool(x)) uses x three times.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, [1, 2, 4, 4]);
    let errs = check(vec![x], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        let p = g.avg_pool2(v[0])?;
        let u = g.upsample2x(p)?;
        g.add(sq, u)
    });
    assert_close(errs, "fan-out");
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full([1, 1, 2, 2], 2.0));
    let c = g.constant(Tensor::full([1, 1, 2, 2], 3.0));
    let p = g.mul(a, c).unwrap();
    let l = g.sum_all(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(a).unwrap().data(), &[3.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros([1, 1, 2, 2]));
    assert!(g.backward(a).is_err());
    let b = g.param(Tensor::zeros([1, 2, 2, 2]));
    assert!(g.add(a, b).is_ok());
    let c = g.param(Tensor::zeros(Shape::new(1, 3, 3, 2)));
    assert!(g.add(b, c).is_err());
}
