//! Finite-difference gradient checks for every autodiff primitive.
//!
//! Central differences with h = 1e-3 at 32-bit precision; agreement within
//! relative 1e-2 or absolute 1e-4 on each element. The oracle rebuilds the
//! graph per perturbed element and never touches the backward path it
//! verifies.

use rand::Rng;
use urelab_core::autodiff::{Graph, Padding, TensorId};
use urelab_core::seeds;

const REL_TOL: f64 = 1e-2;
const ABS_TOL: f64 = 1e-4;
const H: f32 = 1e-3;

/// Check analytic gradients of `build` (data -> scalar loss) at `data`.
fn gradcheck(name: &str, data: &[f32], shape: &[usize], build: impl Fn(&mut Graph, TensorId) -> TensorId) {
    assert!(data.len() <= 64, "{name}: keep oracle shapes small");
    let mut g = Graph::new();
    let x = g.leaf(data.to_vec(), shape, true);
    let loss = build(&mut g, x);
    assert_eq!(g.data(loss).len(), 1, "{name}: loss must be scalar");
    g.backward(loss).expect("backward succeeds");
    let analytic: Vec<f32> = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; data.len()]);

    for i in 0..data.len() {
        let eval = |delta: f32| -> f64 {
            let mut d = data.to_vec();
            d[i] += delta;
            let mut g = Graph::new();
            let x = g.leaf(d, shape, false);
            let loss = build(&mut g, x);
            g.data(loss)[0] as f64
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H as f64);
        let an = analytic[i] as f64;
        let tol = ABS_TOL.max(REL_TOL * fd.abs().max(an.abs()));
        assert!(
            (fd - an).abs() <= tol,
            "{name}: element {i}: finite diff {fd} vs analytic {an}"
        );
    }
}

fn random_data(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Scalar-reduce an arbitrary tensor with a fixed random mask.
fn reduce(g: &mut Graph, id: TensorId, seed: u64) -> TensorId {
    let n = g.data(id).len();
    let mut rng = seeds::rng(seed);
    let mask: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    g.masked_sum(id, &mask).unwrap()
}

#[test]
fn all_primitives_pass_finite_difference_checks() {
    let start = std::time::Instant::now();
    let mut rng = seeds::rng(20240);
    let mut cases = 0usize;

    // conv2d w.r.t. input, kernel, and bias; both paddings.
    for &padding in &[Padding::Same, Padding::Valid] {
        for trial in 0..3 {
            let (n, c, f, k) = (1 + trial % 2, 1 + trial % 2, 1 + (trial + 1) % 2, 3);
            let (h, w) = (4, 4);
            let x_data = random_data(n * c * h * w, &mut rng);
            let w_data = random_data(f * c * k * k, &mut rng);
            let b_data = random_data(f, &mut rng);
            let seed = 100 + trial as u64;

            gradcheck("conv2d/x", &x_data, &[n, c, h, w], |g, x| {
                let wk = g.constant(w_data.clone(), &[f, c, k, k]);
                let b = g.constant(b_data.clone(), &[f]);
                let y = g.conv2d(x, wk, b, padding).unwrap();
                reduce(g, y, seed)
            });
            cases += 1;
            gradcheck("conv2d/w", &w_data, &[f, c, k, k], |g, wk| {
                let x = g.constant(x_data.clone(), &[n, c, h, w]);
                let b = g.constant(b_data.clone(), &[f]);
                let y = g.conv2d(x, wk, b, padding).unwrap();
                reduce(g, y, seed)
            });
            cases += 1;
            gradcheck("conv2d/b", &b_data, &[f], |g, b| {
                let x = g.constant(x_data.clone(), &[n, c, h, w]);
                let wk = g.constant(w_data.clone(), &[f, c, k, k]);
                let y = g.conv2d(x, wk, b, padding).unwrap();
                reduce(g, y, seed)
            });
            cases += 1;
        }
    }

    // dense w.r.t. x, w, b.
    for trial in 0..3 {
        let (n, d, k) = (1 + trial, 2 + trial, 1 + trial);
        let x_data = random_data(n * d, &mut rng);
        let w_data = random_data(d * k, &mut rng);
        let b_data = random_data(k, &mut rng);
        let seed = 200 + trial as u64;
        gradcheck("dense/x", &x_data, &[n, d], |g, x| {
            let w = g.constant(w_data.clone(), &[d, k]);
            let b = g.constant(b_data.clone(), &[k]);
            let y = g.dense(x, w, b).unwrap();
            reduce(g, y, seed)
        });
        cases += 1;
        gradcheck("dense/w", &w_data, &[d, k], |g, w| {
            let x = g.constant(x_data.clone(), &[n, d]);
            let b = g.constant(b_data.clone(), &[k]);
            let y = g.dense(x, w, b).unwrap();
            reduce(g, y, seed)
        });
        cases += 1;
        gradcheck("dense/b", &b_data, &[k], |g, b| {
            let x = g.constant(x_data.clone(), &[n, d]);
            let w = g.constant(w_data.clone(), &[d, k]);
            let y = g.dense(x, w, b).unwrap();
            reduce(g, y, seed)
        });
        cases += 1;
    }

    // relu: offset inputs away from the kink so finite differences are
    // well-defined.
    for trial in 0..2 {
        let n = 12 + trial * 7;
        let data: Vec<f32> = random_data(n, &mut rng)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        gradcheck("relu", &data, &[n], |g, x| {
            let y = g.relu(x).unwrap();
            reduce(g, y, 300 + trial as u64)
        });
        cases += 1;
    }

    // pools.
    for trial in 0..2 {
        let (n, c) = (1 + trial, 2);
        let data = random_data(n * c * 4 * 4, &mut rng);
        gradcheck("avg_pool", &data, &[n, c, 4, 4], |g, x| {
            let y = g.avg_pool(x, 2).unwrap();
            reduce(g, y, 400 + trial as u64)
        });
        cases += 1;
        gradcheck("global_avg_pool", &data, &[n, c, 4, 4], |g, x| {
            let y = g.global_avg_pool(x).unwrap();
            reduce(g, y, 410 + trial as u64)
        });
        cases += 1;
    }

    // softmax cross-entropy w.r.t. logits.
    for trial in 0..3 {
        let (n, k) = (2 + trial, 3 + trial);
        let data = random_data(n * k, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        gradcheck("softmax_cross_entropy", &data, &[n, k], |g, x| {
            g.softmax_cross_entropy(x, &labels).unwrap()
        });
        cases += 1;
    }

    // elementwise add / mul / scale / reshape / masked_sum.
    for trial in 0..2 {
        let n = 8 + trial * 5;
        let a_data = random_data(n, &mut rng);
        let b_data = random_data(n, &mut rng);
        gradcheck("add", &a_data, &[n], |g, a| {
            let b = g.constant(b_data.clone(), &[n]);
            let y = g.add(a, b).unwrap();
            reduce(g, y, 500 + trial as u64)
        });
        cases += 1;
        gradcheck("mul", &a_data, &[n], |g, a| {
            let b = g.constant(b_data.clone(), &[n]);
            let y = g.mul(a, b).unwrap();
            reduce(g, y, 510 + trial as u64)
        });
        cases += 1;
        gradcheck("mul/self", &a_data, &[n], |g, a| {
            let y = g.mul(a, a).unwrap();
            reduce(g, y, 515 + trial as u64)
        });
        cases += 1;
        gradcheck("scale", &a_data, &[n], |g, a| {
            let y = g.scale(a, -1.7).unwrap();
            reduce(g, y, 520 + trial as u64)
        });
        cases += 1;
        gradcheck("reshape", &a_data, &[n], |g, a| {
            let y = g.reshape(a, &[1, n]).unwrap();
            reduce(g, y, 530 + trial as u64)
        });
        cases += 1;
    }

    assert!(cases >= 20, "only {cases} shapes checked");
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "gradcheck took {elapsed:?}");
    println!("gradcheck: {cases} shapes in {elapsed:?}");
}

/// Every parameter gradient of a small two-block residual net matches
/// central finite differences through the full forward pass.
#[test]
fn residual_net_parameters_pass_finite_difference_checks() {
    use urelab_core::model::{ResidualNet, ResidualNetConfig};
    use urelab_core::spectral::ImageTensor;

    let cfg = ResidualNetConfig {
        n_classes: 2,
        n_blocks: 2,
        channels: 2,
        image_h: 4,
        image_w: 4,
        stem_pool: 2,
        stochastic: false,
        sde_sigma: 0.0,
        dt: 1.0,
        mc_samples: 1,
        train_noise: false,
    };
    let mut net = ResidualNet::init(cfg, 17).unwrap();
    // Random (not zero-initialized) second convs and head so every
    // parameter influences the loss.
    let mut rng = seeds::rng(18);
    for p in net.params_mut() {
        if p.data.iter().all(|&v| v == 0.0) {
            for v in p.data.iter_mut() {
                *v = rng.gen_range(-0.4f32..0.4);
            }
        }
    }

    let mut img_rng = seeds::rng(19);
    let images: Vec<ImageTensor> = (0..2)
        .map(|_| {
            let values: Vec<f32> = (0..16).map(|_| img_rng.gen_range(0.0..1.0)).collect();
            ImageTensor::new(values, 4, 4).unwrap()
        })
        .collect();
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let labels = vec![0usize, 1];

    let loss_of = |net: &ResidualNet| -> f64 {
        let (data, n) = net.batch_tensor(&refs).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(data, &[n, 1, 4, 4], false);
        let trace = net.forward_graph(&mut g, x, None, false).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits, &labels).unwrap();
        g.data(loss)[0] as f64
    };

    // Analytic gradients.
    let analytic: Vec<Vec<f32>> = {
        let (data, n) = net.batch_tensor(&refs).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(data, &[n, 1, 4, 4], false);
        let trace = net.forward_graph(&mut g, x, None, true).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits, &labels).unwrap();
        g.backward(loss).unwrap();
        trace
            .param_ids
            .iter()
            .zip(net.params())
            .map(|(&id, p)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    };

    let n_params = net.params().len();
    for pi in 0..n_params {
        let numel = net.params()[pi].numel();
        for i in 0..numel {
            let probe = |delta: f32| -> f64 {
                let mut net2 = net.clone();
                net2.params_mut()[pi].data[i] += delta;
                loss_of(&net2)
            };
            let fd = (probe(H) - probe(-H)) / (2.0 * H as f64);
            let an = analytic[pi][i] as f64;
            let tol = ABS_TOL.max(REL_TOL * fd.abs().max(an.abs()));
            let name = &net.params()[pi].name;
            assert!(
                (fd - an).abs() <= tol,
                "{name}[{i}]: finite diff {fd} vs analytic {an}"
            );
        }
    }
}
