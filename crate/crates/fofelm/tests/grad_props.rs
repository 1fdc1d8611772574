//! Finite-difference verification of every differentiable tape operation,
//! plus end-to-end gradient checks through whole models.

use fofelm::arch::{build_model, ArchitectureConfig, GraphRun, Variant};
use fofelm::fofe::{context_bags, frame};
use fofelm::tensor::{seeded_rng, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// |a - n| ≤ tol·max(1, |a|, |n|): relative where gradients are O(1)+,
/// absolute below that.
fn close(a: f64, n: f64, tol: f64) -> bool {
    (a - n).abs() <= tol * a.abs().max(n.abs()).max(1.0)
}

/// Check analytic gradients of `build` against central finite differences.
/// `build` must construct the same graph for any parameter values.
fn finite_diff_check(
    params: &[Tensor],
    eps: f64,
    tol: f64,
    build: &dyn Fn(&mut Tape, &[Tensor]) -> (Var, Vec<Var>),
) {
    let mut tape = Tape::new();
    let mut tracked = params.to_vec();
    for t in &mut tracked {
        t.set_requires_grad(true);
    }
    let (loss, leaves) = build(&mut tape, &tracked);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|&v| tape.grad(v).expect("tracked leaf").to_vec())
        .collect();

    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.len() {
            let mut probe = |delta: f64| -> f64 {
                let mut perturbed = params.to_vec();
                perturbed[pi].data_mut()[i] += delta;
                let mut t = Tape::new();
                let (l, _) = build(&mut t, &perturbed);
                t.scalar(l)
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let a = analytic[pi][i];
            assert!(
                close(a, numeric, tol),
                "param {pi} elem {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0, rng)
}

/// Shift values away from zero so ReLU finite differences never cross a kink.
fn off_kink(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v += 0.1 * v.signum();
    }
    t
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // The named case: d(sum(A·B)) on random 4x3 · 3x5 within 1e-6 relative.
    let mut rng = seeded_rng(100, "matmul-fd");
    for _ in 0..20 {
        let a = randn(4, 3, &mut rng);
        let b = randn(3, 5, &mut rng);
        finite_diff_check(&[a, b], 1e-5, 1e-6, &|tape, p| {
            let a = tape.leaf(p[0].clone(), p[0].requires_grad());
            let b = tape.leaf(p[1].clone(), p[1].requires_grad());
            let c = tape.matmul(a, b).unwrap();
            let loss = tape.sum_all(c).unwrap();
            (loss, vec![a, b])
        });
    }
}

#[test]
fn matmul_nt_gradient() {
    let mut rng = seeded_rng(101, "matmul-nt-fd");
    for _ in 0..20 {
        let a = randn(3, 4, &mut rng);
        let b = randn(6, 4, &mut rng);
        finite_diff_check(&[a, b], 1e-5, 1e-4, &|tape, p| {
            let a = tape.leaf(p[0].clone(), p[0].requires_grad());
            let b = tape.leaf(p[1].clone(), p[1].requires_grad());
            let c = tape.matmul_nt(a, b).unwrap();
            let loss = tape.sum_all(c).unwrap();
            (loss, vec![a, b])
        });
    }
}

#[test]
fn relu_gradient_at_non_kink_points() {
    let mut rng = seeded_rng(102, "relu-fd");
    for _ in 0..20 {
        let x = off_kink(randn(3, 7, &mut rng));
        finite_diff_check(&[x], 1e-5, 1e-6, &|tape, p| {
            let x = tape.leaf(p[0].clone(), p[0].requires_grad());
            let y = tape.relu(x).unwrap();
            let loss = tape.sum_all(y).unwrap();
            (loss, vec![x])
        });
    }
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let mut rng = seeded_rng(103, "misc-fd");
    for _ in 0..20 {
        let x = randn(4, 5, &mut rng);
        let y = randn(4, 5, &mut rng);
        let bias = randn(1, 5, &mut rng);
        let s = randn(4, 1, &mut rng);
        finite_diff_check(&[x, y, bias, s], 1e-5, 1e-4, &|tape, p| {
            let x = tape.leaf(p[0].clone(), p[0].requires_grad());
            let y = tape.leaf(p[1].clone(), p[1].requires_grad());
            let b = tape.leaf(p[2].clone(), p[2].requires_grad());
            let s = tape.leaf(p[3].clone(), p[3].requires_grad());
            let a = tape.add(x, y).unwrap();
            let a = tape.add_row(a, b).unwrap();
            let a = tape.scale_rows(a, s).unwrap();
            let c = tape.col(a, 2).unwrap();
            let c = tape.scale(c, 1.5).unwrap();
            let loss = tape.sum_all(c).unwrap();
            (loss, vec![x, y, b, s])
        });
    }
}

#[test]
fn softmax_rows_gradient() {
    let mut rng = seeded_rng(104, "softmax-fd");
    for _ in 0..20 {
        let x = randn(3, 6, &mut rng);
        let w = randn(3, 6, &mut rng);
        finite_diff_check(&[x, w], 1e-5, 1e-4, &|tape, p| {
            let x = tape.leaf(p[0].clone(), p[0].requires_grad());
            let w = tape.leaf(p[1].clone(), p[1].requires_grad());
            let s = tape.softmax_rows(x).unwrap();
            // Weighted sum so the gradient is not identically zero.
            let wc = tape.col(w, 0).unwrap();
            let m = tape.scale_rows(s, wc).unwrap();
            let loss = tape.sum_all(m).unwrap();
            (loss, vec![x, w])
        });
    }
}

#[test]
fn softmax_xent_gradient() {
    let mut rng = seeded_rng(105, "xent-fd");
    for trial in 0..20 {
        let logits = randn(4, 9, &mut rng);
        let targets: Vec<usize> = (0..4).map(|i| (i * 2 + trial) % 9).collect();
        let t = targets.clone();
        finite_diff_check(&[logits], 1e-5, 1e-4, &move |tape, p| {
            let l = tape.leaf(p[0].clone(), p[0].requires_grad());
            let loss = tape.softmax_xent(l, t.clone()).unwrap();
            (loss, vec![l])
        });
    }
}

#[test]
fn embed_bag_gradient() {
    let mut rng = seeded_rng(106, "bag-fd");
    for _ in 0..20 {
        let emb = randn(8, 5, &mut rng);
        let bags: Vec<Vec<(usize, f64)>> = (0..3)
            .map(|_| {
                (0..3)
                    .map(|_| (rng.random_range(0..8usize), rng.random_range(0.1..1.0)))
                    .collect()
            })
            .collect();
        let b = bags.clone();
        finite_diff_check(&[emb], 1e-5, 1e-4, &move |tape, p| {
            let e = tape.leaf(p[0].clone(), p[0].requires_grad());
            let out = tape.embed_bag(e, b.clone()).unwrap();
            let loss = tape.sum_all(out).unwrap();
            (loss, vec![e])
        });
    }
}

fn toy_config(variant: Variant) -> ArchitectureConfig {
    let mut cfg = ArchitectureConfig::with_defaults(
        variant,
        vec!["us".into(), "gb".into()],
        vec!["assistant".into(), "stt".into()],
        10,
    );
    cfg.hidden_dim = 6;
    cfg.num_blocks = 2;
    cfg.layers_per_block = 2;
    cfg.adapter_dim = 2;
    cfg
}

/// End-to-end: perturb every model parameter and compare the loss slope
/// against the harvested gradients.
fn full_model_grad_check(variant: Variant) {
    let mut cfg = toy_config(variant);
    if variant == Variant::MixtureA {
        cfg.adapter_placement = Some(fofelm::arch::AdapterPlacement::Both);
    }
    let mut model = build_model(&cfg, 31).unwrap();
    // Give the zero-initialized up-projections real values so every path
    // carries gradient.
    let mut rng = seeded_rng(32, "fill");
    for g in model.groups_mut() {
        for t in g.tensors.iter_mut() {
            if t.data().iter().all(|&v| v == 0.0) {
                let filled = Tensor::randn(t.rows(), t.cols(), 0.3, &mut rng);
                t.data_mut().copy_from_slice(filled.data());
            }
        }
    }
    let key = model.config().key("gb", "stt").unwrap();
    let framed = frame(&[3, 7, 2, 5]);
    let contexts: Vec<_> = context_bags(&framed, cfg.fofe_alpha)
        .iter()
        .map(|(b, _)| b.clone())
        .collect();
    let targets: Vec<usize> = context_bags(&framed, cfg.fofe_alpha)
        .iter()
        .map(|&(_, t)| t)
        .collect();

    let loss_of = |m: &fofelm::arch::ModelGraph| -> f64 {
        let mut run = GraphRun::inference();
        let logits = m.forward(&mut run, &contexts, Some(key)).unwrap();
        let loss = run.tape.softmax_xent(logits, targets.clone()).unwrap();
        run.tape.scalar(loss)
    };

    let mut run = GraphRun::training();
    let logits = model.forward(&mut run, &contexts, Some(key)).unwrap();
    let loss = run.tape.softmax_xent(logits, targets.clone()).unwrap();
    run.tape.backward(loss).unwrap();
    run.harvest(&mut model);

    let eps = 1e-5;
    let snapshot = model.clone();
    for gi in 0..snapshot.groups().len() {
        let group = &snapshot.groups()[gi];
        for ti in 0..group.tensors.len() {
            let grad = model.groups()[gi].tensors[ti]
                .grad()
                .expect("trainable")
                .to_vec();
            // Probe a handful of elements per tensor to keep runtime low.
            let n = group.tensors[ti].len();
            for i in (0..n).step_by(n.div_ceil(5).max(1)) {
                let mut plus = snapshot.clone();
                plus.groups_mut()[gi].tensors[ti].data_mut()[i] += eps;
                let mut minus = snapshot.clone();
                minus.groups_mut()[gi].tensors[ti].data_mut()[i] -= eps;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                assert!(
                    close(grad[i], numeric, 1e-4),
                    "{} variant, group {} tensor {} elem {}: {} vs {}",
                    model.config().variant.name(),
                    snapshot.groups()[gi].name,
                    ti,
                    i,
                    grad[i],
                    numeric
                );
            }
        }
    }
}

#[test]
fn full_model_gradients_mixture_a() {
    full_model_grad_check(Variant::MixtureA);
}

#[test]
fn full_model_gradients_ad_caa_da() {
    full_model_grad_check(Variant::AdCaaDa);
}
