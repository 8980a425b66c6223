use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ren::conditioning::{Branch, PredEmaState, SampleId};
use ren::datasets::BenchmarkSpec;
use ren::networks::{DualNet, EmaRate, NetworkShape, ParamSet};
use ren::tensor::{finite_diff_check, softmax_rows};
use ren::trainer::{run, TrainConfig, Variant};
use ren::{Graph, Result, Tensor, Var};

fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Normal draws pushed at least `gap` away from every point in `kinks`.
fn away_from(r: &mut ChaCha8Rng, rows: usize, cols: usize, kinks: &[f64], gap: f64) -> Tensor {
    let mut t = normal(r, rows, cols);
    for v in t.data_mut() {
        for &k in kinks {
            if (*v - k).abs() < gap {
                *v = k + gap.copysign(*v - k) * 2.0;
            }
        }
    }
    t
}

fn positive(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    normal(r, rows, cols).map(|v| 0.5 + v.abs())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in any::<u64>(),
        magnitude in prop_oneof![Just(1.0), Just(30.0), Just(1e3)],
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&mut r, rows, cols).map(|v| v * magnitude);
        let p = softmax_rows(&x);
        for i in 0..rows {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn reversal_scales_the_identity_gradient(seed in any::<u64>(), lambda in 0.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&mut r, 3, 4);
        let w = normal(&mut r, 3, 4);
        let grad = |mut g: Graph| {
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let rev = g.grad_reverse(xv, lambda).unwrap();
            let sq = g.square(rev).unwrap();
            let prod = g.mul(sq, wv).unwrap();
            let loss = g.sum(prod).unwrap();
            // Forward values are untouched by the layer.
            assert_eq!(g.value(rev), &x);
            g.backward(loss).unwrap().get(xv).unwrap().clone()
        };
        let reversed = grad(Graph::new());
        let identity = grad(Graph::without_reversal());
        for (a, b) in reversed.data().iter().zip(identity.data()) {
            prop_assert!((a + lambda * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Each case maps its parameter leaves to some tensor; the check reduces it
/// with fixed random weights so every output entry carries gradient.
struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Build,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| vec![normal(r, 3, 4), normal(r, 4, 2)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add_bias",
            inputs: |r| vec![normal(r, 3, 4), normal(r, 1, 4)],
            build: |g, v| g.add_bias(v[0], v[1]),
        },
        OpCase {
            name: "add_sub_mul",
            inputs: |r| vec![normal(r, 2, 3), normal(r, 2, 3), normal(r, 2, 3)],
            build: |g, v| {
                let s = g.add(v[0], v[1])?;
                let d = g.sub(s, v[2])?;
                g.mul(d, v[1])
            },
        },
        OpCase {
            name: "affine_scale",
            inputs: |r| vec![normal(r, 2, 3)],
            build: |g, v| {
                let a = g.affine(v[0], -1.7, 0.3)?;
                g.scale(a, 2.5)
            },
        },
        OpCase {
            name: "relu",
            inputs: |r| vec![away_from(r, 3, 3, &[0.0], 0.05)],
            build: |g, v| g.relu(v[0]),
        },
        OpCase {
            name: "sigmoid",
            inputs: |r| vec![normal(r, 3, 3)],
            build: |g, v| g.sigmoid(v[0]),
        },
        OpCase {
            name: "clamp",
            inputs: |r| vec![away_from(r, 3, 3, &[-0.5, 0.5], 0.05)],
            build: |g, v| g.clamp(v[0], -0.5, 0.5),
        },
        OpCase {
            name: "log_sqrt_square",
            inputs: |r| vec![positive(r, 2, 3), positive(r, 2, 3), normal(r, 2, 3)],
            build: |g, v| {
                let l = g.log(v[0])?;
                let s = g.sqrt(v[1])?;
                let q = g.square(v[2])?;
                let a = g.add(l, s)?;
                g.add(a, q)
            },
        },
        OpCase {
            name: "softmax_rows",
            inputs: |r| vec![normal(r, 3, 4)],
            build: |g, v| g.softmax_rows(v[0]),
        },
        OpCase {
            name: "outer_rows",
            inputs: |r| vec![normal(r, 3, 2), normal(r, 3, 3)],
            build: |g, v| g.outer_rows(v[0], v[1]),
        },
        OpCase {
            name: "reductions",
            inputs: |r| vec![normal(r, 3, 4)],
            build: |g, v| {
                let rs = g.row_sum(v[0])?;
                let m = g.mean(v[0])?;
                let s = g.sum(rs)?;
                let q = g.square(s)?;
                g.add(q, m)
            },
        },
        OpCase {
            name: "pick",
            inputs: |r| vec![normal(r, 3, 4)],
            build: |g, v| g.pick(v[0], &[2, 0, 3]),
        },
        OpCase {
            name: "concat_slice",
            inputs: |r| vec![normal(r, 2, 3), normal(r, 3, 3)],
            build: |g, v| {
                let c = g.concat_rows(v[0], v[1])?;
                g.slice_rows(c, 1, 4)
            },
        },
        OpCase {
            name: "grad_reverse",
            inputs: |r| vec![normal(r, 2, 3)],
            build: |g, v| g.grad_reverse(v[0], 0.8),
        },
    ]
}

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        for trial in 0..100u64 {
            let mut r = ChaCha8Rng::seed_from_u64(trial);
            let params = (case.inputs)(&mut r);
            let build = case.build;
            // Fixed reduction weights, drawn once the output shape is known.
            let mut probe = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| probe.param(p.clone())).collect();
            let out = build(&mut probe, &vars).unwrap();
            let (rows, cols) = probe.value(out).shape();
            let w = normal(&mut r, rows, cols);
            let loss = |g: &mut Graph, v: &[Var]| -> Result<Var> {
                let y = build(g, v)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(y, wv)?;
                g.sum(prod)
            };
            let report = finite_diff_check(loss, &params, 1e-5, 1e-6).unwrap();
            assert!(report.passed(), "{} trial {trial}: {report:?}", case.name);
        }
    }
}

fn tiny_shape() -> NetworkShape {
    NetworkShape {
        input: 3,
        hidden: vec![4],
        feature_dim: 3,
        classes: 2,
        disc_hidden: 4,
    }
}

fn distance(a: (&ParamSet, &ParamSet), b: (&ParamSet, &ParamSet)) -> f64 {
    (a.0.distance(b.0).powi(2) + a.1.distance(b.1).powi(2)).sqrt()
}

#[test]
fn teacher_contracts_towards_a_frozen_student() {
    let shape = tiny_shape();
    let (fa, ca) = (shape.feature_extractor().unwrap(), shape.classifier().unwrap());
    for seed in 0..20u64 {
        let alpha = (seed as f64 / 19.0).min(1.0);
        let mut net = DualNet::with_teacher(
            ParamSet::init("F", &fa, 2 * seed),
            ParamSet::init("C", &ca, 2 * seed + 1),
            ParamSet::init("F", &fa, 1000 + seed),
            ParamSet::init("C", &ca, 2000 + seed),
            EmaRate::Fixed(alpha),
        )
        .unwrap();
        let student = (net.student_f.clone(), net.student_c.clone());
        let mut prev = distance(net.teacher().unwrap(), (&student.0, &student.1));
        for _ in 0..30 {
            net.ema_update().unwrap();
            let now = distance(net.teacher().unwrap(), (&student.0, &student.1));
            assert!(now <= prev * (1.0 + 1e-12) + 1e-14, "alpha {alpha}: {now} > {prev}");
            prev = now;
        }
    }
}

#[test]
fn prediction_average_stays_a_distribution() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for &alpha in &[0.0, 0.3, 0.6, 1.0] {
        let mut state = PredEmaState::new(alpha).unwrap();
        for _ in 0..1000 {
            let n = r.random_range(1..5);
            let ids: Vec<SampleId> = (0..n).map(|_| SampleId::Target(r.random_range(0..8))).collect();
            let p = softmax_rows(&normal(&mut r, n, 3).map(|v| 4.0 * v));
            let out = state.update(Branch::Student, &ids, &p).unwrap();
            for i in 0..n {
                let row = out.row(i);
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn losses_and_gradients_are_bitwise_reproducible() {
    let mut spec = BenchmarkSpec::standard();
    spec.n_source = 48;
    spec.n_target = 48;
    spec.lift_dim = 4;
    let ds = spec.build(5).unwrap();
    let cfg = TrainConfig {
        variant: Variant::Ren,
        total_steps: 10,
        eval_every: 2,
        batch_size: 8,
        hidden: vec![6],
        feature_dim: 4,
        disc_hidden: 5,
        input_noise: 0.1,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = run(&cfg, &ds).unwrap();
    let b = run(&cfg, &ds).unwrap();
    let bits =
        |o: &ren::trainer::RunOutput| -> Vec<u64> { o.metrics.iter().map(|m| m.losses.total.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.net.student_f.fingerprint(), b.net.student_f.fingerprint());
    assert_eq!(a.disc.params.fingerprint(), b.disc.params.fingerprint());

    // One graph, swept twice.
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.param(normal(&mut r, 4, 5));
    let w = g.param(normal(&mut r, 5, 3));
    let h = g.matmul(x, w).unwrap();
    let p = g.softmax_rows(h).unwrap();
    let loss = g.pick(p, &[0, 1, 2, 0]).unwrap();
    let loss = g.log(loss).unwrap();
    let loss = g.mean(loss).unwrap();
    let g1 = g.backward(loss).unwrap();
    let g2 = g.backward(loss).unwrap();
    for v in [x, w] {
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g1.get(v).unwrap()), bits(g2.get(v).unwrap()));
    }
}
