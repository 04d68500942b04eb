//! Conv, matmul and Monte-Carlo kernels on one worker thread versus all of
//! them. Built without the `parallel` feature only the sequential variant
//! runs.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ncmn::diagnostics::mc_sums;
use ncmn::{Graph, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv_step(x: &Tensor, k: &Tensor) -> f64 {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let kv = g.leaf(k.clone());
    let y = g.conv2d(xv, kv, 1, 1).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    grads.get(kv).unwrap().data()[0]
}

fn matmul(a: &Tensor, b: &Tensor) -> f64 {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let y = g.matmul(av, bv).unwrap();
    g.value(y).data()[0]
}

fn monte_carlo() -> f64 {
    mc_sums(1 << 18, 7, |rng| -> [f64; 2] {
        let x: f64 = rng.random_range(-1.0..1.0);
        [x, x * x]
    })[1]
}

type Kernel = Box<dyn Fn() -> f64 + Send + Sync>;

fn kernels() -> Vec<(&'static str, Kernel)> {
    let x = random(&[64, 16, 16, 16], 1);
    let k = random(&[32, 16, 3, 3], 2);
    let a = random(&[256, 256], 3);
    let b = random(&[256, 256], 4);
    vec![
        ("conv2d_fwd_bwd", Box::new(move || conv_step(&x, &k))),
        ("matmul_256", Box::new(move || matmul(&a, &b))),
        ("mc_sums_2^18", Box::new(monte_carlo)),
    ]
}

#[cfg(feature = "parallel")]
fn bench(c: &mut Criterion) {
    let all = rayon::current_num_threads();
    let pools: Vec<(usize, rayon::ThreadPool)> = [1, all]
        .into_iter()
        .map(|n| (n, rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()))
        .collect();
    for (name, f) in kernels() {
        let mut group = c.benchmark_group(name);
        group.sample_size(10);
        for (n, pool) in &pools {
            group.bench_with_input(criterion::BenchmarkId::new("threads", n), n, |bch, _| {
                pool.install(|| bch.iter(|| std::hint::black_box(f())))
            });
        }
        group.finish();
    }
}

#[cfg(not(feature = "parallel"))]
fn bench(c: &mut Criterion) {
    for (name, f) in kernels() {
        let mut group = c.benchmark_group(name);
        group.sample_size(10);
        group.bench_function("sequential", |bch| bch.iter(|| std::hint::black_box(f())));
        group.finish();
    }
}

criterion_group!(benches, bench);
criterion_main!(benches);
