#![allow(dead_code)]

use std::path::PathBuf;

use hydravit::autodiff::Tape;
use hydravit::tensor::Tensor;
use hydravit::vit::{init_weights, ParamKind, UniversalWeights};
use hydravit::{ModelConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keeps freed heap memory mapped. Training allocates and frees many
/// multi-megabyte activations per step; without this every step pays the
/// page-fault cost of fresh mappings.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

/// `HYDRAVIT_MNIST`, or `data/mnist` at the workspace root.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("HYDRAVIT_MNIST")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()).unwrap()
}

/// Directional-derivative check of `f` at `inputs` along `directions` random
/// unit directions. Returns the worst relative error between the analytic
/// and the central finite-difference derivative.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    directions: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |shifted: &[Tensor<f64>]| {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = shifted.iter().map(|t| tape.param(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dirs: Vec<Vec<f64>> =
            inputs.iter().map(|t| (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let norm = dirs.iter().flatten().map(|d| d * d).sum::<f64>().sqrt();
        let shift = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let data = t.data().iter().zip(d).map(|(x, d)| x + sign * h * d / norm).collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap()
                })
                .collect()
        };
        let fd = (eval(&shift(1.0)) - eval(&shift(-1.0))) / (2.0 * h);
        let an: f64 = analytic.iter().flatten().zip(dirs.iter().flatten()).map(|(g, d)| g * d / norm).sum();
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Whether entry `index` of parameter `name` (universal shape `shape`) belongs
/// to the subnetwork of the first `k` heads. Written from the layout rules
/// directly, independent of the library's slicing code.
pub fn in_prefix(name: &str, shape: &[usize], index: usize, k: usize, cfg: &ModelConfig) -> bool {
    let w = k * cfg.head_dim;
    let m = cfg.mlp_hidden / cfg.num_heads * k;
    let e = cfg.embed_dim;
    let (r, c) = if shape.len() == 2 { (index / shape[1], index % shape[1]) } else { (0, index) };
    if let Some(rest) = name.strip_prefix("heads.") {
        let owner: usize = rest.split('.').next().unwrap().parse().unwrap();
        return owner == k;
    }
    if name == "head.bias" {
        return true;
    }
    if name == "head.weight" {
        return r < w;
    }
    if name.ends_with("attn.qkv.weight") {
        return r < w && c % e < w;
    }
    if name.ends_with("attn.qkv.bias") {
        return c % e < w;
    }
    if name.ends_with("mlp.fc1.weight") {
        return r < w && c < m;
    }
    if name.ends_with("mlp.fc1.bias") {
        return c < m;
    }
    if name.ends_with("mlp.fc2.weight") {
        return r < m && c < w;
    }
    if name.ends_with("attn.proj.weight") {
        return r < w && c < w;
    }
    // Remaining tensors are [E] vectors or [rows, E] tables cut along E.
    c < w
}

/// Universal weights with every entry (biases, gammas included) random.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> UniversalWeights<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_weights::<f64>(cfg, seed).unwrap().map(|info, t| match info.kind {
        ParamKind::Gamma => {
            let noise = random_tensor(&mut rng, t.shape(), 0.2);
            Tensor::new(t.shape().to_vec(), noise.data().iter().map(|v| 1.0 + v).collect()).unwrap()
        }
        _ => random_tensor(&mut rng, t.shape(), 0.3),
    })
}
