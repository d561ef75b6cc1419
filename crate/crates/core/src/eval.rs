//! Accuracy, analytic resource counts and throughput of subnetworks.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::vit::{forward, ModelConfig, SubnetworkView, UniversalWeights};

fn check_k(cfg: &ModelConfig, k: usize) -> Result<()> {
    if k == 0 || k > cfg.num_heads {
        return Err(Error::Range(format!("k = {k} outside [1, {}]", cfg.num_heads)));
    }
    Ok(())
}

/// Parameters of the standalone model extracted at `k`, classifier included.
pub fn count_params(cfg: &ModelConfig, k: usize) -> Result<u64> {
    check_k(cfg, k)?;
    let w = (k * cfg.head_dim) as u64;
    let m = (cfg.mlp_per_head() * k) as u64;
    let (pd, t, c, l) = (cfg.patch_dim() as u64, cfg.tokens() as u64, cfg.num_classes as u64, cfg.num_layers as u64);
    let embed = pd * w + w + w + t * w;
    let block = 2 * w + (w * 3 * w + 3 * w) + (w * w + w) + 2 * w + (w * m + m) + (m * w + w);
    let head = 2 * w + w * c + c;
    Ok(embed + l * block + head)
}

/// Multiply-accumulates to classify one `image_size` image with subnetwork
/// `k`. Softmax, normalization, activation and bias additions are not counted.
pub fn count_macs(cfg: &ModelConfig, k: usize, image_size: usize) -> Result<u64> {
    check_k(cfg, k)?;
    if cfg.patch_size == 0 || image_size == 0 || !image_size.is_multiple_of(cfg.patch_size) {
        return Err(Error::config(format!(
            "image size {image_size} is not a multiple of patch size {}",
            cfg.patch_size
        )));
    }
    let side = (image_size / cfg.patch_size) as u64;
    let p = side * side;
    let t = p + 1;
    let w = (k * cfg.head_dim) as u64;
    let m = (cfg.mlp_per_head() * k) as u64;
    let patch = p * cfg.patch_dim() as u64 * w;
    let layer = t * w * 3 * w + 2 * t * t * w + t * w * w + 2 * t * w * m;
    Ok(patch + cfg.num_layers as u64 * layer + w * cfg.num_classes as u64)
}

/// Weights plus the largest set of live activations of one forward pass at
/// batch size 1, in bytes of `f32`.
pub fn estimate_ram_bytes(cfg: &ModelConfig, k: usize) -> Result<u64> {
    let params = count_params(cfg, k)?;
    let t = cfg.tokens() as u64;
    let w = (k * cfg.head_dim) as u64;
    let m = (cfg.mlp_per_head() * k) as u64;
    // Residual stream and its normalized copy are live in both sub-blocks.
    let attention = 3 * t * w + 2 * k as u64 * t * t + t * w;
    let mlp = 2 * t * m;
    let peak = 2 * t * w + attention.max(mlp);
    Ok((params + peak) * 4)
}

/// Analytic and measured resources of one subnetwork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub k: usize,
    pub embed_width: usize,
    pub params: u64,
    pub macs: u64,
    pub est_ram_bytes: u64,
    /// Images per second; absent when not benchmarked.
    pub throughput: Option<f64>,
}

impl ResourceProfile {
    pub fn analytic(cfg: &ModelConfig, k: usize) -> Result<Self> {
        Ok(Self {
            k,
            embed_width: k * cfg.head_dim,
            params: count_params(cfg, k)?,
            macs: count_macs(cfg, k, cfg.image_size)?,
            est_ram_bytes: estimate_ram_bytes(cfg, k)?,
            throughput: None,
        })
    }
}

fn correct_in<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    view: &SubnetworkView,
    data: &Dataset,
    indices: &[usize],
) -> Result<usize> {
    let (images, labels) = data.batch::<T>(indices);
    let logits = forward(weights, cfg, view, &images)?;
    let c = cfg.num_classes;
    Ok(logits.data().chunks(c).zip(&labels).filter(|(row, &y)| argmax(row) == y).count())
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy of subnetwork `k`. Batches are evaluated in parallel;
/// the result does not depend on `batch_size`.
pub fn evaluate<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    k: usize,
    data: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data(crate::DataError::Empty("cannot evaluate on an empty dataset".into())));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let view = SubnetworkView::new(cfg, k)?;
    let starts: Vec<usize> = (0..data.len()).step_by(batch_size).collect();
    let correct = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + batch_size).min(data.len())).collect();
            correct_in(weights, cfg, &view, data, &idx)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Result of a throughput measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    /// Median over timed windows.
    pub images_per_sec: f64,
    pub batch_size: usize,
    pub threads: usize,
    pub windows: usize,
}

/// Inference throughput of subnetwork `k` on random inputs. The first
/// `warmup` of `duration` is discarded; the rest is split into windows of at
/// least one batch, and the median window rate is reported.
pub fn bench_throughput<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    k: usize,
    batch_size: usize,
    duration: Duration,
    warmup: Duration,
) -> Result<Throughput> {
    if duration.is_zero() || duration <= warmup {
        return Err(Error::config(format!("duration {duration:?} must exceed warmup {warmup:?}")));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let view = SubnetworkView::new(cfg, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = [batch_size, cfg.in_channels, cfg.image_size, cfg.image_size];
    let values = (0..shape.iter().product::<usize>()).map(|_| T::lit(StandardNormal.sample(&mut rng))).collect();
    let images = Tensor::new(shape.to_vec(), values)?;

    let start = Instant::now();
    while start.elapsed() < warmup {
        forward(weights, cfg, &view, &images)?;
    }
    let measured = duration - warmup;
    let window = measured / 10;
    let mut rates = Vec::new();
    while start.elapsed() < duration || rates.is_empty() {
        let w0 = Instant::now();
        let mut batches = 0usize;
        while batches == 0 || w0.elapsed() < window {
            forward(weights, cfg, &view, &images)?;
            batches += 1;
        }
        let secs = w0.elapsed().as_secs_f64();
        if secs > 0.0 {
            rates.push((batches * batch_size) as f64 / secs);
        }
    }
    rates.sort_by(f64::total_cmp);
    Ok(Throughput {
        images_per_sec: rates[rates.len() / 2],
        batch_size,
        threads: rayon::current_num_threads(),
        windows: rates.len(),
    })
}

/// Throughput settings for [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSettings {
    pub batch_size: usize,
    pub duration: Duration,
    pub warmup: Duration,
}

/// One row of a subnetwork sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub embed_width: usize,
    pub params: u64,
    pub macs: u64,
    pub est_ram_bytes: u64,
    pub throughput: Option<f64>,
    pub accuracy: Option<f64>,
}

impl SweepRow {
    pub fn new(profile: ResourceProfile, accuracy: Option<f64>) -> Self {
        Self {
            k: profile.k,
            embed_width: profile.embed_width,
            params: profile.params,
            macs: profile.macs,
            est_ram_bytes: profile.est_ram_bytes,
            throughput: profile.throughput,
            accuracy,
        }
    }
}

/// Profiles (and, given data, evaluates) each head count in `ks`. Rows come
/// back sorted by `k`.
pub fn sweep<T: Float>(
    weights: &UniversalWeights<T>,
    cfg: &ModelConfig,
    data: Option<&Dataset>,
    ks: &[usize],
    bench: Option<BenchSettings>,
    eval_batch_size: usize,
) -> Result<Vec<SweepRow>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks.iter()
        .map(|&k| {
            SubnetworkView::new(cfg, k)?;
            let mut profile = ResourceProfile::analytic(cfg, k)?;
            if let Some(b) = bench {
                profile.throughput =
                    Some(bench_throughput(weights, cfg, k, b.batch_size, b.duration, b.warmup)?.images_per_sec);
            }
            let accuracy = data.map(|d| evaluate(weights, cfg, k, d, eval_batch_size)).transpose()?;
            Ok(SweepRow::new(profile, accuracy))
        })
        .collect()
}

pub const REPORT_HEADER: &str = "k,embed_width,params,macs,est_ram_bytes,throughput,accuracy";

/// Renders rows as CSV with a header; absent values are empty fields.
pub fn write_report_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(REPORT_HEADER.split(',')).map_err(|e| Error::config(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Data(crate::DataError::Invalid(e.to_string())))?;
    if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
        return Err(Error::Data(crate::DataError::Invalid(format!("report header must be `{REPORT_HEADER}`"))));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Data(crate::DataError::Invalid(e.to_string())))).collect()
}
