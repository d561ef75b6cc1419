mod common;

use common::{in_prefix, retain_freed_memory};
use hydravit::data::{decode_checkpoint, encode_checkpoint, synth_dataset};
use hydravit::trainer::{epoch_order, SamplingDistribution, ScheduleKind, TrainConfig, Trainer};
use hydravit::vit::init_weights;
use hydravit::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_passes(dist: &SamplingDistribution, draws: usize, seed: u64, alpha: f64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; dist.support().len()];
    for _ in 0..draws {
        let k = dist.sample(&mut rng);
        counts[dist.support().iter().position(|&s| s == k).expect("draw inside support")] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(dist.weights())
        .map(|(&o, &p)| {
            let e = p * draws as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64).unwrap().inverse_cdf(1.0 - alpha);
    (stat, critical)
}

#[test]
fn sampler_fits_uniform_and_weighted_laws() {
    for seed in [0, 1, 2] {
        let (stat, crit) = chi_square_passes(&SamplingDistribution::uniform(3, 12).unwrap(), 100_000, seed, 1e-4);
        assert!(stat < crit, "uniform: {stat} >= {crit}");
        let w = SamplingDistribution::new(vec![3, 6, 12], vec![0.25, 0.30, 0.45]).unwrap();
        let (stat, crit) = chi_square_passes(&w, 100_000, seed, 1e-4);
        assert!(stat < crit, "weighted: {stat} >= {crit}");
    }
}

#[test]
fn sampler_never_returns_zero_weight_counts() {
    let d = SamplingDistribution::new(vec![2, 4, 8], vec![0.0, 1.0, 0.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert!((0..10_000).all(|_| d.sample(&mut rng) == 4));
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 1000);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(3, 0, 1000));
    assert_ne!(a, epoch_order(3, 1, 1000));
    assert_ne!(a, epoch_order(4, 0, 1000));
}

fn isolation_case(separate: bool) {
    let mut cfg = ModelConfig::vit(2, 6, 2, 2, 8, 4, 1, 3);
    cfg.separate_classifiers = separate;
    let w = init_weights::<f32>(&cfg, 1).unwrap();
    let data = synth_dataset(0, 8, 3, 8).unwrap();
    let (x, y) = data.batch::<f32>(&(0..8).collect::<Vec<_>>());
    let mut t = Trainer::new(cfg.clone(), TrainConfig { epochs: 1, batch_size: 8, ..Default::default() }, w.clone(), 8)
        .unwrap();
    t.train_step_at(2, &x, &y).unwrap();
    let ckpt = t.checkpoint(None);
    let moments = ckpt.moments.unwrap();
    let mut changed_inside = 0;
    for (((info, before), (_, after)), (_, m)) in
        w.entries().into_iter().zip(ckpt.weights.entries()).zip(moments.m.entries())
    {
        for (i, (b, a)) in before.data().iter().zip(after.data()).enumerate() {
            if in_prefix(&info.name, before.shape(), i, 2, &cfg) {
                changed_inside += (a.to_bits() != b.to_bits()) as usize;
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "{}[{i}] changed", info.name);
                assert_eq!(m.data()[i], 0.0, "moment of {}[{i}] changed", info.name);
            }
        }
    }
    assert!(changed_inside > 100, "only {changed_inside} prefix entries moved");
}

#[test]
fn step_touches_only_the_sampled_prefix() {
    isolation_case(false);
}

#[test]
fn step_touches_only_the_sampled_classifier() {
    isolation_case(true);
}

#[test]
fn overfits_a_single_batch() {
    let cfg = ModelConfig::vit(2, 4, 8, 2, 16, 4, 1, 4);
    let data = synth_dataset(1, 16, 4, 16).unwrap();
    let (x, y) = data.batch::<f32>(&(0..16).collect::<Vec<_>>());
    for k in 1..=4 {
        let tc = TrainConfig {
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            warmup_steps: Some(0),
            schedule: ScheduleKind::Constant,
            ..Default::default()
        };
        let mut t = Trainer::new(cfg.clone(), tc, init_weights::<f32>(&cfg, 0).unwrap(), 16).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = t.train_step_at(k, &x, &y).unwrap().loss;
        }
        assert!(last < 0.01, "k={k}: loss after 200 steps: {last}");
    }
}

#[test]
fn resume_continues_bit_exactly() {
    retain_freed_memory();
    let cfg = ModelConfig { dropout: 0.1, ..ModelConfig::vit(1, 4, 2, 2, 8, 4, 1, 3) };
    let data = synth_dataset(2, 40, 3, 8).unwrap();
    let tc = TrainConfig { epochs: 3, batch_size: 8, ..Default::default() };
    let mut straight = Trainer::new(cfg.clone(), tc, init_weights::<f32>(&cfg, 5).unwrap(), data.len()).unwrap();
    for _ in 0..7 {
        straight.train_next_batch(&data).unwrap();
    }
    let bytes = encode_checkpoint(&straight.checkpoint(None)).unwrap();
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint::<f32>(&bytes).unwrap()).unwrap();
    for _ in 0..8 {
        let a = straight.train_next_batch(&data).unwrap().unwrap();
        let b = resumed.train_next_batch(&data).unwrap().unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(straight.weights(), resumed.weights());
    assert_eq!(
        encode_checkpoint(&straight.checkpoint(None)).unwrap(),
        encode_checkpoint(&resumed.checkpoint(None)).unwrap()
    );
}

#[test]
fn run_learns_the_synthetic_task_at_every_width() {
    retain_freed_memory();
    let cfg = ModelConfig::vit(2, 4, 4, 2, 16, 4, 1, 4);
    let train = synth_dataset(0, 1024, 4, 16).unwrap();
    let val = synth_dataset(1, 256, 4, 16).unwrap();
    let tc = TrainConfig { epochs: 8, batch_size: 32, learning_rate: 2e-3, ..Default::default() };
    let mut t = Trainer::new(cfg.clone(), tc, init_weights::<f32>(&cfg, 0).unwrap(), train.len()).unwrap();
    let mut epochs = 0;
    let report = t.run(&train, &val, |_| epochs += 1).unwrap();
    assert_eq!(epochs, 8);
    let last = report.epochs.last().unwrap();
    assert_eq!(last.histogram.values().sum::<u64>(), 32);
    for k in 1..=4 {
        assert!(last.val_accuracy[&k] > 0.9, "k={k}: {}", last.val_accuracy[&k]);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + 8 * 4);
    assert!(t.train_next_batch(&train).unwrap().is_none());
}

#[test]
fn non_finite_loss_is_reported_with_context() {
    let cfg = ModelConfig::vit(1, 2, 2, 2, 8, 4, 1, 3);
    let data = synth_dataset(0, 8, 3, 8).unwrap();
    let (x, y) = data.batch::<f32>(&(0..8).collect::<Vec<_>>());
    let tc = TrainConfig { learning_rate: 1e30, warmup_steps: Some(0), weight_decay: 0.0, ..Default::default() };
    let mut t = Trainer::new(cfg.clone(), tc, init_weights::<f32>(&cfg, 0).unwrap(), 8).unwrap();
    let err = (0..20).find_map(|_| t.train_step_at(2, &x, &y).err()).expect("diverges");
    assert!(matches!(err, hydravit::Error::NonFiniteLoss { k: 2, .. }), "{err:?}");
}

#[test]
fn rejects_distribution_outside_supported_heads() {
    let cfg = ModelConfig { min_heads: 2, ..ModelConfig::vit(1, 4, 2, 2, 8, 4, 1, 3) };
    let tc = TrainConfig { distribution: Some(SamplingDistribution::point(1).unwrap()), ..Default::default() };
    assert!(Trainer::new(cfg.clone(), tc, init_weights::<f32>(&cfg, 0).unwrap(), 8).is_err());
}
