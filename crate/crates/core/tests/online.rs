mod common;

use std::sync::{Arc, OnceLock};

use dabn::bn::BatchMoments;
use dabn::data::synth::synth_generate;
use dabn::data::{Dataset, Window};
use dabn::eval::suite::{suite_arch, suite_hyper, suite_spec, SUITE_TARGET};
use dabn::model::{train, TrainedModel};
use dabn::online::{init_adapter, StreamAdapter};
use dabn::seed::SeedStream;
use rand::seq::SliceRandom;
use rand::Rng;

struct Fixture {
    ds: Dataset,
    model: Arc<TrainedModel>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = synth_generate(&suite_spec(1)).unwrap();
        let sources: Vec<_> = ds.user_ids().into_iter().filter(|&u| u != SUITE_TARGET).collect();
        let (model, _) = train(&ds.subset(&sources), &suite_arch(ds.num_classes()), &suite_hyper(7)).unwrap();
        Fixture {
            ds,
            model: Arc::new(model),
        }
    })
}

fn target() -> &'static [Window] {
    fixture().ds.windows(SUITE_TARGET).unwrap()
}

fn batch_moments_of(model: &TrainedModel, windows: &[&Window]) -> Vec<BatchMoments> {
    let data: Vec<&[f64]> = windows.iter().map(|w| w.data.as_slice()).collect();
    model.bn.moments(&model.layer_inputs_batch(&data).unwrap()).unwrap()
}

/// Live statistics averaged over `reps` independent streams of `len`
/// windows produced by `draw`.
fn ensemble(alpha: f64, reps: u64, mut draw: impl FnMut(u64) -> Vec<&'static Window>) -> Vec<(f64, f64)> {
    let f = fixture();
    let mut avg = vec![(0.0, 0.0); f.model.bn.width()];
    for r in 0..reps {
        let mut a = init_adapter(f.model.clone(), alpha, true).unwrap();
        for w in draw(r) {
            let rec = a.adapt_and_classify(&w.data).unwrap();
            assert!((rec.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(a.live_bn().channels.iter().all(|c| c.running_var >= 0.0));
        for (s, c) in avg.iter_mut().zip(&a.live_bn().channels) {
            s.0 += c.running_mean / reps as f64;
            s.1 += c.running_var / reps as f64;
        }
    }
    avg
}

/// Largest mean error in units of the channel's standard deviation, and
/// largest relative variance error.
fn deviation(est: &[(f64, f64)], truth: &[BatchMoments]) -> (f64, f64) {
    est.iter().zip(truth).fold((0.0f64, 0.0f64), |(m, v), (e, t)| {
        (m.max((e.0 - t.mean).abs() / t.var.sqrt()), v.max((e.1 - t.var).abs() / t.var))
    })
}

#[test]
fn stationary_stream_tracks_the_target_moments() {
    let ws = target();
    let truth = batch_moments_of(&fixture().model, &ws.iter().collect::<Vec<_>>());
    let est = ensemble(0.05, 64, |r| {
        let mut order: Vec<&Window> = ws.iter().collect();
        order.shuffle(&mut SeedStream::new(r).rng("stationary"));
        order.truncate(200);
        order
    });
    let (m, v) = deviation(&est, &truth);
    assert!(m < 0.05 && v < 0.05, "mean dev {m} sd, var rel {v}");
}

#[test]
fn online_mean_approaches_the_batch_estimate() {
    let ws = target();
    let model = &fixture().model;
    let mut draws: Vec<Vec<&Window>> = Vec::new();
    let est = ensemble(0.02, 32, |r| {
        let mut rng = SeedStream::new(r).rng("iid");
        let d: Vec<&Window> = (0..500).map(|_| &ws[rng.random_range(0..ws.len())]).collect();
        draws.push(d.clone());
        d
    });
    // Batch statistics of the very windows streamed, averaged like the online ones.
    let mut batch = vec![(0.0, 0.0); est.len()];
    for d in &draws {
        for (b, m) in batch.iter_mut().zip(batch_moments_of(model, d)) {
            b.0 += m.mean / draws.len() as f64;
            b.1 += m.var / draws.len() as f64;
        }
    }
    let truth: Vec<BatchMoments> = batch.iter().map(|&(mean, var)| BatchMoments { mean, var, count: 500 }).collect();
    let (m, v) = deviation(&est, &truth);
    assert!(m < 0.05 && v < 0.05, "mean dev {m} sd, var rel {v}");
}

#[test]
fn pre_drift_influence_decays_geometrically() {
    let ws = target();
    let alpha = 0.05;
    let f = fixture();
    let mut a = init_adapter(f.model.clone(), alpha, true).unwrap();
    let mut b = a.clone();
    // Different histories, identical continuation.
    for w in &ws[..40] {
        a.adapt_and_classify(&w.data).unwrap();
    }
    for w in &ws[200..240] {
        b.adapt_and_classify(&w.data).unwrap();
    }
    let gap = |a: &StreamAdapter, b: &StreamAdapter| -> Vec<f64> {
        a.live_bn()
            .running_means()
            .iter()
            .zip(b.live_bn().running_means())
            .map(|(x, y)| x - y)
            .collect()
    };
    let g0 = gap(&a, &b);
    for (n, w) in ws[300..420].iter().enumerate() {
        a.adapt_and_classify(&w.data).unwrap();
        b.adapt_and_classify(&w.data).unwrap();
        let factor = (1.0 - alpha).powi(n as i32 + 1);
        for (g, g0) in gap(&a, &b).iter().zip(&g0) {
            assert!((g - factor * g0).abs() <= 1e-9 * g0.abs().max(1.0), "n={n}: {g} vs {}", factor * g0);
        }
    }
}

#[test]
fn adapters_on_separate_threads_match_sequential_runs() {
    let f = fixture();
    let ws = target();
    let fresh = init_adapter(f.model.clone(), 0.02, true).unwrap();
    let run = |mut a: StreamAdapter, rev: bool| {
        let order: Vec<&Window> = if rev { ws.iter().rev().collect() } else { ws.iter().collect() };
        order.iter().map(|w| a.adapt_and_classify(&w.data).unwrap()).collect::<Vec<_>>()
    };
    let sequential = (run(fresh.clone(), false), run(fresh.clone(), true));
    let threaded = std::thread::scope(|s| {
        let x = s.spawn(|| run(fresh.clone(), false));
        let y = s.spawn(|| run(fresh.clone(), true));
        (x.join().unwrap(), y.join().unwrap())
    });
    assert_eq!(sequential, threaded);
}

#[test]
fn adaptation_never_touches_the_weights() {
    let f = fixture();
    let before = f.model.weights_hash();
    let mut a = init_adapter(f.model.clone(), 0.1, true).unwrap();
    for w in target() {
        a.adapt_and_classify(&w.data).unwrap();
    }
    assert_eq!(a.windows_seen(), target().len() as u64);
    assert_eq!(f.model.weights_hash(), before);
    assert_ne!(a.live_bn().channels, f.model.bn.channels);
}
