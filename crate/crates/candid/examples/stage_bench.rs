//! Temporary: per-stage timing of one training item.

use std::time::Instant;

use candid::flow;
use candid::imaging::Image;
use candid::net::{self, FlowSource, Model, NetConfig};
use candid::noise::{synthesize_burst, NoiseParams};
use candid::prefilter::{make_streams, BilateralDenoiser};

fn main() {
    let cfg = NetConfig::new(4, 1);
    let model = Model::init(cfg, 3);
    let gt = {
        let (h, w) = (48usize, 48usize);
        let data: Vec<f32> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32, (i % w) as f32);
                (0.5 + 0.25 * (0.3 * x).sin() * (0.27 * y).cos() + 0.15 * (0.2 * (x + y)).sin()).clamp(0.0, 1.0)
            })
            .collect();
        Image::new(h, w, 1, data).unwrap()
    };
    let params = NoiseParams::new(0.008, 0.004);
    let burst = synthesize_burst(&gt, 4, 4.0, &params, 5).unwrap();
    let den = BilateralDenoiser::new();
    let reps = 20;

    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(make_streams(&burst.frames, params, &den).unwrap());
    }
    println!("make_streams      {:?}", t.elapsed() / reps);

    let streams = make_streams(&burst.frames, params, &den).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(flow::estimate_burst_flows(&streams.mild).unwrap());
    }
    println!("estimate_flows    {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps {
        for f in &streams.raw {
            std::hint::black_box(model.extract_features(f, &params).unwrap());
        }
    }
    println!("features x4       {:?}", t.elapsed() / reps);

    let flows = flow::estimate_burst_flows(&streams.mild).unwrap();
    let feats: Vec<_> = streams.raw.iter().map(|f| model.extract_features(f, &params).unwrap()).collect();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(flow::align_stream(&streams.raw, &feats, &flows).unwrap());
    }
    println!("align_stream      {:?}", t.elapsed() / reps);

    let (_, aligned_feats) = flow::align_stream(&streams.raw, &feats, &flows).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(model.predict_kernels(&aligned_feats).unwrap());
    }
    println!("predict_kernels   {:?}", t.elapsed() / reps);

    let (aligned_frames, _) = flow::align_stream(&streams.raw, &feats, &flows).unwrap();
    let images = net::images_to_tensor(&aligned_frames).unwrap();
    let (k3, k5) = model.predict_kernels(&aligned_feats).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(net::apply_kernels(&images, &k3).unwrap());
        std::hint::black_box(net::apply_kernels(&images, &k5).unwrap());
    }
    println!("apply_kernels     {:?}", t.elapsed() / reps);

    let t = Instant::now();
    for _ in 0..reps {
        let out = model.forward(&burst.frames, &params, &den, &FlowSource::Estimate).unwrap();
        std::hint::black_box(&out.pred);
    }
    println!("full forward      {:?}", t.elapsed() / reps);

    let target = net::image_to_tensor(&burst.ground_truth).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        let out = model.forward(&burst.frames, &params, &den, &FlowSource::Estimate).unwrap();
        let loss = out.pred.l1_loss(&target).unwrap();
        loss.backward().unwrap();
        model.zero_grads();
    }
    println!("forward+backward  {:?}", t.elapsed() / reps);

    // emulate a full training item: fresh burst + fresh noise level each time
    use candid::noise::{sample_noise_params, NoiseMode};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
    let t = Instant::now();
    for rep in 0..reps {
        let p = sample_noise_params(&mut rng, NoiseMode::Train);
        let b = synthesize_burst(&gt, 4, 4.0, &p, rep as u64).unwrap();
        let out = model.forward(&b.frames, &b.params, &den, &FlowSource::Estimate).unwrap();
        let target = net::image_to_tensor(&b.ground_truth).unwrap();
        let loss = out.pred.l1_loss(&target).unwrap();
        let v = loss.item().unwrap();
        std::hint::black_box(v);
        loss.scale(0.25).unwrap().backward().unwrap();
        model.zero_grads();
    }
    println!("train item        {:?}", t.elapsed() / reps);
}
