use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rvd_core::data::{gen_bouncing_ball, BallParams};
use rvd_core::diffusion::DEFAULT_COSINE_OFFSET;
use rvd_core::experiment::training_windows;
use rvd_core::metrics::crps_video;
use rvd_core::nn::Graph;
use rvd_core::{
    BlockConfig, DiffusionModel, NoiseSchedule, Profile, RvdNet, Tape, Tensor, TrainConfig, Trainer,
};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn([4, 8, 16, 16], &mut rng);
    let w = Tensor::<f32>::randn([16, 8, 3, 3], &mut rng);
    c.bench_function("conv2d_3x3_fwd_bwd_4x8x16x16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone(), true);
            let wv = tape.leaf(w.clone(), true);
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let l = tape.sum(y).unwrap();
            tape.backward(l).unwrap()
        })
    });
    let a = Tensor::<f32>::randn([64, 256], &mut rng);
    let m = Tensor::<f32>::randn([256, 64], &mut rng);
    c.bench_function("matmul_64x256x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let mv = tape.constant(m.clone());
            tape.matmul(av, mv).unwrap()
        })
    });
}

fn desk_model(c: &mut Criterion) {
    let ball = BallParams::for_frame(16, 16);
    let videos: Vec<Tensor<f32>> = (0..8)
        .map(|s| gen_bouncing_ball(s, 8, 16, 16, ball).unwrap())
        .collect();
    let windows = training_windows(&videos, 2, 6, 1).unwrap();
    let sched = NoiseSchedule::cosine(100, DEFAULT_COSINE_OFFSET).unwrap();
    let (net, params) =
        RvdNet::build(&BlockConfig::profile(Profile::Desk, 1), &[1, 16, 16], 0).unwrap();

    let trainer = Trainer::new(
        net.clone(),
        params.clone(),
        sched,
        TrainConfig::desk(),
        windows,
    )
    .unwrap();
    c.bench_function("desk_train_step_b2", |b| {
        b.iter_batched(
            || trainer.clone(),
            |mut t| t.step().unwrap(),
            BatchSize::LargeInput,
        )
    });

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let yn = Tensor::<f32>::randn([8, 1, 16, 16], &mut rng);
    let ctx = videos[0].index_axis0(0).unwrap();
    let ctx = Tensor::stack(&vec![ctx; 8]).unwrap();
    c.bench_function("desk_denoiser_eval_s8", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape, false);
            let mut g = Graph::new(&mut tape, &pv);
            let st = net.init_state(&mut g, 8).unwrap();
            let f = g.tape.constant(ctx.clone());
            let st = net.observe(&mut g, &st, f).unwrap();
            let y = g.tape.constant(yn.clone());
            net.predict_noise(&mut g, &st, y, 50).unwrap()
        })
    });
}

fn crps(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let truth = Tensor::<f32>::randn([6, 1, 16, 16], &mut rng).clamp(-1.0, 1.0);
    let ens: Vec<Tensor<f32>> = (0..8)
        .map(|_| Tensor::<f32>::randn([6, 1, 16, 16], &mut rng).clamp(-1.0, 1.0))
        .collect();
    c.bench_function("crps_video_s8_6x16x16", |b| {
        b.iter(|| crps_video(&ens, &truth, false).unwrap())
    });
}

criterion_group!(benches, conv, desk_model, crps);
criterion_main!(benches);
