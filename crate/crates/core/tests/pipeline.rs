use rvd_core::data::{gen_bouncing_ball, BallParams};
use rvd_core::diagnostics::profile_param_count;
use rvd_core::diffusion::DEFAULT_COSINE_OFFSET;
use rvd_core::experiment::{prepare, ExperimentConfig};
use rvd_core::tensor_file::{decode, encode_set};
use rvd_core::train::generate;
use rvd_core::{
    BlockConfig, FlowMode, NoiseSchedule, Profile, ResidualConfig, RvdNet, SampleConfig, VarianceMode,
};

#[test]
fn parameter_counts_per_profile() {
    let golden = [
        (Profile::Desk, 1, 131_258),
        (Profile::Desk, 3, 131_982),
        (Profile::P64, 1, 47_489_522),
        (Profile::P64, 3, 47_493_846),
        (Profile::P128, 1, 51_159_234),
        (Profile::P128, 3, 51_164_998),
    ];
    for (profile, channels, count) in golden {
        assert_eq!(profile_param_count(profile, channels).unwrap(), count, "{profile:?} C={channels}");
    }
}

#[test]
fn samples_do_not_depend_on_ensemble_composition() {
    let (net, params) = RvdNet::build(&BlockConfig::profile(Profile::Desk, 1), &[1, 16, 16], 3).unwrap();
    let video = gen_bouncing_ball(1, 4, 16, 16, BallParams::for_frame(16, 16)).unwrap();
    let context = video.slice_axis0(0, 2).unwrap();
    let sched = NoiseSchedule::cosine(10, DEFAULT_COSINE_OFFSET).unwrap();
    let sc = SampleConfig {
        future_len: 2,
        residual: ResidualConfig::new(2.0, FlowMode::Rvd).unwrap(),
        variance_mode: VarianceMode::SqrtPosterior,
    };
    let both = generate(&net, &params, &context, &sched, &sc, &[4, 9]).unwrap();
    let alone = generate(&net, &params, &context, &sched, &sc, &[9]).unwrap();
    assert_eq!(both.len(), 2);
    assert_eq!(both[0].shape(), &[2, 1, 16, 16]);
    assert_eq!(both[1], alone[0]);
    assert_ne!(both[0], both[1]);
    assert!(both.iter().all(|v| v.data().iter().all(|x| x.is_finite())));
}

#[test]
fn checkpoint_restore_continues_identically() {
    let mut cfg = ExperimentConfig::desk_ball(1);
    cfg.train.max_steps = 8;
    let (_, mut a) = prepare(&cfg).unwrap();
    for _ in 0..4 {
        a.step().unwrap();
    }
    let saved = decode(&encode_set(&a.checkpoint())).unwrap();
    let (_, mut b) = prepare(&cfg).unwrap();
    b.restore(&saved).unwrap();
    for _ in 0..4 {
        let (sa, sb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(sa.loss.to_bits(), sb.loss.to_bits());
    }
    assert_eq!(encode_set(&a.checkpoint()), encode_set(&b.checkpoint()));
}

#[test]
fn vd_training_leaves_the_transform_untouched() {
    let mut cfg = ExperimentConfig::desk_ball(2);
    cfg.train.max_steps = 3;
    cfg.train.residual = ResidualConfig::new(2.0, FlowMode::Vd).unwrap();
    let (_, mut t) = prepare(&cfg).unwrap();
    let before = t.params.clone();
    for _ in 0..3 {
        t.step().unwrap();
    }
    let (mut frozen, mut moved) = (0, 0);
    for ((name, old), new) in before.names().iter().zip(before.values()).zip(t.params.values()) {
        if name.starts_with("transform.") {
            assert_eq!(old, new, "{name} changed");
            frozen += 1;
        } else if old != new {
            moved += 1;
        }
    }
    assert!(frozen > 0 && moved > 0);
}
