use std::sync::OnceLock;

use super::*;
use crate::codec::{train_autoencoder, CodecSpec};
use crate::env::{play_actions, EnvConfig};
use crate::kinematics::HandModelSpec;
use crate::nn::{AdamConfig, Gradients};
use crate::pipeline::prepare_episode;
use crate::retarget::estimate_homography;
use crate::synth::{generate_corpus, SynthSpec};

struct Fixture {
    env: PianoEnv<f64>,
    episodes: Vec<SongEpisode<f64>>,
    codec: GoalCodec<f64>,
    ik: IkParams<f64>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let geom = KeyGeometry::default();
        let spec = HandModelSpec::default();
        let corpus = generate_corpus(&geom, &SynthSpec::default(), 2, 0, 7).unwrap();
        let h = estimate_homography(&corpus.correspondences).unwrap().homography;
        let ik = IkParams {
            iters_per_frame: 8,
            ..IkParams::default()
        };
        let episodes = corpus
            .songs
            .iter()
            .map(|s| prepare_episode(&s.song.id, &s.song.trajectory, &s.pixels, &h, &geom, &spec, &ik, 400, 0.0).unwrap())
            .collect::<Vec<_>>();
        let mut states: Vec<PianoState> = episodes.iter().flat_map(|e| e.song.frames.clone()).collect();
        states.sort_by_key(|s| s.key_mask());
        states.dedup();
        let codec_spec = CodecSpec {
            epochs: 5,
            ..CodecSpec::default()
        };
        let (codec, _) = train_autoencoder(&states, &geom, &codec_spec).unwrap();
        Fixture {
            env: PianoEnv::new(spec, geom, EnvConfig::default()).unwrap(),
            episodes,
            codec,
            ik,
        }
    })
}

fn zero_experts(f: &Fixture) -> Vec<(SongEpisode<f64>, ResidualPolicy)> {
    let p = ResidualPolicy::default_for(f.env.spec());
    f.episodes.iter().map(|e| (e.clone(), p.clone())).collect()
}

fn dataset() -> &'static DistillDataset {
    static D: OnceLock<DistillDataset> = OnceLock::new();
    D.get_or_init(|| build_dataset(&fixture().env, &zero_experts(fixture())).unwrap())
}

fn quick_fit(epochs: usize) -> FitConfig {
    FitConfig {
        epochs,
        batch_size: 16,
        adam: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        final_lr_fraction: 0.05,
    }
}

fn ctx(f: &Fixture) -> ExecutionContext<'_> {
    ExecutionContext {
        codec: &f.codec,
        geom: f.env.geometry(),
        ik: &f.ik,
        chunk: 4,
        goal_frames: 10,
    }
}

/// Largest relative error between backprop and central differences of the
/// summed squared error at one sample. Differences below the finite-difference
/// roundoff (1e-8 absolute) count as agreement.
fn gradient_check(net: &Mlp<f64>, x: &[f64], y: &[f64]) -> f64 {
    let loss = |n: &Mlp<f64>| n.forward(x).iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>();
    let trace = net.forward_trace(x);
    let g: Vec<f64> = trace.output().iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect();
    let mut grads = Gradients::zeros_like(net);
    net.backward(&trace, &g, &mut grads);
    let analytic = grads.flat();
    let mut worst: f64 = 0.0;
    let n = net.num_params();
    for i in (0..n).step_by((n / 60).max(1)) {
        let h = 1e-5;
        let mut a = net.clone();
        *a.param_mut(i) += h;
        let mut b = net.clone();
        *b.param_mut(i) -= h;
        let num = (loss(&a) - loss(&b)) / (2.0 * h);
        let diff = (num - analytic[i]).abs();
        if diff > 1e-8 {
            worst = worst.max(diff / num.abs().max(analytic[i].abs()));
        }
    }
    worst
}

#[test]
fn zero_residual_dataset_replays_the_nominal() {
    let f = fixture();
    let ds = dataset();
    assert_eq!(ds.songs.len(), f.episodes.len());
    assert_eq!(ds.total_frames(), f.episodes.iter().map(|e| e.len()).sum::<usize>());
    for (song, ep) in ds.songs.iter().zip(&f.episodes) {
        for (fr, nom) in song.frames.iter().zip(&ep.nominal) {
            assert_eq!(fr.action, fr.nominal);
            assert_eq!(fr.action.as_slice(), nom.as_slice());
        }
        assert!(song.frames.iter().enumerate().all(|(t, fr)| fr.t == t && fr.goal == ep.song.frames[t]));
    }
}

#[test]
fn dataset_bytes_are_reproducible() {
    let f = fixture();
    let a = build_dataset(&f.env, &zero_experts(f)).unwrap();
    let dir = std::env::temp_dir().join(format!("distill-bytes-{}", std::process::id()));
    let (da, db) = (dir.join("a"), dir.join("b"));
    a.write_dir(&da).unwrap();
    dataset().write_dir(&db).unwrap();
    for name in ["manifest.json", "train_0.jsonl", "train_1.jsonl"] {
        assert_eq!(fs::read(da.join(name)).unwrap(), fs::read(db.join(name)).unwrap(), "{name}");
    }
    assert_eq!(&DistillDataset::read_dir(&da).unwrap(), dataset());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn mismatched_expert_is_rejected() {
    let f = fixture();
    let mut experts = zero_experts(f);
    experts[1].1.theta.pop();
    assert!(matches!(build_dataset(&f.env, &experts), Err(Error::Input(_))));
}

#[test]
fn standardizer_inverts() {
    let rows = vec![vec![1.0, 5.0, 0.0], vec![3.0, 5.0, 0.0]];
    let s = Standardizer::fit(&rows, 1e-3, true);
    assert_eq!(s.mean, vec![2.0, 5.0, 0.0]);
    assert_eq!(s.std, vec![1.0, 1e-3, 1e-3]);
    let z = s.apply(&rows[0]);
    assert_eq!(z, vec![-1.0, 0.0, 0.0]);
    assert_eq!(s.invert(&z), rows[0]);
    assert_eq!(Standardizer::fit(&rows, 1e-3, false).mean, vec![0.0; 3]);
}

#[test]
fn postprocess_snaps_to_goal_keys() {
    let g = KeyGeometry::default();
    let mut tips = [[0.03, 0.0, 0.02]; NUM_TIPS];
    for (i, p) in tips.iter_mut().enumerate() {
        p[1] = g.key(20 + 2 * i).center_y;
    }
    let on_center = FingertipFrame::new(0.0, tips);
    let goal = PianoState::from_keys([22]);
    assert_eq!(postprocess_high_level(&[on_center], &[goal], &g)[0].tips, tips);
    let mut off = on_center;
    off.tips[1][1] += 0.002;
    let snapped = postprocess_high_level(&[off], &[goal], &g);
    assert_eq!(snapped[0].tips[1][1], g.key(22).center_y);
    assert_eq!(snapped[0].press[1], Some(22));
    assert_eq!(postprocess_high_level(&[off], &[PianoState::empty()], &g)[0].tips, off.tips);
}

#[test]
fn high_level_learns_constant_fingertips() {
    let f = fixture();
    let mut ds = dataset().clone();
    ds.songs.truncate(1);
    let c = ds.songs[0].frames[0].demo_tips;
    for fr in &mut ds.songs[0].frames {
        fr.demo_tips = c;
    }
    let spec = HighLevelSpec {
        hidden: vec![32],
        fit: quick_fit(200),
        ..HighLevelSpec::default()
    };
    let (hl, curve) = train_high_level(&ds, &f.codec, &spec).unwrap();
    assert!(curve.epochs.last().unwrap() < &curve.epochs[0]);
    let goals: Vec<PianoState> = ds.songs[0].frames.iter().map(|fr| fr.goal).collect();
    let lat = goal_latents(&f.codec, &goals, 10).unwrap();
    for (t, fr) in ds.songs[0].frames.iter().enumerate() {
        for plan in hl.predict(&lat[t..t + 10], &fr.tips).unwrap() {
            for (p, q) in plan.iter().zip(&c) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-3, "frame {t}: {p:?} vs {q:?}");
                }
            }
        }
    }
}

#[test]
fn zero_epochs_keep_initialisation() {
    let f = fixture();
    let spec = HighLevelSpec {
        hidden: vec![8],
        fit: quick_fit(0),
        ..HighLevelSpec::default()
    };
    let (hl, curve) = train_high_level(dataset(), &f.codec, &spec).unwrap();
    assert!(curve.epochs.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let init = Mlp::new(&[10 * 16 + 30, 8, 4 * 30], Activation::Tanh, Activation::Identity, &mut rng);
    assert_eq!(hl.net, init);
}

#[test]
fn policy_gradients_match_finite_differences() {
    let f = fixture();
    let hl_spec = HighLevelSpec {
        hidden: vec![16, 16],
        fit: quick_fit(3),
        ..HighLevelSpec::default()
    };
    let (hl, _) = train_high_level(dataset(), &f.codec, &hl_spec).unwrap();
    let (xs, ys) = high_level_samples(dataset(), &f.codec, 10, 4).unwrap();
    let x = hl.input_norm.apply(&xs[7]);
    let y = hl.output_norm.apply(&ys[7]);
    assert!(gradient_check(&hl.net, &x, &y) < 1e-5);

    let ll_spec = LowLevelSpec {
        hidden: vec![16],
        fit: quick_fit(3),
        mode: LowLevelMode::Direct,
        ..LowLevelSpec::default()
    };
    let (ll, _) = train_low_level(dataset(), None, &f.codec, &ll_spec).unwrap();
    let songs: Vec<&DistillSong> = dataset().songs.iter().collect();
    let (xs, ys) = low_level_samples(&songs, &f.codec, &ll_spec).unwrap();
    let x = ll.input_norm.apply(&xs[11]);
    let y = ll.output_norm.apply(&ys[11]);
    assert!(gradient_check(&ll.net, &x, &y) < 1e-5);
}

#[test]
fn residual_head_on_zero_residual_experts_stays_small() {
    let f = fixture();
    let spec = LowLevelSpec {
        hidden: vec![32],
        fit: quick_fit(100),
        ..LowLevelSpec::default()
    };
    let ids = vec!["train_0".to_string()];
    let (ll, _) = train_low_level(dataset(), Some(&ids), &f.codec, &spec).unwrap();
    let songs = vec![dataset().song("train_0").unwrap()];
    let (xs, _) = low_level_samples(&songs, &f.codec, &spec).unwrap();
    let mut sq = 0.0;
    let mut n = 0;
    for x in &xs {
        for v in ll.output_norm.invert(&ll.net.forward(&ll.input_norm.apply(x))) {
            sq += v * v;
            n += 1;
        }
    }
    assert!((sq / n as f64).sqrt() < 1e-3);
    assert!(train_low_level(dataset(), Some(&["nope".to_string()]), &f.codec, &spec).is_err());
}

#[test]
fn direct_head_reproduces_training_actions() {
    let f = fixture();
    let spec = LowLevelSpec {
        mode: LowLevelMode::Direct,
        hidden: vec![64],
        fit: quick_fit(400),
        ..LowLevelSpec::default()
    };
    let ids = vec!["train_0".to_string()];
    let (ll, _) = train_low_level(dataset(), Some(&ids), &f.codec, &spec).unwrap();
    let songs = vec![dataset().song("train_0").unwrap()];
    let (xs, ys) = low_level_samples(&songs, &f.codec, &spec).unwrap();
    let mut sq = 0.0;
    let mut n = 0;
    for (x, y) in xs.iter().zip(&ys) {
        let out = ll.output_norm.invert(&ll.net.forward(&ll.input_norm.apply(x)));
        for (row_o, row_y) in out.chunks(ACTION_DIM).zip(y.chunks(ACTION_DIM)) {
            for j in 0..NUM_JOINTS {
                sq += (row_o[j] - row_y[j]).powi(2);
                n += 1;
            }
        }
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 1e-2, "rms {rms}");
}

#[test]
fn replaying_expert_actions_reproduces_the_expert() {
    let f = fixture();
    let ep = &f.episodes[0];
    let expert = play_actions(&mut f.env.clone(), &ep.song, &ep.demo, &ep.nominal, &ep.nominal).unwrap();
    let run = chunked_execute(
        &mut f.env.clone(),
        ep,
        ctx(f),
        PlanSource::Oracle,
        ActionSource::Replay(&ep.nominal),
    )
    .unwrap();
    assert_eq!(run.log, expert);
    assert_eq!(run.invocations, ep.len().div_ceil(4));
    assert_eq!(run.plan.len(), ep.len());
}

#[test]
fn zero_residual_head_is_ik_tracking_of_the_plan() {
    let f = fixture();
    let spec = LowLevelSpec {
        hidden: vec![8],
        fit: quick_fit(0),
        ..LowLevelSpec::default()
    };
    let (mut ll, _) = train_low_level(dataset(), None, &f.codec, &spec).unwrap();
    ll.net = ll.net.zeroed();
    let ep = &f.episodes[1];
    let run = chunked_execute(&mut f.env.clone(), ep, ctx(f), PlanSource::Oracle, ActionSource::Learned(&ll)).unwrap();
    let spec = f.env.spec();
    let mut q = ep.nominal[0].clamped(spec);
    for (t, fr) in run.log.frames.iter().enumerate() {
        let tasks = tasks_for_frame(&run.plan[t]);
        for _ in 0..f.ik.iters_per_frame {
            q = ik_step(spec, &q, &tasks, &f.ik).unwrap().q_next;
        }
        assert_eq!(fr.action.as_slice(), q.clamped(spec).as_slice(), "frame {t}");
    }
    assert!(run.metrics.f1 > 0.8);
}
