use candle_core::{Device, Tensor};
use proptest::prelude::*;

use semail::agent::lambda_returns;
use semail::buffer::{sample_union_sequences, ReplayBuffer};
use semail::checkpoint::{Checkpoint, NamedArray};
use semail::config::ExperimentConfig;
use semail::env::{random_action, run_episode, DistractedPointMass, PointMassParams, StripePattern};
use semail::episode::{Action, EpisodeRecord};
use semail::oracle::FDivergence;
use semail::rng::RandomSource;
use semail::world_model::fuse;

fn small_env(seed: u64, repeat: usize) -> (DistractedPointMass, RandomSource) {
    let params = PointMassParams {
        image_size: 8,
        max_steps: 12,
        action_repeat: repeat,
        ..PointMassParams::default()
    };
    (DistractedPointMass::new(params), RandomSource::new(seed))
}

fn small_episode(seed: u64) -> EpisodeRecord {
    let (mut env, mut rng) = small_env(seed, 2);
    run_episode(&mut env, &mut rng, seed.is_multiple_of(2), |_, _, rng| {
        Ok(random_action(rng))
    })
    .unwrap()
}

/// n-step-mixture form of the lambda return, summed directly.
fn lambda_oracle(r: &[f64], v: &[f64], g: f64, l: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let n_step = |n: usize| {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += g.powi(k as i32) * r[t + k];
                }
                acc + g.powi(n as i32) * v[t + n - 1]
            };
            let tail = h - t;
            let mut total = 0.0;
            for n in 1..tail {
                total += (1.0 - l) * l.powi(n as i32 - 1) * n_step(n);
            }
            total + l.powi(tail as i32 - 1) * n_step(tail)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn lambda_returns_match_the_n_step_mixture(
        rv in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
        g in 0.0f64..1.0,
        l in 0.0f64..=1.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let h = r.len();
        let rt = Tensor::from_vec(r.clone(), (1, h), &Device::Cpu).unwrap();
        let vt = Tensor::from_vec(v.clone(), (1, h), &Device::Cpu).unwrap();
        let got = lambda_returns(&rt, &vt, g, l).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(lambda_oracle(&r, &v, g, l)) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn agent_stays_in_bounds_and_background_ignores_actions(
        seed in any::<u64>(),
        repeat in 1usize..4,
        actions in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
    ) {
        let (mut a, mut rng_a) = small_env(seed, repeat);
        let (mut b, mut rng_b) = small_env(seed, repeat);
        a.reset(&mut rng_a);
        b.reset(&mut rng_b);
        let v = a.params().background_velocity;
        for (x, y) in actions {
            if a.is_done() {
                break;
            }
            let before = a.background_phase();
            a.step(&Action::clipped([x, y])).unwrap();
            b.step(&Action::clipped([-y, x])).unwrap();
            let p = a.agent_pos();
            prop_assert!(p.iter().all(|c| (-1.0..=1.0).contains(c)));
            prop_assert_eq!(a.background_phase(), b.background_phase());
            prop_assert!((a.background_phase() - before - repeat as f64 * v).abs() < 1e-9);
        }
    }

    #[test]
    fn frames_are_determined_by_seed_and_actions(seed in any::<u64>()) {
        prop_assert_eq!(small_episode(seed), small_episode(seed));
    }

    #[test]
    fn sampled_windows_are_contiguous_slices(seed in any::<u64>(), len in 1usize..6, batch in 1usize..5) {
        let mut agent = ReplayBuffer::new(3);
        let mut expert = ReplayBuffer::new(3);
        for i in 0..3 {
            agent.add_episode(small_episode(seed.wrapping_add(2 * i + 1))).unwrap();
            expert.add_episode(small_episode(seed.wrapping_add(2 * i))).unwrap();
        }
        let mut rng = RandomSource::new(seed);
        let sb = sample_union_sequences(&agent, &expert, batch, len, &mut rng).unwrap();
        for row in 0..batch {
            let found = agent.episodes().chain(expert.episodes()).any(|ep| {
                (0..=ep.len() - len).any(|s| {
                    (0..len).all(|t| {
                        sb.observation(row, t) == ep.observations()[s + t].pixels()
                            && sb.action(row, t) == ep.actions()[s + t].values()
                    })
                })
            });
            prop_assert!(found, "row {row} is not a window of any stored episode");
        }
    }

    #[test]
    fn fusion_stays_in_the_convex_hull(
        vals in proptest::collection::vec((-4.0f32..4.0, -4.0f32..4.0, 0.0f32..=1.0), 1..64),
    ) {
        let n = vals.len();
        let p: Vec<f32> = vals.iter().map(|v| v.0).collect();
        let m: Vec<f32> = vals.iter().map(|v| v.1).collect();
        let k: Vec<f32> = vals.iter().map(|v| v.2).collect();
        let t = |x: Vec<f32>| Tensor::from_vec(x, (1, 1, 1, n), &Device::Cpu).unwrap();
        let out = fuse(&t(p.clone()), &t(m.clone()), &t(k)).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for ((o, a), b) in out.iter().zip(&p).zip(&m) {
            let slack = 4.0 * f32::EPSILON * a.abs().max(b.abs());
            prop_assert!(*o >= a.min(*b) - slack && *o <= a.max(*b) + slack);
        }
    }

    #[test]
    fn divergences_are_nonnegative_and_vanish_on_equal_laws(
        raw in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0), 2..8),
    ) {
        let sp: f64 = raw.iter().map(|x| x.0).sum();
        let sq: f64 = raw.iter().map(|x| x.1).sum();
        let p: Vec<f64> = raw.iter().map(|x| x.0 / sp).collect();
        let q: Vec<f64> = raw.iter().map(|x| x.1 / sq).collect();
        for f in FDivergence::ALL {
            prop_assert!(f.divergence(&p, &q).unwrap() >= -1e-12, "{}", f.name());
            prop_assert!(f.divergence(&p, &p).unwrap().abs() <= 1e-12, "{}", f.name());
        }
    }

    #[test]
    fn episode_decoder_survives_corruption(seed in any::<u64>(), flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..8), cut in any::<usize>()) {
        let mut bytes = small_episode(seed).encode();
        for (i, b) in flips {
            let n = bytes.len();
            bytes[i % n] ^= b;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        if let Ok(ep) = EpisodeRecord::decode(&bytes) {
            let again = ep.encode();
            prop_assert_eq!(EpisodeRecord::decode(&again).unwrap().encode(), again);
        }
    }

    #[test]
    fn checkpoint_decoder_survives_corruption(flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..8), cut in any::<usize>()) {
        let ck = Checkpoint {
            meta: ExperimentConfig::default().to_text(),
            tensors: vec![
                NamedArray { name: "a.weight".into(), shape: vec![2, 3], data: vec![0.5; 6] },
                NamedArray { name: "a.bias".into(), shape: vec![3], data: vec![-1.0, 0.0, 1.0] },
            ],
        };
        let mut bytes = ck.encode();
        for (i, b) in flips {
            let n = bytes.len();
            bytes[i % n] ^= b;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        if let Ok(ck) = Checkpoint::decode(&bytes) {
            let again = ck.encode();
            prop_assert_eq!(Checkpoint::decode(&again).unwrap().encode(), again);
        }
    }

    #[test]
    fn config_parser_never_panics(text in "[a-z_ =#0-9.\\n-]{0,120}") {
        if let Ok(cfg) = ExperimentConfig::parse(&text) {
            prop_assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }
}

#[test]
fn stripe_patterns_differ() {
    let render = |pattern| {
        let mut env = DistractedPointMass::new(PointMassParams {
            pattern,
            ..PointMassParams::default()
        });
        env.reset(&mut RandomSource::new(1));
        env.render_background()
    };
    assert_ne!(render(StripePattern::A), render(StripePattern::B));
}
