mod common;

use common::*;
use nflslam::losses::{total_objective, LossWeights, ObjectiveOptions, Phase};
use nflslam::splatter::{render, render_backward, RenderOptions, RenderUpstream};

fn upstream_dot(out: &nflslam::splatter::RenderOutput, up: &RenderUpstream) -> f64 {
    let mut v = 0.0;
    for i in 0..out.color.len() {
        v += out.color.data()[i].dot(&up.color.as_ref().unwrap().data()[i]);
        v += out.depth.data()[i] * up.depth.as_ref().unwrap().data()[i];
        v += out.normal.data()[i].dot(&up.normal.as_ref().unwrap().data()[i]);
        v += out.accum_alpha.data()[i] * up.alpha.as_ref().unwrap().data()[i];
    }
    v
}

#[test]
fn render_backward_matches_finite_differences() {
    let k = small_intrinsics();
    let opts = RenderOptions::default();
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let n = 1 + (seed as usize % 5);
        let scene = random_scene(&mut r, n);
        let pose = random_pose(&mut r, 0.05);
        let up = RenderUpstream {
            color: Some(random_vector_map(&mut r, 8, 8, -1.0, 1.0)),
            depth: Some(random_scalar_map(&mut r, 8, 8, -1.0, 1.0)),
            normal: Some(random_vector_map(&mut r, 8, 8, -1.0, 1.0)),
            alpha: Some(random_scalar_map(&mut r, 8, 8, -1.0, 1.0)),
        };
        let out = render(&scene, &pose, &k, &opts).unwrap();
        let grads = render_backward(&scene, &pose, &k, &out, &up).unwrap();
        let active = all_params(n).iter().filter(|&&p| analytic_value(&grads, p).abs() > 1e-6).count();
        assert!(active * 2 > all_params(n).len(), "seed {seed}: gradient mostly zero ({active} active)");
        let bad = check_gradients(&scene, &pose, &grads, &all_params(n), 1e-3, 1e-6, |s, p| {
            upstream_dot(&render(s, p, &k, &opts).unwrap(), &up)
        });
        assert!(bad.is_empty(), "seed {seed}:\n{}", bad.join("\n"));
    }
}

#[test]
fn total_objective_matches_finite_differences_in_both_phases() {
    let k = small_intrinsics();
    let weights = LossWeights {
        lambda_depth: 0.4,
        lambda_nfl_tracking: 0.5,
        lambda_nfl_mapping: 0.7,
        lambda_reg: 0.1,
    };
    for seed in 100..120u64 {
        let mut r = rng(seed);
        let n = 1 + (seed as usize % 5);
        let scene = random_scene(&mut r, n);
        let pose = random_pose(&mut r, 0.05);
        let targets = random_targets(&mut r, 8, 8);
        for phase in [Phase::Tracking, Phase::Mapping] {
            let opts = ObjectiveOptions {
                mapping_pose_gradient: true,
                normalized_depth: seed % 2 == 0,
                ..ObjectiveOptions::default()
            };
            let (_, grads) = total_objective(&targets, &scene, &pose, &k, &weights, phase, &opts).unwrap();
            let params: Vec<Param> = all_params(n)
                .into_iter()
                .filter(|p| phase == Phase::Mapping || matches!(p, Param::Pose(_)))
                .collect();
            let bad = check_gradients(&scene, &pose, &grads, &params, 1e-3, 1e-6, |s, p| {
                total_objective(&targets, s, p, &k, &weights, phase, &opts).unwrap().0.total
            });
            assert!(bad.is_empty(), "seed {seed} {phase:?}:\n{}", bad.join("\n"));
        }
    }
}
