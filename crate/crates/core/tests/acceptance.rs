//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! values. Exits 0 regardless so the workspace test run reports every line;
//! set `ACCEPTANCE_STRICT=1` to exit 1 on any failure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raymap::assoc::{enumerate_exact, run_bp, AssociationProblem, BpConfig, Edge, Marginals};
use raymap::baseline::intersection_kmeans;
use raymap::calibrate::{elbo, train, ClassState, FrozenPosterior, TrainConfig};
use raymap::cluster::{run_em, EmConfig};
use raymap::domain::{make_ray, Mat2, Ray, SceneBatch, SensorParams, SensorValues, Vec2, N_PARAMS};
use raymap::eval::{match_predictions, matched_rmse, pr_curve, score_thresholds, Prediction};
use raymap::priors::{fit_affinity, PriorDensity};
use raymap::sensor::{
    assignment_potential, log_detect_prob, log_f, log_miss_prob, LikelihoodEval,
};
use raymap::solver::{assemble_loss, newton_step, regularizer, NewtonConfig};
use raymap::synth::{generate, Distractors, FrameLayout, Placement, RoadGrid, SynthConfig};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn max_abs_diff(a: &Marginals, b: &Marginals) -> f64 {
    a.existence
        .iter()
        .zip(&b.existence)
        .chain(a.assignment.iter().zip(&b.assignment))
        .chain(a.null_mass.iter().zip(&b.null_mass))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn converged_bp() -> BpConfig {
    BpConfig {
        max_iters: 200,
        damping: 0.0,
        tol: 1e-12,
    }
}

// ---------------------------------------------------------------------------

fn tree_exactness() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n_rays = rng.random_range(1..=8);
        let edges = (0..n_rays)
            .map(|ray| Edge {
                object: 0,
                ray,
                log_psi: rng.random_range(-4.0..4.0),
            })
            .collect();
        let problem = AssociationProblem::new(n_rays, vec![rng.random_range(-4.0..4.0)], edges).unwrap();
        let bp = run_bp(&problem, &converged_bp()).unwrap();
        worst = worst.max(max_abs_diff(&bp, &enumerate_exact(&problem).unwrap()));
    }
    let elapsed = started.elapsed();
    verdict(
        worst < 1e-6 && within(elapsed, 1.0),
        format!("200 instances, max |BP − exact| {worst:.2e}, {elapsed:.2?}"),
    )
}

fn loopy_accuracy() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let mut good = 0;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let n_objects = rng.random_range(1..=3);
        let n_rays = rng.random_range(1..=5);
        let mut edges = Vec::new();
        for object in 0..n_objects {
            for ray in 0..n_rays {
                if rng.random_bool(0.7) {
                    edges.push(Edge {
                        object,
                        ray,
                        log_psi: rng.random_range(-3.0..3.0),
                    });
                }
            }
        }
        let log_psi_e = (0..n_objects).map(|_| rng.random_range(-3.0..3.0)).collect();
        let problem = AssociationProblem::new(n_rays, log_psi_e, edges).unwrap();
        let d = max_abs_diff(
            &run_bp(&problem, &converged_bp()).unwrap(),
            &enumerate_exact(&problem).unwrap(),
        );
        worst = worst.max(d);
        if d <= 0.05 {
            good += 1;
        }
    }
    let elapsed = started.elapsed();
    let frac = good as f64 / n as f64;
    verdict(
        frac >= 0.98 && within(elapsed, 5.0),
        format!("{good}/{n} within 0.05 ({:.1}%), worst {worst:.3}, {elapsed:.2?}", 100.0 * frac),
    )
}

fn worked_values() -> Verdict {
    let fixture = |n_rays: usize| {
        let edges = (0..n_rays).map(|ray| Edge { object: 0, ray, log_psi: 0.0 }).collect();
        let problem = AssociationProblem::new(n_rays, vec![0.0], edges).unwrap();
        run_bp(&problem, &converged_bp()).unwrap()
    };
    let one = fixture(1);
    let two = fixture(2);
    let errs = [
        (one.existence[0] - 2.0 / 3.0).abs(),
        (one.assignment[0] - 1.0 / 3.0).abs(),
        (two.existence[0] - 4.0 / 5.0).abs(),
        (two.assignment[0] - 2.0 / 5.0).abs(),
        (two.assignment[1] - 2.0 / 5.0).abs(),
    ];
    let worst = errs.iter().copied().fold(0.0, f64::max);
    verdict(
        worst < 1e-6,
        format!(
            "1 ray: ē {:.9} ā {:.9}; 2 rays: ē {:.9} ā {:.9}",
            one.existence[0], one.assignment[0], two.existence[0], two.assignment[0]
        ),
    )
}

// ---------------------------------------------------------------------------

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(scale)
}

#[derive(Default)]
struct DerivativeErrors {
    grad: f64,
    hess: f64,
    points: usize,
}

impl DerivativeErrors {
    fn pass(&self) -> bool {
        self.grad < 1e-4 && self.hess < 1e-3 && self.points >= 50
    }
}

/// Central differences of a position/parameter function against its
/// analytic derivatives.
fn check_eval(
    errs: &mut DerivativeErrors,
    f: &dyn Fn(&Vec2, &SensorParams) -> LikelihoodEval,
    x: &Vec2,
    p: &SensorParams,
) {
    let e = f(x, p);
    let h = 1e-5 * x.norm().max(1.0);
    for k in 0..2 {
        let mut dx = Vec2::zeros();
        dx[k] = h;
        let (hi, lo) = (f(&(x + dx), p), f(&(x - dx), p));
        let fd = (hi.log_density - lo.log_density) / (2.0 * h);
        errs.grad = errs.grad.max(rel_err(fd, e.grad_position[k], 1e-3));
        for m in 0..2 {
            let fd = (hi.grad_position[m] - lo.grad_position[m]) / (2.0 * h);
            errs.hess = errs.hess.max(rel_err(fd, e.hessian_position[(m, k)], 1e-4));
        }
    }
    let raw = p.unconstrained();
    for k in 0..N_PARAMS {
        let (mut hi, mut lo) = (raw, raw);
        hi[k] += 1e-5;
        lo[k] -= 1e-5;
        let fh = f(x, &SensorParams::from_unconstrained(hi).unwrap()).log_density;
        let fl = f(x, &SensorParams::from_unconstrained(lo).unwrap()).log_density;
        errs.grad = errs.grad.max(rel_err((fh - fl) / 2e-5, e.grad_params[k], 1e-4));
    }
    errs.points += 1;
}

fn random_params(rng: &mut ChaCha8Rng) -> SensorParams {
    SensorParams::from_unconstrained([
        rng.random_range(-5.0..-2.0),
        rng.random_range(-4.0..-1.0),
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..3.0),
        rng.random_range(0.2..2.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-8.0..-5.0),
        rng.random_range(-3.0..1.0),
    ])
    .unwrap()
}

fn random_ray_and_point(rng: &mut ChaCha8Rng) -> (Ray, Vec2) {
    let origin = Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
    let angle = rng.random_range(-PI..PI);
    let ray = make_ray(origin, angle, rng.random_range(0.05..0.95), 1, "f").unwrap();
    let r = rng.random_range(3.0..120.0);
    let off = rng.random_range(-1.2..1.2);
    (ray, origin + Vec2::new((angle + off).cos(), (angle + off).sin()) * r)
}

fn sensor_derivatives(rng: &mut ChaCha8Rng) -> DerivativeErrors {
    let mut errs = DerivativeErrors::default();
    let mut per_fn = BTreeMap::new();
    for _ in 0..60 {
        let (ray, x) = random_ray_and_point(rng);
        let p = random_params(rng);
        let fns: [(&str, &dyn Fn(&Vec2, &SensorParams) -> LikelihoodEval); 4] = [
            ("log_f", &|x, p| log_f(&ray, x, p).unwrap()),
            ("log_pd", &|x, p| log_detect_prob(&ray, x, p).unwrap()),
            ("log_miss", &|x, p| log_miss_prob(&ray, x, p).unwrap()),
            ("assignment", &|x, p| assignment_potential(&ray, x, p).unwrap().composed()),
        ];
        for (name, f) in fns {
            check_eval(&mut errs, f, &x, &p);
            *per_fn.entry(name).or_insert(0) += 1;
        }
    }
    errs.points = per_fn.values().copied().min().unwrap_or(0);
    errs
}

fn prior_derivatives(rng: &mut ChaCha8Rng) -> DerivativeErrors {
    let mut errs = DerivativeErrors::default();
    for _ in 0..60 {
        let k = rng.random_range(1..6);
        let points = (0..k)
            .map(|_| Vec2::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0)))
            .collect();
        let prior = PriorDensity::spike_slab(
            90_000.0,
            points,
            rng.random_range(5.0..30.0),
            BTreeMap::from([(1, rng.random_range(0.05..0.95))]),
        )
        .unwrap();
        let x = Vec2::new(rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
        let e = prior.log_prior(&x, 1);
        let h = 1e-4;
        for d in 0..2 {
            let mut dx = Vec2::zeros();
            dx[d] = h;
            let (hi, lo) = (prior.log_prior(&(x + dx), 1), prior.log_prior(&(x - dx), 1));
            errs.grad = errs.grad.max(rel_err((hi.value - lo.value) / (2.0 * h), e.grad[d], 1e-3));
            for m in 0..2 {
                let fd = (hi.grad[m] - lo.grad[m]) / (2.0 * h);
                errs.hess = errs.hess.max(rel_err(fd, e.hessian[(m, d)], 1e-4));
            }
        }
        errs.points += 1;
    }
    errs
}

/// A small random association problem with consistent marginals.
fn random_frozen(rng: &mut ChaCha8Rng) -> (Vec<Ray>, Vec<Vec2>, AssociationProblem, Marginals) {
    let n_objects = rng.random_range(1..=3);
    let n_rays = rng.random_range(2..=6);
    let positions: Vec<Vec2> = (0..n_objects)
        .map(|_| Vec2::new(rng.random_range(40.0..60.0), rng.random_range(40.0..60.0)))
        .collect();
    let rays: Vec<Ray> = (0..n_rays)
        .map(|j| {
            let target = positions[j % n_objects];
            let a = rng.random_range(-PI..PI);
            let origin = target + Vec2::new(a.cos(), a.sin()) * rng.random_range(15.0..60.0);
            let d = target - origin;
            make_ray(origin, d.y.atan2(d.x) + rng.random_range(-0.1..0.1), 0.7, 1, format!("f{j}")).unwrap()
        })
        .collect();
    let edges = (0..n_objects)
        .flat_map(|object| (0..n_rays).map(move |ray| (object, ray)))
        .map(|(object, ray)| Edge {
            object,
            ray,
            log_psi: rng.random_range(-2.0..2.0),
        })
        .collect();
    let log_psi_e = (0..n_objects).map(|_| rng.random_range(-1.0..2.0)).collect();
    let problem = AssociationProblem::new(n_rays, log_psi_e, edges).unwrap();
    let marginals = run_bp(&problem, &converged_bp()).unwrap();
    (rays, positions, problem, marginals)
}

fn loss_derivatives(rng: &mut ChaCha8Rng) -> DerivativeErrors {
    let mut errs = DerivativeErrors::default();
    let prior = PriorDensity::spike_slab(
        10_000.0,
        vec![Vec2::new(50.0, 50.0)],
        10.0,
        BTreeMap::from([(1, 0.6)]),
    )
    .unwrap();
    while errs.points < 60 {
        let (rays, positions, problem, marginals) = random_frozen(rng);
        let params = random_params(rng);
        let loss = |pos: &[Vec2]| {
            assemble_loss(pos, &problem, &marginals, &rays, &params, &prior, 1).unwrap()
        };
        let base = loss(&positions);
        let h = 1e-5 * 50.0;
        for i in 0..positions.len() {
            for d in 0..2 {
                let (mut hi, mut lo) = (positions.clone(), positions.clone());
                hi[i][d] += h;
                lo[i][d] -= h;
                let (lh, ll) = (loss(&hi), loss(&lo));
                let fd = (lh.loss - ll.loss) / (2.0 * h);
                errs.grad = errs.grad.max(rel_err(fd, base.grad[i][d], 1e-3));
                for m in 0..2 {
                    let fd = (lh.grad[i][m] - ll.grad[i][m]) / (2.0 * h);
                    errs.hess = errs.hess.max(rel_err(fd, base.hessian[i][(m, d)], 1e-4));
                }
            }
        }
        errs.points += 1;
    }
    errs
}

fn elbo_derivatives(rng: &mut ChaCha8Rng) -> DerivativeErrors {
    let mut errs = DerivativeErrors::default();
    let prior = PriorDensity::uniform(10_000.0).unwrap();
    while errs.points < 60 {
        let (rays, positions, problem, marginals) = random_frozen(rng);
        let post = FrozenPosterior {
            rays: &rays,
            positions: &positions,
            problem: &problem,
            marginals: &marginals,
            class_id: 1,
        };
        let params = random_params(rng);
        let report = elbo(&post, &params, &prior).unwrap();
        let raw = params.unconstrained();
        for k in 0..N_PARAMS {
            let (mut hi, mut lo) = (raw, raw);
            hi[k] += 1e-5;
            lo[k] -= 1e-5;
            let eh = elbo(&post, &SensorParams::from_unconstrained(hi).unwrap(), &prior).unwrap().elbo;
            let el = elbo(&post, &SensorParams::from_unconstrained(lo).unwrap(), &prior).unwrap().elbo;
            errs.grad = errs.grad.max(rel_err((eh - el) / 2e-5, report.grad_params[k], 1e-4));
        }
        errs.points += 1;
    }
    errs
}

fn derivative_suite() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let parts = [
        ("sensor", sensor_derivatives(&mut rng)),
        ("prior", prior_derivatives(&mut rng)),
        ("loss", loss_derivatives(&mut rng)),
        ("elbo", elbo_derivatives(&mut rng)),
    ];
    let elapsed = started.elapsed();
    let detail: Vec<String> = parts
        .iter()
        .map(|(name, e)| format!("{name}: {} pts grad {:.1e} hess {:.1e}", e.points, e.grad, e.hess))
        .collect();
    verdict(
        parts.iter().all(|(_, e)| e.pass()) && within(elapsed, 10.0),
        format!("{}; {elapsed:.2?}", detail.join("; ")),
    )
}

fn newton_exactness() -> Verdict {
    let cfg = NewtonConfig {
        trust_radius: f64::INFINITY,
        eig_floor: 0.0,
        line_search: false,
    };
    let a = Mat2::new(4.0, 1.0, 1.0, 3.0);
    let target = Vec2::new(7.0, -2.5);
    let x = Vec2::new(-3.0, 11.0);
    let step = newton_step(&[x], &[a * (x - target)], &[a], &cfg, None).unwrap();
    let miss = (step.positions_new[0] - target).norm();

    let indefinite = Mat2::new(1.0, 0.0, 0.0, -2.0);
    let floored = NewtonConfig { eig_floor: 0.1, ..cfg };
    let shift = regularizer(&indefinite, &Vec2::zeros(), &floored);
    let reg_err = (indefinite + Mat2::identity() * shift - Mat2::new(3.1, 0.0, 0.0, 0.1)).norm();
    verdict(
        miss < 1e-9 && reg_err < 1e-12,
        format!("quadratic miss {miss:.1e}; regularized block error {reg_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------

fn recovery_scene() -> SynthConfig {
    SynthConfig {
        // 22 m grid: about 20 rays per object; clutter rate gives about 10% of rays
        frames: FrameLayout::Grid {
            spacing: 22.0,
            headings: 4,
            heading_offset_deg: 0.0,
        },
        clutter_rate: 0.055,
        seed: 1,
        ..SynthConfig::default()
    }
}

fn synthetic_recovery() -> Verdict {
    let cfg = recovery_scene();
    let scene = generate(&cfg).unwrap();
    let truth: Vec<Vec2> = scene.batch.ground_truth().unwrap().iter().map(|t| t.position).collect();
    let n_clutter = scene
        .provenance
        .iter()
        .filter(|p| **p == raymap::synth::RaySource::Clutter)
        .count();
    let n_rays = scene.batch.rays().len();
    let region = cfg.region().unwrap();
    let prior = PriorDensity::uniform(region.area()).unwrap();
    let em = EmConfig::default();

    let started = Instant::now();
    let result = run_em(&scene.batch, &cfg.sensor_params().unwrap(), &prior, &em).unwrap();
    let elapsed = started.elapsed();

    let preds: Vec<Prediction> = result.hypotheses.iter().map(Prediction::from).collect();
    let kept: Vec<Prediction> = preds.iter().filter(|p| p.score >= 0.5).copied().collect();
    let m = match_predictions(&kept, &truth, 10.0).unwrap();
    let rmse = matched_rmse(&kept, &truth, &m).unwrap_or(f64::INFINITY);
    let auc = pr_curve(&preds, &truth, 10.0, &score_thresholds(&preds)).unwrap().auc;

    let base = intersection_kmeans(&scene.batch, &em, truth.len(), cfg.seed);
    let base_auc = pr_curve(&base, &truth, 10.0, &score_thresholds(&base)).unwrap().auc;

    let pass = m.precision() >= 0.9
        && m.recall() >= 0.9
        && rmse <= 2.0
        && base_auc < auc
        && within(elapsed, 60.0);
    verdict(
        pass,
        format!(
            "{n_rays} rays ({:.1}/object, {:.1}% clutter): P {:.3} R {:.3} RMSE {rmse:.2} m, \
             AUC {auc:.3} vs baseline {base_auc:.3}, {elapsed:.2?}",
            (n_rays - n_clutter) as f64 / truth.len() as f64,
            100.0 * n_clutter as f64 / n_rays as f64,
            m.precision(),
            m.recall(),
        ),
    )
}

fn look_past_pruning() -> Verdict {
    // two pairs of rays from opposite sides, each pair converging on (50, 0)
    let target = Vec2::new(50.0, 0.0);
    let rays: Vec<Ray> = [(0.0, 7.03), (0.0, -7.03), (100.0, 7.03), (100.0, -7.03)]
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let o = Vec2::new(x, y);
            let d = target - o;
            make_ray(o, d.y.atan2(d.x), 0.9, 1, format!("f{k}")).unwrap()
        })
        .collect();
    let batch = SceneBatch::from_rays(rays, None, 10.0);
    let params = SensorParams::new(SensorValues {
        angular_sigma: 0.02,
        gps_sigma: 0.5,
        ..SensorValues::default()
    })
    .unwrap();
    let prior = PriorDensity::uniform(100.0 * 100.0).unwrap();
    let with = run_em(&batch, &params, &prior, &EmConfig::default()).unwrap();
    let without = run_em(
        &batch,
        &params,
        &prior,
        &EmConfig {
            eccentricity_max: 1.0,
            ..EmConfig::default()
        },
    )
    .unwrap();
    verdict(
        with.hypotheses.is_empty() && !without.hypotheses.is_empty(),
        format!(
            "default eccentricity_max: {} survivors; pruning off: {}",
            with.hypotheses.len(),
            without.hypotheses.len()
        ),
    )
}

fn calibration_batches(truth: SensorValues, n: u64) -> Vec<SceneBatch> {
    (0..n)
        .map(|k| {
            generate(&SynthConfig {
                region_max: [150.0, 150.0],
                n_objects: 6,
                frames: FrameLayout::Grid {
                    spacing: 20.0,
                    headings: 4,
                    heading_offset_deg: 0.0,
                },
                sensor: truth,
                clutter_rate: 0.05,
                seed: 100 + k,
                ..SynthConfig::default()
            })
            .unwrap()
            .batch
        })
        .collect()
}

fn calibration_recovery() -> Verdict {
    let truth = SensorValues::default();
    let batches = calibration_batches(truth, 20);
    let init = SensorParams::new(SensorValues {
        angular_sigma: truth.angular_sigma * 2.0,
        gps_sigma: truth.gps_sigma * 0.5,
        ..truth
    })
    .unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.001,
        decay: 0.7,
        steps: 200,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let out = train(
        &batches,
        BTreeMap::from([(1, ClassState::fresh(init))]),
        &PriorDensity::uniform(150.0 * 150.0).unwrap(),
        &EmConfig::default(),
        &cfg,
    )
    .unwrap();
    let elapsed = started.elapsed();
    let p = out.classes[&1].state.params;
    let sigma_err = p.angular_sigma() / truth.angular_sigma - 1.0;
    let gps_err = p.gps_sigma() / truth.gps_sigma - 1.0;
    verdict(
        sigma_err.abs() < 0.25 && gps_err.abs() < 0.25 && within(elapsed, 300.0),
        format!(
            "σθ {:.4} ({:+.0}%), σ_gps {:.3} ({:+.0}%) after 200 steps at lr 0.001/decay 0.7, {elapsed:.2?}",
            p.angular_sigma(),
            100.0 * sigma_err,
            p.gps_sigma(),
            100.0 * gps_err
        ),
    )
}

fn road_scene(seed: u64) -> SynthConfig {
    SynthConfig {
        region_max: [400.0, 400.0],
        n_objects: 20,
        roads: Some(RoadGrid { block: 80.0 }),
        frames: FrameLayout::Streets { spacing: 10.0 },
        placement: Placement::NearIntersections { jitter: 3.0 },
        distractors: Distractors {
            count: 20,
            ..Distractors::default()
        },
        clutter_rate: 0.1,
        seed,
        ..SynthConfig::default()
    }
}

fn road_prior_ablation() -> Verdict {
    // affinity fitted on held-out scenes
    let template_cfg = road_scene(1000);
    let area = template_cfg.region().unwrap().area();
    let intersections = template_cfg.intersections().unwrap();
    let template = PriorDensity::spike_slab(area, intersections.clone(), 15.0, BTreeMap::from([(1, 0.5)])).unwrap();
    let held_out: Vec<_> = (1000..1005)
        .flat_map(|s| generate(&road_scene(s)).unwrap().batch.ground_truth().unwrap().to_vec())
        .collect();
    let affinity = fit_affinity(&held_out, &template, (2.0, 2.0)).unwrap();

    let (mut uni, mut spk) = ((0, 0, 0), (0, 0, 0));
    for seed in 0..10 {
        let cfg = road_scene(seed);
        let scene = generate(&cfg).unwrap();
        let truth: Vec<Vec2> = scene.batch.ground_truth().unwrap().iter().map(|t| t.position).collect();
        let params = cfg.sensor_params().unwrap();
        let spike = PriorDensity::spike_slab(area, cfg.intersections().unwrap(), 15.0, affinity.clone()).unwrap();
        for (prior, tally) in [(PriorDensity::uniform(area).unwrap(), &mut uni), (spike, &mut spk)] {
            let r = run_em(&scene.batch, &params, &prior, &EmConfig::default()).unwrap();
            let kept: Vec<Prediction> = r
                .hypotheses
                .iter()
                .map(Prediction::from)
                .filter(|p| p.score >= 0.5)
                .collect();
            let m = match_predictions(&kept, &truth, 10.0).unwrap();
            tally.0 += m.tp;
            tally.1 += m.fp;
            tally.2 += m.fn_;
        }
    }
    let pr = |(tp, fp, fn_): (usize, usize, usize)| {
        (tp as f64 / (tp + fp).max(1) as f64, tp as f64 / (tp + fn_).max(1) as f64)
    };
    let ((pu, ru), (ps, rs)) = (pr(uni), pr(spk));
    verdict(
        ps >= pu && (rs - ru).abs() <= 0.02,
        format!(
            "affinity {:.3}; uniform P {pu:.3} R {ru:.4} {uni:?}; spike-slab P {ps:.3} R {rs:.4} {spk:?} (tp, fp, fn) over 10 seeds",
            affinity[&1]
        ),
    )
}

fn determinism_and_scale() -> Verdict {
    let cfg = SynthConfig {
        region_max: [1000.0, 1000.0],
        n_objects: 650,
        clutter_rate: 0.05,
        seed: 10,
        ..SynthConfig::default()
    };
    let scene = generate(&cfg).unwrap();
    let params = cfg.sensor_params().unwrap();
    let prior = PriorDensity::uniform(cfg.region().unwrap().area()).unwrap();
    let em = EmConfig::default();
    let started = Instant::now();
    let a = run_em(&scene.batch, &params, &prior, &em).unwrap();
    let elapsed = started.elapsed();
    let b = run_em(&scene.batch, &params, &prior, &em).unwrap();
    let identical = a.hypotheses == b.hypotheses && a.marginals == b.marginals && a.diagnostics == b.diagnostics;
    let n_rays = scene.batch.rays().len();
    let first_edges = a.diagnostics.iterations.first().map_or(0, |d| d.edges);
    verdict(
        identical && n_rays >= 10_000 && a.diagnostics.seeded >= 1_000 && within(elapsed, 600.0),
        format!(
            "{n_rays} rays, {} seeds, {first_edges} edges in round 1 ({:.1}/ray), {} hypotheses, \
             bitwise identical: {identical}, {elapsed:.2?}",
            a.diagnostics.seeded,
            first_edges as f64 / n_rays as f64,
            a.hypotheses.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("1 BP tree exactness", tree_exactness),
        ("2 BP loopy accuracy", loopy_accuracy),
        ("3 worked BP values", worked_values),
        ("4 derivative suite", derivative_suite),
        ("5 Newton exactness", newton_exactness),
        ("6 synthetic recovery", synthetic_recovery),
        ("7 look-past pruning", look_past_pruning),
        ("8 calibration recovery", calibration_recovery),
        ("9 road-prior ablation", road_prior_ablation),
        ("10 determinism and scale", determinism_and_scale),
    ];
    let only: Option<String> = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = 0;
    for (name, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(&format!("{o} "))) {
            continue;
        }
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
