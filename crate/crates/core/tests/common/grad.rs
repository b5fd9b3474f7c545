//! Finite-difference checks of every training loss, end to end through the encoders.

use ncu_core::confidence::BatchPartition;
use ncu_core::encoders::{encode_image, encode_text, init_params, neg_text, BoundParams, EncoderParams, ModelDims, ParamGroup, ParamId};
use ncu_core::hn_losses::{hn_total_l2_var, hn_total_var, itm_loss_var, rel_loss_var, sep_loss_var, HnLossConfig};
use ncu_core::numcore::{central_diff_check, Graph, Matrix, Var};
use ncu_core::ot::{blend_alignment, build_mask, extend_cost, masked_sinkhorn, SinkhornConfig, TransportProblem};
use ncu_core::unlearn_losses::{
    build_p_var, gradient_ascent_var, infonce_loss_var, otr_loss_var, smoothed_infonce_loss_var, ul_total_var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POINTS: usize = 10;
pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Points whose hinge arguments sit closer than this to a kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

const N: usize = 7;
const FORGET: [usize; 2] = [0, 4];
const DIMS: ModelDims = ModelDims { image_in: 5, text_in: 4, hidden: 6, embed: 3, neg_context: 2 };
const ENCODERS: &[ParamGroup] = &[ParamGroup::ImageTower, ParamGroup::TextTower, ParamGroup::Temperature];
const NEG_LEARNING: &[ParamGroup] = &[ParamGroup::TextTower, ParamGroup::NegHead];
const ALL: &[ParamGroup] = &[ParamGroup::ImageTower, ParamGroup::TextTower, ParamGroup::Temperature, ParamGroup::NegHead];

pub struct Point {
    params: EncoderParams,
    x: Matrix,
    y: Matrix,
    part: BatchPartition,
    targets: Matrix,
    hn: HnLossConfig,
}

type Build = fn(&mut Graph, &BoundParams, &Point) -> Var;

pub struct Case {
    pub name: &'static str,
    groups: &'static [ParamGroup],
    build: Build,
    hinged: bool,
}

struct Embedded {
    v: Var,
    t: Var,
    t_neg: Var,
    tau: Var,
}

fn embed(g: &mut Graph, b: &BoundParams, p: &Point) -> Embedded {
    let x = g.constant(p.x.clone());
    let y = g.constant(p.y.clone());
    let v = b.encode_image(g, x);
    let t = b.encode_text(g, y);
    let t_neg = b.neg_text(g, t);
    let tau = b.tau(g);
    Embedded { v, t, t_neg, tau }
}

fn rows(g: &mut Graph, m: Var, idx: &[usize]) -> Var {
    g.select_rows(m, idx)
}

pub fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "infonce",
            groups: ENCODERS,
            build: |g, b, p| {
                let e = embed(g, b, p);
                infonce_loss_var(g, e.v, e.t, e.tau)
            },
            hinged: false,
        },
        Case {
            name: "smoothed_infonce",
            groups: ENCODERS,
            build: |g, b, p| {
                let e = embed(g, b, p);
                smoothed_infonce_loss_var(g, e.v, e.t, e.tau, 0.1)
            },
            hinged: false,
        },
        Case {
            name: "sep",
            groups: NEG_LEARNING,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let (t, n) = (rows(g, e.t, &p.part.rt_indices), rows(g, e.t_neg, &p.part.rt_indices));
                sep_loss_var(g, t, n, &p.hn)
            },
            hinged: true,
        },
        Case {
            name: "rel",
            groups: NEG_LEARNING,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let (t, n) = (rows(g, e.t, &p.part.rt_indices), rows(g, e.t_neg, &p.part.rt_indices));
                rel_loss_var(g, t, n)
            },
            hinged: false,
        },
        Case {
            name: "itm",
            groups: ALL,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let rt = &p.part.rt_indices;
                let (t, n, v) = (rows(g, e.t, rt), rows(g, e.t_neg, rt), rows(g, e.v, rt));
                itm_loss_var(g, t, n, v, e.tau)
            },
            hinged: false,
        },
        Case {
            name: "hn_total",
            groups: ALL,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let rt = &p.part.rt_indices;
                let (t, n, v) = (rows(g, e.t, rt), rows(g, e.t_neg, rt), rows(g, e.v, rt));
                hn_total_var(g, t, n, v, e.tau, &p.hn)
            },
            hinged: true,
        },
        Case {
            name: "hn_total_l2",
            groups: ALL,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let rt = &p.part.rt_indices;
                let (t, n, v) = (rows(g, e.t, rt), rows(g, e.t_neg, rt), rows(g, e.v, rt));
                hn_total_l2_var(g, t, n, v, e.tau, &p.hn)
            },
            hinged: false,
        },
        Case {
            name: "otr",
            groups: ALL,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let logits = build_p_var(g, e.v, e.t, e.t_neg);
                otr_loss_var(g, logits, &p.targets, e.tau)
            },
            hinged: false,
        },
        Case {
            name: "ul_total",
            groups: ALL,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let logits = build_p_var(g, e.v, e.t, e.t_neg);
                let rt = &p.part.rt_indices;
                let (t, n) = (rows(g, e.t, rt), rows(g, e.t_neg, rt));
                ul_total_var(g, logits, &p.targets, t, n, &p.hn, e.tau)
            },
            hinged: true,
        },
        Case {
            name: "gradient_ascent",
            groups: ENCODERS,
            build: |g, b, p| {
                let e = embed(g, b, p);
                let (fg, rt) = (&p.part.fg_indices, &p.part.rt_indices);
                let forget = (rows(g, e.v, fg), rows(g, e.t, fg));
                let retain = (rows(g, e.v, rt), rows(g, e.t, rt));
                gradient_ascent_var(g, forget, retain, e.tau, 0.1)
            },
            hinged: false,
        },
    ]
}

fn point(seed: u64) -> Point {
    let mut params = init_params(seed, DIMS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    // Keep τ well inside its clamp so the exponential is differentiable.
    params.log_tau[(0, 0)] = rng.random_range(0.05f64.ln()..0.5f64.ln());
    let x = Matrix::from_fn(N, DIMS.image_in, |_, _| rng.random_range(-1.0..1.0));
    let y = Matrix::from_fn(N, DIMS.text_in, |_, _| rng.random_range(-1.0..1.0));
    let part = BatchPartition::from_forget_set(N, &FORGET);

    let v = encode_image(&params, &x).unwrap();
    let t = encode_text(&params, &y).unwrap();
    let t_neg = neg_text(&params, &t).unwrap();
    let cost = extend_cost(&v, &t, &t_neg).unwrap();
    let problem = TransportProblem::uniform(cost, build_mask(&part, N).unwrap(), 0.1).unwrap();
    let plan = masked_sinkhorn(&problem, &SinkhornConfig::default()).unwrap();
    let targets = blend_alignment(&plan, &part, 0.5).unwrap();
    Point { params, x, y, part, targets, hn: HnLossConfig::default() }
}

fn near_kink(p: &Point) -> bool {
    let t = encode_text(&p.params, &p.y).unwrap();
    let t_neg = neg_text(&p.params, &t).unwrap();
    p.part.rt_indices.iter().any(|&i| {
        let s: f64 = t.row(i).iter().zip(t_neg.row(i)).map(|(a, b)| a * b).sum();
        (s - p.hn.alpha).abs() < KINK_MARGIN || (s - p.hn.beta).abs() < KINK_MARGIN
    })
}

fn loss_and_grad(case: &Case, p: &Point, flat: &[f64]) -> (f64, Vec<f64>) {
    let mut params = p.params.clone();
    params.set_flat(case.groups, flat);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, case.groups);
    let out = (case.build)(&mut g, &bound, p);
    let grads = g.backward(out);
    let grad = ParamId::ALL
        .iter()
        .filter(|id| case.groups.contains(&id.group()))
        .flat_map(|&id| grads.get_or_zeros(bound.var(id), g.shape(bound.var(id))).into_vec())
        .collect();
    (g.scalar_value(out), grad)
}

/// Worst relative error of `case` over [`POINTS`] random points.
pub fn check_case(case: &Case) -> f64 {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < POINTS {
        seed += 1;
        let p = point(seed);
        if case.hinged && near_kink(&p) {
            continue;
        }
        let x0 = p.params.flatten(case.groups);
        let report =
            central_diff_check(|x| loss_and_grad(case, &p, x).0, |x| loss_and_grad(case, &p, x).1, &x0, STEP)
                .unwrap_or_else(|e| panic!("{}: {e}", case.name));
        worst = worst.max(report.max_rel_error);
        accepted += 1;
    }
    worst
}
